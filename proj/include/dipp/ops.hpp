#pragma once

// Differentiable tensor operations. Every op records its backward pass when
// an input requires grad and rejects non-finite results.

#include <cstddef>
#include <span>
#include <vector>

#include "dipp/kernels.hpp"
#include "dipp/tensor.hpp"

namespace dipp::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// Adds a constant (non-differentiable) tensor of the same shape.
Tensor add_const(const Tensor& a, std::span<const double> c);
// x [..., C] + b [C]
Tensor add_bias(const Tensor& x, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// x [..., K] * W [K, N] (+ b [N]); leading dims are preserved.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
// a [B,M,K] * b [B,K,N] -> [B,M,N]
Tensor bmm(const Tensor& a, const Tensor& b);

// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor softmax_last(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// [A, B, rest...] -> [B, A, rest...]
Tensor swap01(const Tensor& x);
Tensor concat0(const std::vector<Tensor>& parts);
Tensor slice0(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end);
// Rows along axis 0.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Inverse of gather_rows: src row i is added into output row rows[i]; the
// output has `n_rows` rows and is zero elsewhere.
Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t n_rows);
// Multiplies row i (axis 0) by the constant factor[i].
Tensor scale_rows(const Tensor& x, std::span<const double> factor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);

// maps [B,H,W,C] sampled at continuous (row, col) points -> [P, C].
// Gradient flows to the maps only.
Tensor sample_points(const Tensor& maps, std::span<const kernels::SamplePoint> points);

// x [B,H,W,Cin], w [K,K,Cin,Cout], b [Cout]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              kernels::PadMode pad = kernels::PadMode::Zeros);
// 2x2 average pooling with partial windows at odd edges: [B,H,W,C] -> [B,ceil(H/2),ceil(W/2),C]
Tensor avg_pool2(const Tensor& x);

// Max over points sharing a cell. feats [N,C], cell index per point ->
// [n_cells, C]; cells without points are zero.
Tensor pillar_max(const Tensor& feats, std::span<const std::size_t> cell_of_point,
                  std::size_t n_cells);

// Sum over all entries of the sigmoid focal loss against 0/1 targets.
Tensor sigmoid_focal_loss(const Tensor& logits, std::span<const double> targets, double alpha,
                          double gamma);
// Penalty-reduced focal loss against a Gaussian-splatted heatmap target in
// [0,1]; returns the sum (caller normalizes by the positive count).
Tensor gaussian_focal_loss(const Tensor& logits, std::span<const double> target,
                           double alpha = 2.0, double beta = 4.0);
// Sum of |pred - target| over entries whose weight is nonzero (weight multiplies).
Tensor l1_loss(const Tensor& pred, std::span<const double> target,
               std::span<const double> weight = {});

}  // namespace dipp::ops
