#include "dipp/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dipp/parallel.hpp"

namespace dipp {

using detail::Node;

void AttentionConfig::validate() const {
  if (heads == 0 || model_dim == 0 || model_dim % heads != 0) {
    throw ConfigError("attention model_dim " + std::to_string(model_dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ArgumentError("softmax of empty vector");
  check_finite(logits, "softmax input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += (out[i] = std::exp(logits[i] - mx));
  for (auto& v : out) v /= total;
  return out;
}

std::vector<double> sinusoidal_encoding(double position, std::size_t dim) {
  std::vector<double> pe(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double pair = static_cast<double>(i / 2 * 2);
    const double angle = position / std::pow(10000.0, pair / static_cast<double>(dim));
    pe[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

std::vector<double> sinusoidal_table(std::size_t count, std::size_t dim) {
  std::vector<double> table;
  table.reserve(count * dim);
  for (std::size_t p = 0; p < count; ++p) {
    auto row = sinusoidal_encoding(static_cast<double>(p), dim);
    table.insert(table.end(), row.begin(), row.end());
  }
  return table;
}

namespace {

// Gradient of one attention row given its forward weights.
void attend_row_backward(const double* q, const double* keys, const double* vals,
                         std::size_t stride, std::size_t n_keys, std::size_t C, std::size_t heads,
                         const double* weights, const double* gout, double* dq, double* dk,
                         double* dv) {
  const std::size_t d = C / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> dw(n_keys);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* w = weights + h * n_keys;
    const double* go = gout + h * d;
    double wdot = 0;
    for (std::size_t j = 0; j < n_keys; ++j) {
      if (w[j] == 0.0) {
        dw[j] = 0;
        continue;
      }
      const double* vr = vals + j * stride + h * d;
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += go[c] * vr[c];
      dw[j] = s;
      wdot += w[j] * s;
      if (dv) {
        double* dvr = dv + j * stride + h * d;
        for (std::size_t c = 0; c < d; ++c) dvr[c] += w[j] * go[c];
      }
    }
    for (std::size_t j = 0; j < n_keys; ++j) {
      if (w[j] == 0.0) continue;
      const double ds = w[j] * (dw[j] - wdot) * scale;
      const double* kr = keys + j * stride + h * d;
      if (dq) {
        for (std::size_t c = 0; c < d; ++c) dq[h * d + c] += ds * kr[c];
      }
      if (dk) {
        double* dkr = dk + j * stride + h * d;
        for (std::size_t c = 0; c < d; ++c) dkr[c] += ds * q[h * d + c];
      }
    }
  }
}

}  // namespace

Tensor masked_mha(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                  const AttentionConfig& cfg) {
  cfg.validate();
  const bool batched = q.rank() == 3;
  if ((q.rank() != 2 && !batched) || k.rank() != q.rank() || v.shape() != k.shape()) {
    throw ShapeError("masked_mha: q/k/v must be [L,C] or [B,L,C] with matching k/v");
  }
  const std::size_t B = batched ? q.dim(0) : 1;
  const std::size_t Lq = q.dim(q.rank() - 2), Lk = k.dim(k.rank() - 2);
  const std::size_t C = cfg.model_dim;
  if (q.shape().back() != C || k.shape().back() != C || (batched && k.dim(0) != B)) {
    throw ShapeError("masked_mha: shapes inconsistent with model_dim " + std::to_string(C));
  }
  AttentionMask full;
  if (!mask.empty()) {
    if (mask.size() == Lq * Lk) {
      full.reserve(B * Lq * Lk);
      for (std::size_t b = 0; b < B; ++b) full.insert(full.end(), mask.begin(), mask.end());
    } else if (mask.size() == B * Lq * Lk) {
      full = mask;
    } else {
      throw ShapeError("masked_mha: mask size mismatch");
    }
  }
  std::vector<double> out(B * Lq * C), weights(B * Lq * cfg.heads * Lk);
  const kernels::DenseAttentionArgs<double> args{q.data(), k.data(), v.data(), full,
                                                 B,        Lq,       Lk,       C,
                                                 cfg.heads};
  if (parallel::serial_mode()) {
    kernels::serial::dense_attention<double>(args, out, weights);
  } else {
    kernels::omp::dense_attention<double>(args, out, weights);
  }
  const std::size_t heads = cfg.heads;
  return make_result(
      "masked_mha", q.shape(), std::move(out), {q, k, v},
      [B, Lq, Lk, C, heads, weights = std::move(weights)](Node& self) {
        const auto& qd = self.parents[0]->data;
        const auto& kd = self.parents[1]->data;
        const auto& vd = self.parents[2]->data;
        double* dq = self.parents[0]->requires_grad ? self.parents[0]->grad_buffer().data() : nullptr;
        double* dk = self.parents[1]->requires_grad ? self.parents[1]->grad_buffer().data() : nullptr;
        double* dv = self.parents[2]->requires_grad ? self.parents[2]->grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < Lq; ++i) {
            const std::size_t row = b * Lq + i;
            attend_row_backward(qd.data() + row * C, kd.data() + b * Lk * C, vd.data() + b * Lk * C,
                                C, Lk, C, heads, weights.data() + row * heads * Lk,
                                self.grad.data() + row * C, dq ? dq + row * C : nullptr,
                                dk ? dk + b * Lk * C : nullptr, dv ? dv + b * Lk * C : nullptr);
          }
      });
}

Tensor ragged_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const std::size_t> offsets, const AttentionConfig& cfg,
                        const RaggedOptions& options) {
  cfg.validate();
  const std::size_t C = cfg.model_dim;
  if (q.rank() != 2 || k.rank() != 2 || v.shape() != k.shape() || q.dim(1) != C || k.dim(1) != C) {
    throw ShapeError("ragged_attention: q [Lq,C], k/v [Nk,C] expected");
  }
  const std::size_t Lq = q.dim(0);
  if (offsets.size() != Lq + 1 || offsets.front() != 0 || offsets.back() > k.dim(0)) {
    throw ShapeError("ragged_attention: offsets inconsistent with query/key counts");
  }
  for (std::size_t i = 0; i < Lq; ++i) {
    if (offsets[i + 1] < offsets[i]) throw ShapeError("ragged_attention: offsets must be non-decreasing");
  }
  const std::size_t heads = cfg.heads;
  std::vector<double> out(Lq * C), weights(offsets.back() * heads);
  const kernels::RaggedAttentionArgs<double> args{q.data(), k.data(), v.data(), offsets, C, heads};
  if (options.route == RaggedRoute::Grouped && !parallel::serial_mode()) {
    auto stats = kernels::omp::grouped_ragged_attention<double>(args, options.bounds, out, weights);
    if (options.stats) *options.stats = stats;
  } else if (options.route == RaggedRoute::Grouped) {
    // Serial reference mode still enforces the interval contract.
    kernels::check_bounds(options.bounds);
    for (std::size_t i = 0; i < Lq; ++i) {
      const std::size_t n = offsets[i + 1] - offsets[i];
      if (n > 0) (void)kernels::interval_of(n, options.bounds);
    }
    kernels::serial::ragged_attention<double>(args, out, weights);
  } else {
    kernels::serial::ragged_attention<double>(args, out, weights);
  }
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  return make_result(
      "ragged_attention", {Lq, C}, std::move(out), {q, k, v},
      [C, heads, offs = std::move(offs), weights = std::move(weights)](Node& self) {
        const auto& qd = self.parents[0]->data;
        const auto& kd = self.parents[1]->data;
        const auto& vd = self.parents[2]->data;
        double* dq = self.parents[0]->requires_grad ? self.parents[0]->grad_buffer().data() : nullptr;
        double* dk = self.parents[1]->requires_grad ? self.parents[1]->grad_buffer().data() : nullptr;
        double* dv = self.parents[2]->requires_grad ? self.parents[2]->grad_buffer().data() : nullptr;
        for (std::size_t i = 0; i + 1 < offs.size(); ++i) {
          const std::size_t o = offs[i], n = offs[i + 1] - o;
          if (n == 0) continue;
          attend_row_backward(qd.data() + i * C, kd.data() + o * C, vd.data() + o * C, C, n, C, heads,
                              weights.data() + o * heads, self.grad.data() + i * C,
                              dq ? dq + i * C : nullptr, dk ? dk + o * C : nullptr,
                              dv ? dv + o * C : nullptr);
        }
      });
}

Tensor deformable_attention(const std::vector<Tensor>& levels, std::span<const DeformRef> refs,
                            const Tensor& offsets, const Tensor& logits, std::size_t heads,
                            std::size_t points) {
  if (levels.empty() || heads == 0 || points == 0) throw ShapeError("deformable_attention: empty config");
  const std::size_t L = levels.size();
  const std::size_t C = levels[0].shape().back();
  if (C % heads != 0) throw ShapeError("deformable_attention: channels not divisible by heads");
  for (const auto& lv : levels) {
    if (lv.rank() != 4 || lv.dim(3) != C || lv.dim(0) != levels[0].dim(0)) {
      throw ShapeError("deformable_attention: levels must be [B,H,W,C] with shared B and C");
    }
  }
  const std::size_t Lq = refs.size();
  const std::size_t S = L * points;  // samples per head
  if (offsets.shape() != Shape{Lq, heads * S * 2} || logits.shape() != Shape{Lq, heads * S}) {
    throw ShapeError("deformable_attention: offsets/logits shape mismatch");
  }
  for (const auto& r : refs) {
    if (r.map >= levels[0].dim(0)) throw ShapeError("deformable_attention: map index out of range");
  }
  const std::size_t d = C / heads;
  std::vector<double> out(Lq * C, 0.0), attn(Lq * heads * S);
  std::vector<double> sample(C);
  for (std::size_t i = 0; i < Lq; ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double* lg = logits.data().data() + (i * heads + h) * S;
      auto a = softmax(std::span<const double>(lg, S));
      std::copy(a.begin(), a.end(), attn.begin() + static_cast<std::ptrdiff_t>((i * heads + h) * S));
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t H = levels[l].dim(1), W = levels[l].dim(2);
        for (std::size_t m = 0; m < points; ++m) {
          const std::size_t s = l * points + m;
          const double* off = offsets.data().data() + ((i * heads + h) * S + s) * 2;
          const kernels::SamplePoint p{refs[i].map, refs[i].row * static_cast<double>(H) - 0.5 + off[0],
                                       refs[i].col * static_cast<double>(W) - 0.5 + off[1]};
          kernels::bilinear_row<double>(levels[l].data(), H, W, C, p, sample.data());
          for (std::size_t c = 0; c < d; ++c) out[i * C + h * d + c] += a[s] * sample[h * d + c];
        }
      }
    }
  }
  std::vector<Tensor> parents(levels.begin(), levels.end());
  parents.push_back(offsets);
  parents.push_back(logits);
  std::vector<DeformRef> rs(refs.begin(), refs.end());
  return make_result(
      "deformable_attention", {Lq, C}, std::move(out), std::move(parents),
      [L, C, heads, points, S, d, rs = std::move(rs), attn = std::move(attn)](Node& self) {
        const std::size_t Lq = rs.size();
        auto& off_node = *self.parents[L];
        auto& logit_node = *self.parents[L + 1];
        double* g_off = off_node.requires_grad ? off_node.grad_buffer().data() : nullptr;
        double* g_logit = logit_node.requires_grad ? logit_node.grad_buffer().data() : nullptr;
        std::vector<double> da(S);
        for (std::size_t i = 0; i < Lq; ++i) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* go = self.grad.data() + i * C + h * d;
            const double* a = attn.data() + (i * heads + h) * S;
            for (std::size_t l = 0; l < L; ++l) {
              auto& lv = *self.parents[l];
              const std::size_t H = lv.shape[1], W = lv.shape[2];
              const double* base = lv.data.data() + rs[i].map * H * W * C;
              double* gbase = lv.requires_grad ? lv.grad_buffer().data() + rs[i].map * H * W * C : nullptr;
              for (std::size_t m = 0; m < points; ++m) {
                const std::size_t s = l * points + m;
                const double* off = off_node.data.data() + ((i * heads + h) * S + s) * 2;
                const double u = rs[i].row * static_cast<double>(H) - 0.5 + off[0];
                const double v = rs[i].col * static_cast<double>(W) - 0.5 + off[1];
                const auto t = kernels::bilinear_tap(u, v, H, W);
                da[s] = 0;
                if (!t.valid) continue;
                const double* v00 = base + (t.r0 * W + t.c0) * C + h * d;
                const double* v01 = base + (t.r0 * W + t.c1) * C + h * d;
                const double* v10 = base + (t.r1 * W + t.c0) * C + h * d;
                const double* v11 = base + (t.r1 * W + t.c1) * C + h * d;
                double du = 0, dvv = 0;
                for (std::size_t c = 0; c < d; ++c) {
                  const double val = t.w00() * v00[c] + t.w01() * v01[c] + t.w10() * v10[c] + t.w11() * v11[c];
                  da[s] += go[c] * val;
                  du += go[c] * ((1 - t.fc) * (v10[c] - v00[c]) + t.fc * (v11[c] - v01[c]));
                  dvv += go[c] * ((1 - t.fr) * (v01[c] - v00[c]) + t.fr * (v11[c] - v10[c]));
                }
                if (g_off) {
                  double* gof = g_off + ((i * heads + h) * S + s) * 2;
                  gof[0] += a[s] * du;
                  gof[1] += a[s] * dvv;
                }
                if (gbase) {
                  const std::pair<std::size_t, double> taps[4] = {
                      {t.r0 * W + t.c0, t.w00()}, {t.r0 * W + t.c1, t.w01()},
                      {t.r1 * W + t.c0, t.w10()}, {t.r1 * W + t.c1, t.w11()}};
                  for (const auto& [cell, w] : taps) {
                    if (w == 0.0) continue;
                    double* gc = gbase + cell * C + h * d;
                    for (std::size_t c = 0; c < d; ++c) gc[c] += a[s] * w * go[c];
                  }
                }
              }
            }
            if (g_logit) {
              double adot = 0;
              for (std::size_t s = 0; s < S; ++s) adot += a[s] * da[s];
              for (std::size_t s = 0; s < S; ++s) g_logit[(i * heads + h) * S + s] += a[s] * (da[s] - adot);
            }
          }
        }
      });
}

}  // namespace dipp
