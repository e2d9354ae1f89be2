#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dipp/kernels.hpp"
#include "dipp/tensor.hpp"

namespace dipp {

struct AttentionConfig {
  std::size_t heads = 1;
  std::size_t model_dim = 1;

  std::size_t head_dim() const { return model_dim / heads; }
  // Throws ConfigError unless heads divides model_dim.
  void validate() const;
};

// Numerically stable softmax of a plain vector.
std::vector<double> softmax(std::span<const double> logits);

// Interleaved sine/cosine encoding: pe[2i] = sin(pos / 10000^(2i/dim)),
// pe[2i+1] = cos(same).
std::vector<double> sinusoidal_encoding(double position, std::size_t dim);
// Encoding for `count` consecutive positions as a [count, dim] row-major block.
std::vector<double> sinusoidal_table(std::size_t count, std::size_t dim);

// Row-major [Lq, Lk] (or [B, Lq, Lk]) validity mask; empty means all valid.
using AttentionMask = std::vector<std::uint8_t>;

// Scaled dot-product multi-head attention over already-projected inputs.
// q [Lq,C] or [B,Lq,C]; k, v [Lk,C] or [B,Lk,C]. Masked keys get exactly zero
// weight; a query with every key masked outputs zeros.
Tensor masked_mha(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                  const AttentionConfig& cfg);

// Per-query variable key sets. `offsets` has Lq+1 entries; query i attends key
// rows [offsets[i], offsets[i+1]). Queries without keys output zeros.
enum class RaggedRoute {
  Reference,  // unbatched per-query loop
  Grouped,    // interval-bucketed padded batches
};

struct RaggedOptions {
  RaggedRoute route = RaggedRoute::Reference;
  std::vector<std::size_t> bounds;  // interval boundaries for the grouped route
  kernels::GroupedStats* stats = nullptr;
};

Tensor ragged_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const std::size_t> offsets, const AttentionConfig& cfg,
                        const RaggedOptions& options = {});

// Reference location of one deformable-attention query: map index plus the
// normalized (row, col) position in [0,1]; cell i of an n-cell axis sits at (i+0.5)/n.
struct DeformRef {
  std::size_t map = 0;
  double row = 0;
  double col = 0;
};

// Multi-scale deformable attention over value-projected levels [B,H_l,W_l,C].
// offsets [Lq, heads*L*M*2] in level pixels (row, col); logits [Lq, heads*L*M],
// softmax-normalized per head over all L*M samples. Output [Lq, C].
Tensor deformable_attention(const std::vector<Tensor>& levels, std::span<const DeformRef> refs,
                            const Tensor& offsets, const Tensor& logits, std::size_t heads,
                            std::size_t points);

}  // namespace dipp
