#pragma once

// Dual-stream interaction encoder. The LiDAR stream h_p is a BEV map
// [H, W, C]; the image stream h_c stacks the per-camera feature maps
// [cameras, Hc, Wc, C]. Each layer refines both and keeps their shapes.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dipp/attention.hpp"
#include "dipp/geometry.hpp"
#include "dipp/kernels.hpp"
#include "dipp/nn.hpp"
#include "dipp/scenesim.hpp"
#include "dipp/tensor.hpp"

namespace dipp::encoder {

// Interval edges for the grouped image-to-LiDAR attention; a pillar with n
// valid neighbors belongs to the interval (N_i, N_{i+1}] holding n.
struct GroupedIntervals {
  std::vector<std::size_t> bounds{0, 4, 16, 64};

  void validate() const;
  std::size_t max_neighbors() const { return bounds.back(); }
};

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t heads = 4;
  std::size_t channels = 32;
  std::size_t k = 1;              // half-width of the image-to-BEV neighbor grid
  std::size_t points = 4;         // deformable samples per head and scale
  std::size_t image_scales = 2;
  std::size_t bev_scales = 1;
  std::size_t polar_bins = 128;
  std::size_t ffn_hidden = 64;
  GroupedIntervals intervals;
  bool iml = true;
  bool mmri = true;
  bool polar = true;       // polar ray attention inside the LiDAR stream (needs mmri)
  bool grouped = true;     // route image-to-LiDAR attention through the grouped kernel
  bool zero_init_outputs = true;

  void validate() const;
  AttentionConfig attention() const { return {heads, channels}; }
};

enum class Variant { None, Iml, Mmri, Both };
Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
// None disables the encoder entirely (identity); the other variants keep
// num_layers and switch the two interaction families.
EncoderConfig with_variant(EncoderConfig cfg, Variant v);

// Parameter-free correspondences for one scene, built once and reused by
// every layer and training step.
struct SceneGeometry {
  geometry::BevGrid grid;
  std::vector<geometry::CameraModel> feature_cams;
  std::size_t image_h = 0, image_w = 0;

  // Image -> BEV: per BEV cell, key locations on the image feature maps
  // (map = camera, u = row, v = column), deduplicated per feature pixel and
  // capped at the last interval bound.
  std::vector<std::size_t> i2l_offsets;
  std::vector<kernels::SamplePoint> i2l_samples;

  // BEV -> image: the (2k+1)^2 targets of every feature pixel
  // (camera-major, then row-major) and the CSR view of the valid ones.
  std::size_t l2i_grid = 1;
  std::vector<geometry::BevTarget> l2i_targets;
  std::vector<std::size_t> l2i_offsets;
  std::vector<std::size_t> l2i_cells;

  std::vector<geometry::PolarGrid> polar;
  std::vector<std::vector<kernels::SamplePoint>> polar_samples;
  std::vector<geometry::PolarInverse> polar_inverse;

  std::size_t cameras() const { return feature_cams.size(); }
  std::size_t pixels() const { return cameras() * image_h * image_w; }
  std::size_t i2l_count(std::size_t cell) const { return i2l_offsets[cell + 1] - i2l_offsets[cell]; }
};

SceneGeometry build_geometry(const scenesim::Scene& scene, const geometry::BevGrid& grid, std::size_t stride,
                             const EncoderConfig& cfg);

struct DeformableBlock {
  nn::Linear offsets, logits, value, out;
  std::size_t heads = 1, points = 1, levels = 1;

  static DeformableBlock create(nn::ParamStore& store, const std::string& name, std::size_t channels,
                                std::size_t heads, std::size_t points, std::size_t levels, Rng& rng,
                                bool zero_out);
};

struct CrossBlock {
  nn::Linear q, k, v, out;

  static CrossBlock create(nn::ParamStore& store, const std::string& name, std::size_t channels, Rng& rng,
                           bool zero_out);
};

// Deformable self-attention over maps [B, H, W, C]; the value map is pooled
// 2x per extra level. Returns the projected attention output, same shape.
Tensor iml_deformable(const Tensor& h, const DeformableBlock& block);

// Image-to-LiDAR attention restricted to each pillar's image neighbors.
// Returns the projected attention output where a pillar has neighbors and
// the input row where it has none. [H, W, C]
Tensor mmri_i2l(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const CrossBlock& block,
                const EncoderConfig& cfg);
// The same computation routed through interval-bucketed padded batches.
Tensor grouped_i2l(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const GroupedIntervals& intervals,
                   const CrossBlock& block, const EncoderConfig& cfg, kernels::GroupedStats* stats = nullptr);

// LiDAR-to-image attention over each pixel's (2k+1)^2 BEV neighbors; pixels
// without a valid neighbor keep their input row. [cameras, Hc, Wc, C]
Tensor mmri_l2i(const Tensor& h_c, const Tensor& h_p, const SceneGeometry& geom, const CrossBlock& block,
                const EncoderConfig& cfg);

// Column-wise attention of one camera: polar ray i (R tokens, radial
// encoding) attends image column i (Hc tokens, row encoding). Inputs
// h_polar [R, Wc, C], image [Hc, Wc, C]; output [R, Wc, C].
Tensor polar_columns(const Tensor& h_polar, const Tensor& image, const CrossBlock& block, const EncoderConfig& cfg);
// Sum over cameras of the column attention resampled back to BEV; cells no
// camera covers get zero. [H, W, C]
Tensor polar_ray_attention(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const CrossBlock& block,
                           const EncoderConfig& cfg);

struct LayerParams {
  // LiDAR stream
  DeformableBlock iml_p;
  nn::LayerNorm ln_p_iml;
  CrossBlock polar;
  nn::LayerNorm ln_p_polar;
  CrossBlock i2l;
  nn::LayerNorm ln_p_cross;
  nn::FeedForward ffn_p;
  nn::LayerNorm ln_p_ffn;
  // image stream
  DeformableBlock iml_c;
  nn::LayerNorm ln_c_iml;
  CrossBlock l2i;
  nn::LayerNorm ln_c_cross;
  nn::FeedForward ffn_c;
  nn::LayerNorm ln_c_ffn;
};

struct Encoder {
  EncoderConfig cfg;
  std::vector<LayerParams> layers;

  // Registers only the blocks the configuration enables.
  static Encoder create(nn::ParamStore& store, const std::string& name, const EncoderConfig& cfg, Rng& rng);
};

using StreamPair = std::pair<Tensor, Tensor>;  // (h_p, h_c)

StreamPair encoder_layer(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const LayerParams& layer,
                         const EncoderConfig& cfg, kernels::GroupedStats* stats = nullptr);
StreamPair encode(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const Encoder& enc,
                  kernels::GroupedStats* stats = nullptr);

}  // namespace dipp::encoder
