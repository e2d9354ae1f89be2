#pragma once

// Set-prediction decoder: heatmap-seeded object queries refined layer by
// layer against RoI features of one modality at a time.
//
// Box vectors have 10 entries: center column and row in continuous BEV cell
// coordinates, z in meters, log(w), log(l), log(h), sin(yaw), cos(yaw), vx, vy.

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dipp/geometry.hpp"
#include "dipp/nn.hpp"
#include "dipp/scenesim.hpp"
#include "dipp/tensor.hpp"

namespace dipp::decoder {

inline constexpr std::size_t kBoxDim = 10;
using BoxVector = std::array<double, kBoxDim>;

BoxVector encode_box(const scenesim::Box3D& box, const geometry::BevGrid& grid);
scenesim::Box3D decode_box(std::span<const double> v, const geometry::BevGrid& grid, std::size_t class_id = 0);

enum class Modality { Image, Bev };
std::string to_string(Modality m);
// Layer l (1-indexed) reads the image when l is odd and the BEV otherwise.
Modality modality_of_layer(std::size_t l);

struct DecoderConfig {
  std::size_t num_layers = 5;
  std::size_t queries_train = 200;
  std::size_t queries_infer = 300;
  std::size_t roi_size = 7;
  double bev_enlarge = 2.0;
  std::size_t num_classes = 3;
  std::size_t channels = 32;
  std::size_t heads = 4;
  bool self_attention = true;     // query self-attention ahead of each interaction
  bool zero_init_outputs = true;  // residual projections and box heads start at zero
  double heatmap_prior = -2.19;   // bias of the heatmap and class logits, sigmoid ~ 0.1
  bool score_with_heatmap = false;  // multiply by the query's heatmap peak score

  void validate() const;
};

// Peak of the class heatmap; flat index = cls * H * W + cell.
struct Peak {
  std::size_t cls = 0;
  std::size_t cell = 0;
  double score = 0;
};

// scores are class-major [K, H*W]. Non-maxima of the 3x3 neighborhood (same
// class) count as zero; the N best of the joint class x cell space are
// returned by descending score, ties going to the smaller flat index.
std::vector<Peak> select_peaks(std::span<const double> scores, std::size_t K, std::size_t H, std::size_t W,
                               std::size_t N);

// Sinusoidal code of a BEV position: the first half of the channels encodes
// the row, the second half the column.
std::vector<double> position_code(double row, double col, std::size_t channels);

struct HeatmapHead {
  nn::Conv2d conv1, conv2;
  nn::Linear class_embed;  // one-hot class -> embedding offset

  static HeatmapHead create(nn::ParamStore& store, const std::string& name, const DecoderConfig& cfg, Rng& rng);
  // h_p [H, W, C] -> logits [H, W, K]
  Tensor operator()(const Tensor& h_p) const;
};

struct QuerySet {
  Tensor embedding;  // [N, C]
  Tensor boxes;      // [N, 10], constant
  std::vector<Peak> peaks;
  Tensor heatmap_logits;  // [H, W, K]
};

// Throws ArgumentError when N exceeds the cell count.
QuerySet init_queries(const Tensor& h_p, std::size_t N, const HeatmapHead& head, const DecoderConfig& cfg,
                      const geometry::BevGrid& grid);

// Continuous (row, col) corners of a sampling rectangle.
struct RoiRect {
  double r0 = 0, c0 = 0, r1 = 0, c1 = 0;
};

// Rectangle of the projected box on one feature-resolution camera; nullopt
// (invisible) when no corner has positive depth or the rectangle misses the
// feature map entirely.
std::optional<RoiRect> roi_image(const scenesim::Box3D& box, const geometry::CameraModel& feature_cam);
// Circumscribed rectangle of the enlarged footprint, clamped to the edge cells.
RoiRect roi_bev(const scenesim::Box3D& box, const geometry::BevGrid& grid, double enlarge = 2.0);

// S x S samples spanning the rectangle corners inclusively (S = 1 samples
// the center) of maps [B, H, W, C]. Returns [S*S, C] per RoI, stacked [n, S*S, C].
std::vector<kernels::SamplePoint> roi_points(std::size_t map, const RoiRect& rect, std::size_t S);
Tensor roi_align(const Tensor& maps, std::size_t map, const RoiRect& rect, std::size_t S);

struct DecoderLayer {
  // query self-attention
  nn::Linear sa_q, sa_k, sa_v, sa_out;
  nn::LayerNorm ln_sa;
  // dynamic interaction
  nn::Linear generator;  // C -> 2 * C * C/4
  nn::Linear reduce;     // S*S*C -> C
  nn::LayerNorm ln_mmpi;
  // heads
  nn::Linear cls_hidden, cls_out, reg_hidden, reg_out;
};

struct Decoder {
  DecoderConfig cfg;
  HeatmapHead heatmap;
  std::vector<DecoderLayer> layers;

  static Decoder create(nn::ParamStore& store, const std::string& name, const DecoderConfig& cfg, Rng& rng);
};

// Everything a layer reads besides the queries.
struct DecodeContext {
  const Tensor* h_p = nullptr;  // [H, W, C]
  const Tensor* h_c = nullptr;  // [cameras, Hc, Wc, C]
  geometry::BevGrid grid;
  std::vector<geometry::CameraModel> feature_cams;
};

struct LayerOutput {
  Modality modality = Modality::Image;
  Tensor embedding;  // [N, C]
  Tensor logits;     // [N, K]
  Tensor boxes;      // [N, 10]
  std::size_t visible = 0;  // queries whose RoI was found
};

// One predictive interaction layer; `boxes` are the previous predictions and
// are treated as constants.
LayerOutput mmpi_layer(const Tensor& embedding, const Tensor& boxes, Modality modality, const DecodeContext& ctx,
                       const DecoderLayer& layer, const DecoderConfig& cfg);

std::vector<LayerOutput> decode(const QuerySet& queries, const DecodeContext& ctx, const Decoder& dec);

struct Detection {
  scenesim::Box3D box;
  double score = 0;
};
// Final-layer predictions as boxes: class = argmax logit, score = its sigmoid
// (times the query's heatmap score when configured).
std::vector<Detection> detections(const LayerOutput& out, const QuerySet& queries, const DecoderConfig& cfg,
                                  const geometry::BevGrid& grid);

}  // namespace dipp::decoder
