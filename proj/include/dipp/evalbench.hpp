#pragma once

// Center-distance detection metric, grouped-attention benchmark and heatmap
// export.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dipp/decoder.hpp"
#include "dipp/scenesim.hpp"

namespace dipp::evalbench {

// Predictions and ground truth of one scene.
struct Frame {
  std::vector<decoder::Detection> preds;
  std::vector<scenesim::Box3D> gts;
};

inline constexpr std::array<double, 4> kThresholds{0.5, 1.0, 2.0, 4.0};

// AP of one class at one BEV center-distance threshold, accumulated over
// frames. Predictions are visited by descending score; each takes the nearest
// unmatched same-class ground truth of its frame within the threshold (ties
// to the lower gt index). The curve is integrated with the trapezoid rule
// over the points where a true positive lands, extended flat to recall 0.
double ap_center_distance(std::span<const Frame> frames, std::size_t class_id, double threshold);
double ap_center_distance(const std::vector<decoder::Detection>& preds, const std::vector<scenesim::Box3D>& gts,
                          double threshold, std::size_t class_id = 0);

// Mean AP over the four thresholds and over every class that has at least one
// prediction or ground truth; 0 when no class qualifies.
double map_lite(std::span<const Frame> frames, std::size_t num_classes);

struct BenchReport {
  std::size_t queries = 0;
  std::size_t padded_elements = 0;
  std::size_t naive_elements = 0;
  double ratio = 0;
  std::size_t peak_buffer_bytes = 0;
  std::size_t naive_buffer_bytes = 0;
  double grouped_ms = 0;    // mean wall time per trial
  double reference_ms = 0;
  double max_abs_diff = 0;  // grouped vs reference outputs

  // key=value lines
  std::string to_text() const;
};

// Runs random attention over queries with the given neighbor counts through
// the grouped and the reference routes.
BenchReport bench_grouped(std::span<const std::size_t> neighbor_counts, std::span<const std::size_t> bounds,
                          std::size_t trials, std::size_t channels = 32, std::size_t heads = 4,
                          std::uint64_t seed = 0);
// 900 pillars with 4 neighbors and 100 with 64.
std::vector<std::size_t> bimodal_fixture();

// Min-max normalized 8-bit image; a constant map gives zeros.
std::vector<std::uint8_t> normalize_heatmap(std::span<const double> map);
// Binary PGM (P5, maxval 255).
void dump_heatmap(std::span<const double> map, std::size_t H, std::size_t W, const std::string& path);

struct Pgm {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};
Pgm read_pgm(const std::string& path);

}  // namespace dipp::evalbench
