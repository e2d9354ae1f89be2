#include "dipp/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dipp/attention.hpp"
#include "dipp/error.hpp"
#include "dipp/rng.hpp"

namespace dipp::evalbench {

using scenesim::Box3D;

double ap_center_distance(std::span<const Frame> frames, std::size_t class_id, double threshold) {
  struct Ranked {
    double score;
    std::size_t frame, index;
  };
  std::vector<Ranked> ranked;
  std::size_t total_gts = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (std::size_t i = 0; i < frames[f].preds.size(); ++i) {
      if (frames[f].preds[i].box.class_id == class_id) ranked.push_back({frames[f].preds[i].score, f, i});
    }
    for (const auto& g : frames[f].gts) total_gts += g.class_id == class_id;
  }
  if (total_gts == 0 || ranked.empty()) return 0.0;
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> taken(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) taken[f].assign(frames[f].gts.size(), false);

  double ap = 0, prev_recall = 0, prev_precision = -1;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const auto& r = ranked[k];
    const auto& pred = frames[r.frame].preds[r.index].box;
    const auto& gts = frames[r.frame].gts;
    std::size_t best = gts.size();
    double best_d = threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[r.frame][g] || gts[g].class_id != class_id) continue;
      const double d = (pred.center.head<2>() - gts[g].center.head<2>()).norm();
      if (d <= best_d && (best == gts.size() || d < best_d)) {
        best = g;
        best_d = d;
      }
    }
    if (best == gts.size()) continue;
    taken[r.frame][best] = true;
    ++tp;
    const double recall = static_cast<double>(tp) / static_cast<double>(total_gts);
    const double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
    if (prev_precision < 0) prev_precision = precision;
    ap += (recall - prev_recall) * 0.5 * (precision + prev_precision);
    prev_recall = recall;
    prev_precision = precision;
  }
  return ap;
}

double ap_center_distance(const std::vector<decoder::Detection>& preds, const std::vector<Box3D>& gts,
                          double threshold, std::size_t class_id) {
  const Frame f{preds, gts};
  return ap_center_distance(std::span<const Frame>(&f, 1), class_id, threshold);
}

double map_lite(std::span<const Frame> frames, std::size_t num_classes) {
  double total = 0;
  std::size_t classes = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    bool present = false;
    for (const auto& f : frames) {
      for (const auto& p : f.preds) present |= p.box.class_id == c;
      for (const auto& g : f.gts) present |= g.class_id == c;
    }
    if (!present) continue;
    ++classes;
    double sum = 0;
    for (double t : kThresholds) sum += ap_center_distance(frames, c, t);
    total += sum / static_cast<double>(kThresholds.size());
  }
  return classes == 0 ? 0.0 : total / static_cast<double>(classes);
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "queries=" << queries << "\n"
     << "padded_elements=" << padded_elements << "\n"
     << "naive_elements=" << naive_elements << "\n"
     << "ratio=" << ratio << "\n"
     << "peak_buffer_bytes=" << peak_buffer_bytes << "\n"
     << "naive_buffer_bytes=" << naive_buffer_bytes << "\n"
     << "max_abs_diff=" << max_abs_diff << "\n"
     << "grouped_ms=" << grouped_ms << "\n"
     << "reference_ms=" << reference_ms << "\n";
  return os.str();
}

BenchReport bench_grouped(std::span<const std::size_t> neighbor_counts, std::span<const std::size_t> bounds,
                          std::size_t trials, std::size_t channels, std::size_t heads, std::uint64_t seed) {
  kernels::check_bounds(bounds);
  if (trials == 0) throw ArgumentError("bench_grouped needs at least one trial");
  const AttentionConfig cfg{heads, channels};
  cfg.validate();
  std::vector<std::size_t> offsets{0};
  for (auto n : neighbor_counts) {
    if (n > bounds.back()) throw ArgumentError("neighbor count exceeds the largest interval bound");
    offsets.push_back(offsets.back() + n);
  }
  const std::size_t lq = neighbor_counts.size(), keys = offsets.back();

  Rng rng(seed);
  auto random = [&](std::size_t rows) {
    std::vector<double> v(rows * channels);
    for (auto& x : v) x = rng.uniform(-1, 1);
    return Tensor::from({rows, channels}, std::move(v));
  };
  NoGradGuard ng;
  const auto q = random(lq), k = random(keys), v = random(keys);

  BenchReport rep;
  rep.queries = lq;
  kernels::GroupedStats stats;
  const RaggedOptions grouped{RaggedRoute::Grouped, {bounds.begin(), bounds.end()}, &stats};
  Tensor a, b;
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  for (std::size_t t = 0; t < trials; ++t) {
    stats = {};
    a = ragged_attention(q, k, v, offsets, cfg, grouped);
  }
  auto t1 = clock::now();
  for (std::size_t t = 0; t < trials; ++t) b = ragged_attention(q, k, v, offsets, cfg);
  auto t2 = clock::now();

  rep.padded_elements = stats.padded_elements;
  rep.naive_elements = stats.naive_elements;
  rep.ratio = stats.naive_elements == 0 ? 1.0
                                        : static_cast<double>(stats.padded_elements) /
                                              static_cast<double>(stats.naive_elements);
  rep.peak_buffer_bytes = stats.peak_buffer_bytes;
  rep.naive_buffer_bytes = stats.naive_buffer_bytes;
  for (std::size_t i = 0; i < a.numel(); ++i) rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(a.at(i) - b.at(i)));
  const double n = static_cast<double>(trials);
  rep.grouped_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / n;
  rep.reference_ms = std::chrono::duration<double, std::milli>(t2 - t1).count() / n;
  return rep;
}

std::vector<std::size_t> bimodal_fixture() {
  std::vector<std::size_t> counts(900, 4);
  counts.insert(counts.end(), 100, 64);
  return counts;
}

std::vector<std::uint8_t> normalize_heatmap(std::span<const double> map) {
  std::vector<std::uint8_t> px(map.size(), 0);
  if (map.empty()) return px;
  check_finite(map, "dump_heatmap");
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double range = *hi - *lo;
  if (!(range > 0)) return px;
  for (std::size_t i = 0; i < map.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(255.0 * (map[i] - *lo) / range));
  }
  return px;
}

void dump_heatmap(std::span<const double> map, std::size_t H, std::size_t W, const std::string& path) {
  if (map.size() != H * W) throw ShapeError("dump_heatmap: map size does not match H x W");
  const auto px = normalize_heatmap(map);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "P5\n" << W << " " << H << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

Pgm read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P5") throw IoError("'" + path + "' is not a binary PGM");
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    if (!in || v < 0) throw IoError("malformed PGM header in '" + path + "'");
    return static_cast<std::size_t>(v);
  };
  Pgm p;
  p.width = next_int();
  p.height = next_int();
  if (next_int() != 255) throw IoError("only 8-bit PGM is supported");
  in.get();
  p.pixels.resize(p.width * p.height);
  in.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size()));
  if (!in) throw IoError("truncated PGM '" + path + "'");
  return p;
}

}  // namespace dipp::evalbench
