#include "dipp/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dipp/attention.hpp"
#include "dipp/error.hpp"
#include "dipp/ops.hpp"

namespace dipp::decoder {

using geometry::BevGrid;
using geometry::CameraModel;
using scenesim::Box3D;

namespace {

constexpr double kMaxLogSize = 6.0;

double wrap_angle(double a) {
  a = std::remainder(a, 2 * std::numbers::pi);
  return a >= std::numbers::pi ? a - 2 * std::numbers::pi : a;
}

}  // namespace

BoxVector encode_box(const Box3D& box, const BevGrid& grid) {
  return {grid.col_coord(box.center.x()),
          grid.row_coord(box.center.y()),
          box.center.z(),
          std::log(box.w),
          std::log(box.l),
          std::log(box.h),
          std::sin(box.yaw),
          std::cos(box.yaw),
          box.vx,
          box.vy};
}

Box3D decode_box(std::span<const double> v, const BevGrid& grid, std::size_t class_id) {
  if (v.size() != kBoxDim) throw ShapeError("decode_box expects a 10-entry box vector");
  Box3D b;
  b.center = {grid.x_min + (v[0] + 0.5) * grid.cell_x(), grid.y_min + (v[1] + 0.5) * grid.cell_y(), v[2]};
  b.w = std::exp(std::clamp(v[3], -kMaxLogSize, kMaxLogSize));
  b.l = std::exp(std::clamp(v[4], -kMaxLogSize, kMaxLogSize));
  b.h = std::exp(std::clamp(v[5], -kMaxLogSize, kMaxLogSize));
  b.yaw = (v[6] == 0 && v[7] == 0) ? 0.0 : wrap_angle(std::atan2(v[6], v[7]));
  b.vx = v[8];
  b.vy = v[9];
  b.class_id = class_id;
  return b;
}

std::string to_string(Modality m) { return m == Modality::Image ? "image" : "bev"; }

Modality modality_of_layer(std::size_t l) {
  if (l == 0) throw ArgumentError("decoder layers are numbered from 1");
  return l % 2 == 1 ? Modality::Image : Modality::Bev;
}

void DecoderConfig::validate() const {
  if (num_layers == 0) throw ConfigError("decoder needs at least one layer");
  if (roi_size == 0) throw ConfigError("RoI size must be at least 1");
  if (queries_train == 0 || queries_infer == 0) throw ConfigError("query counts must be positive");
  if (num_classes == 0) throw ConfigError("decoder needs at least one class");
  if (channels < 4 || channels % 4 != 0) throw ConfigError("decoder channels must be a positive multiple of 4");
  if (heads == 0 || channels % heads != 0) throw ConfigError("decoder heads must divide channels");
  if (!(bev_enlarge > 0) || !std::isfinite(bev_enlarge)) throw ConfigError("bev_enlarge must be positive");
}

std::vector<Peak> select_peaks(std::span<const double> scores, std::size_t K, std::size_t H, std::size_t W,
                               std::size_t N) {
  const std::size_t HW = H * W;
  if (scores.size() != K * HW) throw ShapeError("select_peaks: score array does not match K x H x W");
  if (N > HW) throw ArgumentError("query count " + std::to_string(N) + " exceeds the " + std::to_string(HW) + " BEV cells");
  std::vector<double> kept(scores.size(), 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double* s = scores.data() + k * HW;
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        const double x = s[i * W + j];
        bool is_max = true;
        for (std::size_t a = i == 0 ? 0 : i - 1; a <= std::min(i + 1, H - 1) && is_max; ++a) {
          for (std::size_t b = j == 0 ? 0 : j - 1; b <= std::min(j + 1, W - 1); ++b) {
            if (s[a * W + b] > x) {
              is_max = false;
              break;
            }
          }
        }
        if (is_max) kept[k * HW + i * W + j] = x;
      }
    }
  }
  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), 0);
  const auto n = std::min(N, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) { return kept[a] != kept[b] ? kept[a] > kept[b] : a < b; });
  std::vector<Peak> peaks(n);
  for (std::size_t q = 0; q < n; ++q) peaks[q] = {order[q] / HW, order[q] % HW, kept[order[q]]};
  return peaks;
}

std::vector<double> position_code(double row, double col, std::size_t channels) {
  const std::size_t half = channels / 2;
  auto code = sinusoidal_encoding(row, half);
  const auto c = sinusoidal_encoding(col, channels - half);
  code.insert(code.end(), c.begin(), c.end());
  return code;
}

HeatmapHead HeatmapHead::create(nn::ParamStore& store, const std::string& name, const DecoderConfig& cfg, Rng& rng) {
  HeatmapHead h;
  h.conv1 = nn::Conv2d::create(store, name + ".conv1", cfg.channels, cfg.channels, 3, rng);
  h.conv2 = nn::Conv2d::create(store, name + ".conv2", cfg.channels, cfg.num_classes, 3, rng);
  std::ranges::fill(h.conv2.b.data(), cfg.heatmap_prior);
  h.class_embed = nn::Linear::create(store, name + ".class_embed", cfg.num_classes, cfg.channels, rng,
                                     nn::Init::Xavier, false);
  return h;
}

Tensor HeatmapHead::operator()(const Tensor& h_p) const {
  if (h_p.rank() != 3) throw ShapeError("heatmap head expects a BEV map [H, W, C]");
  const auto H = h_p.dim(0), W = h_p.dim(1), C = h_p.dim(2);
  const auto x = ops::reshape(h_p, {1, H, W, C});
  const auto y = conv2(ops::relu(conv1(x)));
  return ops::reshape(y, {H, W, y.dim(3)});
}

QuerySet init_queries(const Tensor& h_p, std::size_t N, const HeatmapHead& head, const DecoderConfig& cfg,
                      const BevGrid& grid) {
  if (h_p.rank() != 3 || h_p.dim(0) != grid.H || h_p.dim(1) != grid.W || h_p.dim(2) != cfg.channels) {
    throw ShapeError("init_queries: BEV map does not match the grid and channel count");
  }
  const auto H = grid.H, W = grid.W, C = cfg.channels, K = cfg.num_classes;
  if (N > H * W) throw ArgumentError("query count " + std::to_string(N) + " exceeds the " + std::to_string(H * W) + " BEV cells");

  QuerySet qs;
  qs.heatmap_logits = head(h_p);
  std::vector<double> scores(K * H * W);
  const auto logits = qs.heatmap_logits.data();
  for (std::size_t cell = 0; cell < H * W; ++cell) {
    for (std::size_t k = 0; k < K; ++k) scores[k * H * W + cell] = 1.0 / (1.0 + std::exp(-logits[cell * K + k]));
  }
  qs.peaks = select_peaks(scores, K, H, W, N);

  std::vector<std::size_t> cells(N);
  std::vector<double> pe(N * C), onehot(N * K, 0.0), boxes(N * kBoxDim, 0.0);
  for (std::size_t q = 0; q < N; ++q) {
    const auto& p = qs.peaks[q];
    cells[q] = p.cell;
    const double row = static_cast<double>(p.cell / W), col = static_cast<double>(p.cell % W);
    const auto code = position_code(row, col, C);
    std::copy(code.begin(), code.end(), pe.begin() + static_cast<std::ptrdiff_t>(q * C));
    onehot[q * K + p.cls] = 1.0;
    double* b = boxes.data() + q * kBoxDim;
    b[0] = col;
    b[1] = row;
    b[7] = 1.0;  // yaw 0
  }
  const auto base = ops::gather_rows(ops::reshape(h_p, {H * W, C}), cells);
  qs.embedding = ops::add(ops::add_const(base, pe), head.class_embed(Tensor::from({N, K}, std::move(onehot))));
  qs.boxes = Tensor::from({N, kBoxDim}, std::move(boxes));
  return qs;
}

std::optional<RoiRect> roi_image(const Box3D& box, const CameraModel& feature_cam) {
  double u0 = 1e300, u1 = -1e300, v0 = 1e300, v1 = -1e300;
  bool any = false;
  for (const auto& c : box.corners()) {
    const auto px = geometry::try_project(c, feature_cam);
    if (!px) continue;
    any = true;
    u0 = std::min(u0, px->u);
    u1 = std::max(u1, px->u);
    v0 = std::min(v0, px->v);
    v1 = std::max(v1, px->v);
  }
  if (!any) return std::nullopt;
  const double W = static_cast<double>(feature_cam.width), H = static_cast<double>(feature_cam.height);
  if (u1 < -0.5 || u0 >= W - 0.5 || v1 < -0.5 || v0 >= H - 0.5) return std::nullopt;
  return RoiRect{std::clamp(v0, 0.0, H - 1), std::clamp(u0, 0.0, W - 1), std::clamp(v1, 0.0, H - 1),
                 std::clamp(u1, 0.0, W - 1)};
}

RoiRect roi_bev(const Box3D& box, const BevGrid& grid, double enlarge) {
  if (!(enlarge > 0)) throw ArgumentError("roi_bev: enlarge factor must be positive");
  Box3D big = box;
  big.w *= enlarge;
  big.l *= enlarge;
  double r0 = 1e300, r1 = -1e300, c0 = 1e300, c1 = -1e300;
  for (const auto& p : big.bev_corners()) {
    const double r = grid.row_coord(p.y()), c = grid.col_coord(p.x());
    r0 = std::min(r0, r);
    r1 = std::max(r1, r);
    c0 = std::min(c0, c);
    c1 = std::max(c1, c);
  }
  const double rmax = static_cast<double>(grid.H) - 1, cmax = static_cast<double>(grid.W) - 1;
  return {std::clamp(r0, 0.0, rmax), std::clamp(c0, 0.0, cmax), std::clamp(r1, 0.0, rmax), std::clamp(c1, 0.0, cmax)};
}

std::vector<kernels::SamplePoint> roi_points(std::size_t map, const RoiRect& rect, std::size_t S) {
  if (S == 0) throw ArgumentError("RoI size must be at least 1");
  std::vector<kernels::SamplePoint> pts;
  pts.reserve(S * S);
  auto at = [S](double a, double b, std::size_t k) {
    return S == 1 ? 0.5 * (a + b) : a + (b - a) * static_cast<double>(k) / static_cast<double>(S - 1);
  };
  for (std::size_t a = 0; a < S; ++a) {
    for (std::size_t b = 0; b < S; ++b) pts.push_back({map, at(rect.r0, rect.r1, a), at(rect.c0, rect.c1, b)});
  }
  return pts;
}

Tensor roi_align(const Tensor& maps, std::size_t map, const RoiRect& rect, std::size_t S) {
  if (maps.rank() != 4 || map >= maps.dim(0)) throw ShapeError("roi_align expects maps [B, H, W, C] and a valid map index");
  const auto pts = roi_points(map, rect, S);
  return ops::sample_points(maps, pts);
}

Decoder Decoder::create(nn::ParamStore& store, const std::string& name, const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  Decoder d;
  d.cfg = cfg;
  d.heatmap = HeatmapHead::create(store, name + ".heatmap", cfg, rng);
  const auto C = cfg.channels, C4 = cfg.channels / 4, S2 = cfg.roi_size * cfg.roi_size;
  const auto out_init = cfg.zero_init_outputs ? nn::Init::Zero : nn::Init::Xavier;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto p = name + ".layer" + std::to_string(l);
    DecoderLayer L;
    if (cfg.self_attention) {
      L.sa_q = nn::Linear::create(store, p + ".sa.q", C, C, rng);
      L.sa_k = nn::Linear::create(store, p + ".sa.k", C, C, rng);
      L.sa_v = nn::Linear::create(store, p + ".sa.v", C, C, rng);
      L.sa_out = nn::Linear::create(store, p + ".sa.out", C, C, rng, out_init, false);
      L.ln_sa = nn::LayerNorm::create(store, p + ".sa.ln", C);
    }
    L.generator = nn::Linear::create(store, p + ".mmpi.generator", C, 2 * C * C4, rng);
    L.reduce = nn::Linear::create(store, p + ".mmpi.reduce", S2 * C, C, rng, out_init);
    L.ln_mmpi = nn::LayerNorm::create(store, p + ".mmpi.ln", C);
    L.cls_hidden = nn::Linear::create(store, p + ".cls.hidden", C, C, rng);
    L.cls_out = nn::Linear::create(store, p + ".cls.out", C, cfg.num_classes, rng);
    std::ranges::fill(L.cls_out.b.data(), cfg.heatmap_prior);
    L.reg_hidden = nn::Linear::create(store, p + ".reg.hidden", C, C, rng);
    L.reg_out = nn::Linear::create(store, p + ".reg.out", C, kBoxDim, rng, out_init);
    d.layers.push_back(std::move(L));
  }
  return d;
}

namespace {

// Image RoI of one box: the first camera that sees the box center, else the
// first camera with any rectangle on its feature map.
std::optional<std::pair<std::size_t, RoiRect>> image_roi(const Box3D& box, const std::vector<CameraModel>& cams) {
  std::optional<std::pair<std::size_t, RoiRect>> fallback;
  for (std::size_t c = 0; c < cams.size(); ++c) {
    const auto rect = roi_image(box, cams[c]);
    if (!rect) continue;
    const auto px = geometry::try_project(box.center, cams[c]);
    if (px && geometry::in_image(px->u, px->v, cams[c])) return std::pair{c, *rect};
    if (!fallback) fallback = std::pair{c, *rect};
  }
  return fallback;
}

}  // namespace

LayerOutput mmpi_layer(const Tensor& embedding, const Tensor& boxes, Modality modality, const DecodeContext& ctx,
                       const DecoderLayer& layer, const DecoderConfig& cfg) {
  const auto C = cfg.channels, C4 = cfg.channels / 4, S = cfg.roi_size;
  if (embedding.rank() != 2 || embedding.dim(1) != C) throw ShapeError("mmpi_layer: embeddings must be [N, C]");
  const auto N = embedding.dim(0);
  if (boxes.rank() != 2 || boxes.dim(0) != N || boxes.dim(1) != kBoxDim) throw ShapeError("mmpi_layer: boxes must be [N, 10]");

  Tensor maps;
  if (modality == Modality::Image) {
    if (!ctx.h_c || ctx.h_c->rank() != 4 || ctx.h_c->dim(0) != ctx.feature_cams.size() || ctx.h_c->dim(3) != C) {
      throw ShapeError("mmpi_layer: image modality needs maps [cameras, Hc, Wc, C] matching the cameras");
    }
    maps = *ctx.h_c;
  } else {
    if (!ctx.h_p || ctx.h_p->rank() != 3 || ctx.h_p->dim(0) != ctx.grid.H || ctx.h_p->dim(1) != ctx.grid.W ||
        ctx.h_p->dim(2) != C) {
      throw ShapeError("mmpi_layer: BEV modality needs a map [H, W, C] matching the grid");
    }
    maps = ops::reshape(*ctx.h_p, {1, ctx.grid.H, ctx.grid.W, C});
  }

  const auto prev = boxes.detach();
  const auto bv = prev.data();
  Tensor emb = embedding;

  if (cfg.self_attention) {
    std::vector<double> pe(N * C);
    for (std::size_t q = 0; q < N; ++q) {
      const auto code = position_code(bv[q * kBoxDim + 1], bv[q * kBoxDim], C);
      std::copy(code.begin(), code.end(), pe.begin() + static_cast<std::ptrdiff_t>(q * C));
    }
    const auto x = ops::add_const(emb, pe);
    const auto a = masked_mha(layer.sa_q(x), layer.sa_k(x), layer.sa_v(emb), {}, {cfg.heads, C});
    emb = layer.ln_sa(ops::add(emb, layer.sa_out(a)));
  }

  std::vector<std::size_t> visible;
  std::vector<kernels::SamplePoint> pts;
  for (std::size_t q = 0; q < N; ++q) {
    const auto box = decode_box(bv.subspan(q * kBoxDim, kBoxDim), ctx.grid);
    std::optional<std::pair<std::size_t, RoiRect>> roi;
    if (modality == Modality::Image) {
      roi = image_roi(box, ctx.feature_cams);
    } else {
      roi = std::pair{std::size_t{0}, roi_bev(box, ctx.grid, cfg.bev_enlarge)};
    }
    if (!roi) continue;
    visible.push_back(q);
    const auto p = roi_points(roi->first, roi->second, S);
    pts.insert(pts.end(), p.begin(), p.end());
  }

  LayerOutput out;
  out.modality = modality;
  out.visible = visible.size();
  if (!visible.empty()) {
    const auto nv = visible.size();
    const auto feats = ops::reshape(ops::sample_points(maps, pts), {nv, S * S, C});
    const auto own = ops::gather_rows(emb, visible);
    const auto params = layer.generator(own);
    const auto w1 = ops::reshape(ops::slice_last(params, 0, C * C4), {nv, C, C4});
    const auto w2 = ops::reshape(ops::slice_last(params, C * C4, 2 * C * C4), {nv, C4, C});
    const auto y = ops::relu(ops::bmm(ops::relu(ops::bmm(feats, w1)), w2));
    const auto delta = layer.reduce(ops::reshape(y, {nv, S * S * C}));
    const auto updated = layer.ln_mmpi(ops::add(own, delta));
    std::vector<double> keep(N, 1.0);
    for (auto q : visible) keep[q] = 0.0;
    emb = ops::add(ops::scale_rows(emb, keep), ops::scatter_rows(updated, visible, N));
  }
  out.embedding = emb;
  out.logits = layer.cls_out(ops::relu(layer.cls_hidden(emb)));
  out.boxes = ops::add(prev, layer.reg_out(ops::relu(layer.reg_hidden(emb))));
  return out;
}

std::vector<LayerOutput> decode(const QuerySet& queries, const DecodeContext& ctx, const Decoder& dec) {
  std::vector<LayerOutput> outs;
  outs.reserve(dec.layers.size());
  Tensor emb = queries.embedding, boxes = queries.boxes;
  for (std::size_t l = 0; l < dec.layers.size(); ++l) {
    auto out = mmpi_layer(emb, boxes, modality_of_layer(l + 1), ctx, dec.layers[l], dec.cfg);
    emb = out.embedding;
    boxes = out.boxes;
    outs.push_back(std::move(out));
  }
  return outs;
}

std::vector<Detection> detections(const LayerOutput& out, const QuerySet& queries, const DecoderConfig& cfg,
                                  const BevGrid& grid) {
  const auto N = out.logits.dim(0), K = out.logits.dim(1);
  const auto logits = out.logits.data();
  const auto boxes = out.boxes.data();
  std::vector<Detection> dets(N);
  for (std::size_t q = 0; q < N; ++q) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits[q * K + k] > logits[q * K + best]) best = k;
    }
    double score = 1.0 / (1.0 + std::exp(-logits[q * K + best]));
    if (cfg.score_with_heatmap && q < queries.peaks.size()) score *= queries.peaks[q].score;
    dets[q] = {decode_box(boxes.subspan(q * kBoxDim, kBoxDim), grid, best), score};
  }
  return dets;
}

}  // namespace dipp::decoder
