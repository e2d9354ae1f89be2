#include "dipp/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <tuple>

#include "dipp/error.hpp"
#include "dipp/ops.hpp"

namespace dipp::encoder {

using geometry::BevGrid;
using geometry::CameraModel;

void GroupedIntervals::validate() const {
  if (bounds.size() < 2 || bounds.front() != 0) throw ConfigError("interval bounds must start at 0 and hold one interval");
  for (std::size_t i = 1; i < bounds.size(); ++i) {
    if (bounds[i] <= bounds[i - 1]) throw ConfigError("interval bounds must be strictly increasing");
  }
}

void EncoderConfig::validate() const {
  if (channels == 0 || heads == 0 || channels % heads != 0) throw ConfigError("encoder heads must divide channels");
  if (points == 0) throw ConfigError("deformable attention needs at least one point");
  if (image_scales == 0 || bev_scales == 0) throw ConfigError("deformable attention needs at least one scale");
  if (polar_bins == 0) throw ConfigError("polar grid needs at least one radial bin");
  if (ffn_hidden == 0) throw ConfigError("feed-forward hidden size must be positive");
  intervals.validate();
}

Variant parse_variant(const std::string& name) {
  if (name == "none") return Variant::None;
  if (name == "iml") return Variant::Iml;
  if (name == "mmri") return Variant::Mmri;
  if (name == "both") return Variant::Both;
  throw ConfigError("unknown encoder variant '" + name + "' (none, iml, mmri, both)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::None: return "none";
    case Variant::Iml: return "iml";
    case Variant::Mmri: return "mmri";
    case Variant::Both: return "both";
  }
  return "both";
}

EncoderConfig with_variant(EncoderConfig cfg, Variant v) {
  switch (v) {
    case Variant::None:
      cfg.num_layers = 0;
      cfg.iml = cfg.mmri = cfg.polar = false;
      break;
    case Variant::Iml:
      cfg.iml = true;
      cfg.mmri = cfg.polar = false;
      break;
    case Variant::Mmri:
      cfg.iml = false;
      cfg.mmri = cfg.polar = true;
      break;
    case Variant::Both:
      cfg.iml = cfg.mmri = cfg.polar = true;
      break;
  }
  return cfg;
}

SceneGeometry build_geometry(const scenesim::Scene& scene, const BevGrid& grid, std::size_t stride,
                             const EncoderConfig& cfg) {
  cfg.validate();
  grid.validate();
  if (scene.rig.empty()) throw ConfigError("scene has no cameras");
  SceneGeometry g;
  g.grid = grid;
  for (const auto& cam : scene.rig) g.feature_cams.push_back(cam.scaled(stride));
  g.image_h = g.feature_cams[0].height;
  g.image_w = g.feature_cams[0].width;
  for (const auto& cam : g.feature_cams) {
    if (cam.height != g.image_h || cam.width != g.image_w) throw ShapeError("all cameras must share one image size");
  }

  // Image -> BEV neighbors.
  const auto& pts = scene.points;
  const auto pillars = geometry::build_pillars(pts, scenesim::kPointStride, grid);
  const std::size_t cap = cfg.intervals.max_neighbors();
  g.i2l_offsets.assign(1, 0);
  for (std::size_t cell = 0; cell < grid.cells(); ++cell) {
    std::set<std::tuple<std::size_t, long, long>> seen;
    std::size_t n = 0;
    for (const auto& t : geometry::map_p2c(cell, pillars, pts, scenesim::kPointStride, g.feature_cams)) {
      if (n == cap) break;
      if (!seen.emplace(t.camera, std::lround(t.v), std::lround(t.u)).second) continue;
      g.i2l_samples.push_back({t.camera, t.v, t.u});
      ++n;
    }
    g.i2l_offsets.push_back(g.i2l_samples.size());
  }

  // BEV -> image neighbors through completed feature-resolution depth.
  const double r_max = std::hypot(grid.x_max - grid.x_min, grid.y_max - grid.y_min);
  g.l2i_grid = (2 * cfg.k + 1) * (2 * cfg.k + 1);
  g.l2i_offsets.assign(1, 0);
  for (const auto& cam : g.feature_cams) {
    auto sparse = scenesim::render_sparse_depth(pts, cam);
    geometry::DepthMap dense;
    if (sparse.valid_count() == 0) {
      dense = geometry::DepthMap::empty(cam.width, cam.height);
      std::fill(dense.depth.begin(), dense.depth.end(), r_max);
      std::fill(dense.valid.begin(), dense.valid.end(), 1);
    } else {
      dense = geometry::complete_depth(sparse, {0, r_max});
    }
    for (std::size_t r = 0; r < cam.height; ++r) {
      for (std::size_t c = 0; c < cam.width; ++c) {
        for (const auto& t : geometry::map_c2p(r, c, cfg.k, dense, cam, grid)) {
          g.l2i_targets.push_back(t);
          if (t.valid) g.l2i_cells.push_back(t.flat(grid));
        }
        g.l2i_offsets.push_back(g.l2i_cells.size());
      }
    }
  }

  if (cfg.polar) {
    for (const auto& cam : g.feature_cams) {
      const auto pg = geometry::polar_grid_for(cam, grid, cfg.polar_bins);
      g.polar.push_back(pg);
      g.polar_samples.push_back(geometry::polar_sample_points(cam, pg, grid));
      g.polar_inverse.push_back(geometry::polar_inverse(cam, pg, grid));
    }
  }
  return g;
}

DeformableBlock DeformableBlock::create(nn::ParamStore& store, const std::string& name, std::size_t channels,
                                        std::size_t heads, std::size_t points, std::size_t levels, Rng& rng,
                                        bool zero_out) {
  DeformableBlock b;
  b.heads = heads;
  b.points = points;
  b.levels = levels;
  const std::size_t S = levels * points;
  b.offsets = nn::Linear::create(store, name + ".offsets", channels, heads * S * 2, rng, nn::Init::Zero);
  // Start each head looking in its own direction, farther for later points.
  auto bias = b.offsets.b.data();
  for (std::size_t h = 0; h < heads; ++h) {
    const double a = 2 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(heads);
    for (std::size_t s = 0; s < S; ++s) {
      const double r = static_cast<double>(s % points + 1);
      bias[(h * S + s) * 2] = r * std::sin(a);
      bias[(h * S + s) * 2 + 1] = r * std::cos(a);
    }
  }
  b.logits = nn::Linear::create(store, name + ".logits", channels, heads * S, rng, nn::Init::Zero);
  b.value = nn::Linear::create(store, name + ".value", channels, channels, rng);
  b.out = nn::Linear::create(store, name + ".out", channels, channels, rng,
                             zero_out ? nn::Init::Zero : nn::Init::Xavier, false);
  return b;
}

CrossBlock CrossBlock::create(nn::ParamStore& store, const std::string& name, std::size_t channels, Rng& rng,
                              bool zero_out) {
  CrossBlock b;
  b.q = nn::Linear::create(store, name + ".q", channels, channels, rng);
  b.k = nn::Linear::create(store, name + ".k", channels, channels, rng);
  b.v = nn::Linear::create(store, name + ".v", channels, channels, rng);
  b.out = nn::Linear::create(store, name + ".out", channels, channels, rng,
                             zero_out ? nn::Init::Zero : nn::Init::Xavier, false);
  return b;
}

Tensor iml_deformable(const Tensor& h, const DeformableBlock& block) {
  if (h.rank() != 4) throw ShapeError("deformable input must be [B, H, W, C]");
  const std::size_t B = h.dim(0), H = h.dim(1), W = h.dim(2), C = h.dim(3);
  if (block.value.w.dim(0) != C) throw ShapeError("deformable block channels do not match the input");
  std::vector<Tensor> levels{block.value(h)};
  for (std::size_t l = 1; l < block.levels; ++l) levels.push_back(ops::avg_pool2(levels.back()));
  std::vector<DeformRef> refs;
  refs.reserve(B * H * W);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        refs.push_back({b, (static_cast<double>(i) + 0.5) / static_cast<double>(H),
                        (static_cast<double>(j) + 0.5) / static_cast<double>(W)});
      }
    }
  }
  const Tensor q = ops::reshape(h, {B * H * W, C});
  const Tensor attn = deformable_attention(levels, refs, block.offsets(q), block.logits(q), block.heads, block.points);
  return ops::reshape(block.out(attn), {B, H, W, C});
}

namespace {

void check_streams(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom) {
  if (h_p.rank() != 3 || h_p.dim(0) != geom.grid.H || h_p.dim(1) != geom.grid.W) {
    throw ShapeError("LiDAR stream must be [H, W, C] on the geometry's grid");
  }
  if (h_c.rank() != 4 || h_c.dim(0) != geom.cameras() || h_c.dim(1) != geom.image_h || h_c.dim(2) != geom.image_w) {
    throw ShapeError("image stream must be [cameras, Hc, Wc, C] matching the geometry");
  }
  if (h_c.dim(3) != h_p.dim(2)) throw ShapeError("streams must share the channel count");
  if (geom.i2l_offsets.size() != geom.grid.cells() + 1 || geom.l2i_offsets.size() != geom.pixels() + 1) {
    throw ShapeError("correspondences were built for a different layout");
  }
}

// Projected attention output per pillar; rows without neighbors are zero
// because the output projection has no bias.
Tensor i2l_delta(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const CrossBlock& block,
                 const EncoderConfig& cfg, const RaggedOptions& options) {
  check_streams(h_p, h_c, geom);
  const std::size_t C = h_p.dim(2), cells = geom.grid.cells();
  const Tensor q = block.q(ops::reshape(h_p, {cells, C}));
  if (geom.i2l_samples.empty()) return Tensor::zeros({cells, C});
  const Tensor sampled = ops::sample_points(h_c, geom.i2l_samples);
  const Tensor attn = ragged_attention(q, block.k(sampled), block.v(sampled), geom.i2l_offsets, cfg.attention(), options);
  return block.out(attn);
}

Tensor keep_where_empty(const Tensor& h, const Tensor& delta, std::span<const std::size_t> offsets) {
  const std::size_t rows = offsets.size() - 1;
  std::vector<double> empty(rows);
  for (std::size_t r = 0; r < rows; ++r) empty[r] = offsets[r + 1] == offsets[r] ? 1.0 : 0.0;
  const Tensor flat = ops::reshape(h, {rows, h.numel() / rows});
  return ops::reshape(ops::add(ops::scale_rows(flat, empty), delta), h.shape());
}

Tensor l2i_delta(const Tensor& h_c, const Tensor& h_p, const SceneGeometry& geom, const CrossBlock& block,
                 const EncoderConfig& cfg) {
  check_streams(h_p, h_c, geom);
  const std::size_t C = h_c.dim(3), pixels = geom.pixels();
  const Tensor q = block.q(ops::reshape(h_c, {pixels, C}));
  if (geom.l2i_cells.empty()) return Tensor::zeros({pixels, C});
  const Tensor keys = ops::gather_rows(ops::reshape(h_p, {geom.grid.cells(), C}), geom.l2i_cells);
  const Tensor attn = ragged_attention(q, block.k(keys), block.v(keys), geom.l2i_offsets, cfg.attention());
  return block.out(attn);
}

Tensor polar_delta(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const CrossBlock& block,
                   const EncoderConfig& cfg) {
  check_streams(h_p, h_c, geom);
  if (geom.polar.size() != geom.cameras()) throw ConfigError("geometry was built without polar grids");
  const std::size_t C = h_p.dim(2);
  Tensor total;
  for (std::size_t cam = 0; cam < geom.cameras(); ++cam) {
    const Tensor polar = geometry::cart_to_polar(h_p, geom.polar_samples[cam], geom.polar[cam], geom.grid);
    const Tensor image = ops::reshape(ops::slice0(h_c, cam, cam + 1), {geom.image_h, geom.image_w, C});
    const Tensor cols = polar_columns(polar, image, block, cfg);
    const Tensor back =
        geometry::polar_to_cart(cols, Tensor::zeros({geom.grid.H, geom.grid.W, C}), geom.polar_inverse[cam], geom.grid);
    total = cam == 0 ? back : ops::add(total, back);
  }
  return total;
}

// Adds the same positional code to every column: pe is [rows, C], x is [rows, cols, C].
Tensor add_row_code(const Tensor& x, const std::vector<double>& pe) {
  const std::size_t rows = x.dim(0), cols = x.dim(1), C = x.dim(2);
  std::vector<double> full(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) std::copy_n(pe.begin() + r * C, C, full.begin() + (r * cols + c) * C);
  }
  return ops::add_const(x, full);
}

}  // namespace

Tensor mmri_i2l(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const CrossBlock& block,
                const EncoderConfig& cfg) {
  return keep_where_empty(h_p, i2l_delta(h_p, h_c, geom, block, cfg, {}), geom.i2l_offsets);
}

Tensor grouped_i2l(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const GroupedIntervals& intervals,
                   const CrossBlock& block, const EncoderConfig& cfg, kernels::GroupedStats* stats) {
  intervals.validate();
  RaggedOptions opt{RaggedRoute::Grouped, intervals.bounds, stats};
  return keep_where_empty(h_p, i2l_delta(h_p, h_c, geom, block, cfg, opt), geom.i2l_offsets);
}

Tensor mmri_l2i(const Tensor& h_c, const Tensor& h_p, const SceneGeometry& geom, const CrossBlock& block,
                const EncoderConfig& cfg) {
  return keep_where_empty(h_c, l2i_delta(h_c, h_p, geom, block, cfg), geom.l2i_offsets);
}

Tensor polar_columns(const Tensor& h_polar, const Tensor& image, const CrossBlock& block, const EncoderConfig& cfg) {
  if (h_polar.rank() != 3 || image.rank() != 3 || h_polar.dim(1) != image.dim(1) || h_polar.dim(2) != image.dim(2)) {
    throw ShapeError("polar map [R, W, C] and image [Hc, W, C] must share width and channels");
  }
  const std::size_t R = h_polar.dim(0), Hc = image.dim(0), C = image.dim(2);
  const Tensor q = ops::swap01(block.q(add_row_code(h_polar, sinusoidal_table(R, C))));  // [W, R, C]
  const Tensor kv_in = add_row_code(image, sinusoidal_table(Hc, C));
  const Tensor k = ops::swap01(block.k(kv_in));  // [W, Hc, C]
  const Tensor v = ops::swap01(block.v(kv_in));
  const Tensor attn = masked_mha(q, k, v, {}, cfg.attention());
  return block.out(ops::swap01(attn));
}

Tensor polar_ray_attention(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const CrossBlock& block,
                           const EncoderConfig& cfg) {
  return polar_delta(h_p, h_c, geom, block, cfg);
}

Encoder Encoder::create(nn::ParamStore& store, const std::string& name, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  Encoder e;
  e.cfg = cfg;
  const std::size_t C = cfg.channels;
  const bool z = cfg.zero_init_outputs;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = name + ".layer" + std::to_string(l);
    LayerParams L;
    if (cfg.iml) {
      L.iml_p = DeformableBlock::create(store, p + ".lidar.iml", C, cfg.heads, cfg.points, cfg.bev_scales, rng, z);
      L.ln_p_iml = nn::LayerNorm::create(store, p + ".lidar.ln_iml", C);
      L.iml_c = DeformableBlock::create(store, p + ".image.iml", C, cfg.heads, cfg.points, cfg.image_scales, rng, z);
      L.ln_c_iml = nn::LayerNorm::create(store, p + ".image.ln_iml", C);
    }
    if (cfg.mmri && cfg.polar) {
      L.polar = CrossBlock::create(store, p + ".lidar.polar", C, rng, z);
      L.ln_p_polar = nn::LayerNorm::create(store, p + ".lidar.ln_polar", C);
    }
    if (cfg.mmri) {
      L.i2l = CrossBlock::create(store, p + ".lidar.i2l", C, rng, z);
      L.ln_p_cross = nn::LayerNorm::create(store, p + ".lidar.ln_cross", C);
      L.l2i = CrossBlock::create(store, p + ".image.l2i", C, rng, z);
      L.ln_c_cross = nn::LayerNorm::create(store, p + ".image.ln_cross", C);
    }
    L.ffn_p = nn::FeedForward::create(store, p + ".lidar.ffn", C, cfg.ffn_hidden, rng, z);
    L.ln_p_ffn = nn::LayerNorm::create(store, p + ".lidar.ln_ffn", C);
    L.ffn_c = nn::FeedForward::create(store, p + ".image.ffn", C, cfg.ffn_hidden, rng, z);
    L.ln_c_ffn = nn::LayerNorm::create(store, p + ".image.ln_ffn", C);
    e.layers.push_back(std::move(L));
  }
  return e;
}

StreamPair encoder_layer(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const LayerParams& layer,
                         const EncoderConfig& cfg, kernels::GroupedStats* stats) {
  check_streams(h_p, h_c, geom);
  const std::size_t H = geom.grid.H, W = geom.grid.W, C = h_p.dim(2);

  // LiDAR stream.
  Tensor p = h_p;
  if (cfg.iml) {
    const Tensor sa = ops::reshape(iml_deformable(ops::reshape(p, {1, H, W, C}), layer.iml_p), {H, W, C});
    p = layer.ln_p_iml(ops::add(p, sa));
  }
  if (cfg.mmri && cfg.polar) p = layer.ln_p_polar(ops::add(p, polar_delta(p, h_c, geom, layer.polar, cfg)));
  if (cfg.mmri) {
    RaggedOptions opt;
    if (cfg.grouped) opt = {RaggedRoute::Grouped, cfg.intervals.bounds, stats};
    const Tensor ca = ops::reshape(i2l_delta(p, h_c, geom, layer.i2l, cfg, opt), {H, W, C});
    p = layer.ln_p_cross(ops::add(p, ca));
  }
  p = layer.ln_p_ffn(ops::add(p, layer.ffn_p(p)));

  // Image stream.
  Tensor c = h_c;
  if (cfg.iml) c = layer.ln_c_iml(ops::add(c, iml_deformable(c, layer.iml_c)));
  if (cfg.mmri) c = layer.ln_c_cross(ops::add(c, ops::reshape(l2i_delta(c, h_p, geom, layer.l2i, cfg), c.shape())));
  c = layer.ln_c_ffn(ops::add(c, layer.ffn_c(c)));
  return {p, c};
}

StreamPair encode(const Tensor& h_p, const Tensor& h_c, const SceneGeometry& geom, const Encoder& enc,
                  kernels::GroupedStats* stats) {
  StreamPair s{h_p, h_c};
  for (const auto& layer : enc.layers) s = encoder_layer(s.first, s.second, geom, layer, enc.cfg, stats);
  return s;
}

}  // namespace dipp::encoder
