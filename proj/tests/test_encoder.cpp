#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dipp/encoder.hpp"
#include "dipp/error.hpp"
#include "dipp/ops.hpp"
#include "dipp/optim.hpp"
#include "gradcheck.hpp"

using namespace dipp;
using namespace dipp::encoder;
using dipp::testing::random_tensor;

namespace {

struct Fixture {
  EncoderConfig cfg;
  scenesim::Scene scene;
  SceneGeometry geom;
  Tensor h_p, h_c;

  explicit Fixture(std::uint64_t seed, std::size_t layers = 1) {
    cfg.num_layers = layers;
    cfg.channels = 8;
    cfg.heads = 2;
    cfg.points = 2;
    cfg.polar_bins = 12;
    cfg.ffn_hidden = 16;
    scenesim::SceneSpec spec;
    spec.seed = seed;
    spec.n_objects = 4;
    spec.range = geometry::BevGrid{-24, 24, -24, 24, 12, 12};
    spec.rig.image_width = 64;
    spec.rig.image_height = 32;
    spec.lidar.ground_points = 400;
    spec.lidar.rays_per_object = 60;
    scene = scenesim::gen_scene(spec);
    geom = build_geometry(scene, spec.range, 8, cfg);
    Rng rng(seed + 1000);
    h_p = random_tensor({12, 12, 8}, rng, 1.0, false);
    h_c = random_tensor({4, 4, 8, 8}, rng, 1.0, false);
  }
};

void set_identity(nn::Linear& l) {
  auto w = l.w.data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < l.w.dim(0); ++i) w[i * l.w.dim(1) + i] = 1.0;
  if (l.b.defined()) {
    auto b = l.b.data();
    std::fill(b.begin(), b.end(), 0.0);
  }
}

void randomize(nn::Linear& l, Rng& rng, double scale = 0.5) {
  for (auto& x : l.w.data()) x = rng.uniform(-scale, scale);
  if (l.b.defined()) {
    for (auto& x : l.b.data()) x = rng.uniform(-scale, scale);
  }
}

// Independent scalar bilinear sampler: zero outside [0, H-1] x [0, W-1].
double bilinear(const std::vector<double>& map, std::size_t H, std::size_t W, std::size_t C, std::size_t ch,
                double r, double c) {
  if (r < 0 || c < 0 || r > double(H - 1) || c > double(W - 1)) return 0.0;
  const auto r0 = std::size_t(std::floor(r)), c0 = std::size_t(std::floor(c));
  const std::size_t r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
  const double fr = r - double(r0), fc = c - double(c0);
  auto at = [&](std::size_t rr, std::size_t cc) { return map[(rr * W + cc) * C + ch]; };
  return (1 - fr) * (1 - fc) * at(r0, c0) + (1 - fr) * fc * at(r0, c1) + fr * (1 - fc) * at(r1, c0) + fr * fc * at(r1, c1);
}

std::vector<double> apply_linear(const std::vector<double>& x, std::size_t rows, const nn::Linear& l) {
  const std::size_t K = l.w.dim(0), N = l.w.dim(1);
  std::vector<double> y(rows * N, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t n = 0; n < N; ++n) {
      double s = l.b.defined() ? l.b.at(n) : 0.0;
      for (std::size_t k = 0; k < K; ++k) s += x[r * K + k] * l.w.at(k * N + n);
      y[r * N + n] = s;
    }
  }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace

TEST(Deformable, ZeroOffsetsSingleScaleIsIdentity) {
  nn::ParamStore store;
  Rng rng(1);
  auto block = DeformableBlock::create(store, "d", 6, 2, 1, 1, rng, false);
  for (auto& x : block.offsets.b.data()) x = 0;
  set_identity(block.value);
  set_identity(block.out);
  const auto h = random_tensor({2, 5, 7, 6}, rng, 1.0, false);
  const auto out = iml_deformable(h, block);
  EXPECT_EQ(out.shape(), h.shape());
  EXPECT_LT(max_abs_diff(out, h), 1e-14);
}

TEST(Deformable, MatchesScalarLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    nn::ParamStore store;
    Rng rng(40 + seed);
    const std::size_t C = 4, heads = 2, M = 3, L = 2, H = 6, W = 6;
    auto block = DeformableBlock::create(store, "d", C, heads, M, L, rng, false);
    randomize(block.offsets, rng, 0.8);
    randomize(block.logits, rng, 1.0);
    randomize(block.value, rng);
    randomize(block.out, rng);
    const auto h = random_tensor({1, H, W, C}, rng, 1.0, false);
    const auto got = iml_deformable(h, block);

    const std::vector<double> x = h.values();
    const auto off = apply_linear(x, H * W, block.offsets);
    const auto lg = apply_linear(x, H * W, block.logits);
    const auto v0 = apply_linear(x, H * W, block.value);
    // Level 1: 2x2 average of level 0 (6x6 -> 3x3, no partial windows).
    std::vector<double> v1(9 * C, 0.0);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) s += v0[((2 * i + a) * W + 2 * j + b) * C + c];
          v1[(i * 3 + j) * C + c] = s / 4;
        }
    const std::size_t S = L * M, d = C / heads;
    std::vector<double> attn(H * W * C, 0.0);
    for (std::size_t q = 0; q < H * W; ++q) {
      const double ry = (double(q / W) + 0.5) / H, rx = (double(q % W) + 0.5) / W;
      for (std::size_t hd = 0; hd < heads; ++hd) {
        double mx = -1e300;
        for (std::size_t s = 0; s < S; ++s) mx = std::max(mx, lg[q * heads * S + hd * S + s]);
        double z = 0;
        for (std::size_t s = 0; s < S; ++s) z += std::exp(lg[q * heads * S + hd * S + s] - mx);
        for (std::size_t s = 0; s < S; ++s) {
          const double a = std::exp(lg[q * heads * S + hd * S + s] - mx) / z;
          const std::size_t lvl = s / M, HL = lvl == 0 ? H : 3;
          const auto& map = lvl == 0 ? v0 : v1;
          const double r = ry * HL - 0.5 + off[q * heads * S * 2 + (hd * S + s) * 2];
          const double c = rx * HL - 0.5 + off[q * heads * S * 2 + (hd * S + s) * 2 + 1];
          for (std::size_t ch = 0; ch < d; ++ch) attn[q * C + hd * d + ch] += a * bilinear(map, HL, HL, C, hd * d + ch, r, c);
        }
      }
    }
    const auto want = apply_linear(attn, H * W, block.out);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.at(i), want[i], 1e-10);
  }
}

TEST(Deformable, ShapePreservedAndChannelMismatchRejected) {
  Rng rng(3);
  for (std::size_t trial = 0; trial < 5; ++trial) {
    nn::ParamStore store;
    const std::size_t heads = 1 + trial % 3, C = heads * (2 + trial), H = 3 + trial, W = 2 + 2 * trial;
    auto block = DeformableBlock::create(store, "d", C, heads, 1 + trial % 4, 1 + trial % 2, rng, trial % 2 == 0);
    const auto h = random_tensor({1 + trial % 2, H, W, C}, rng, 1.0, false);
    EXPECT_EQ(iml_deformable(h, block).shape(), h.shape());
    EXPECT_THROW(iml_deformable(random_tensor({1, H, W, C + 1}, rng, 1.0, false), block), ShapeError);
  }
}

TEST(ImageToLidar, PassThroughAndSingleNeighbor) {
  Fixture f(7);
  nn::ParamStore store;
  Rng rng(2);
  auto block = CrossBlock::create(store, "x", 8, rng, false);
  set_identity(block.q);
  set_identity(block.k);
  set_identity(block.v);
  set_identity(block.out);
  const auto out = mmri_i2l(f.h_p, f.h_c, f.geom, block, f.cfg);
  ASSERT_EQ(out.shape(), f.h_p.shape());
  std::size_t empty = 0, single = 0;
  for (std::size_t cell = 0; cell < f.geom.grid.cells(); ++cell) {
    const std::size_t n = f.geom.i2l_count(cell);
    if (n == 0) {
      ++empty;
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.at(cell * 8 + c), f.h_p.at(cell * 8 + c));
    } else if (n == 1) {
      ++single;
      const auto& s = f.geom.i2l_samples[f.geom.i2l_offsets[cell]];
      std::vector<double> map(f.h_c.data().begin() + s.map * 32 * 8, f.h_c.data().begin() + (s.map + 1) * 32 * 8);
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(cell * 8 + c), bilinear(map, 4, 8, 8, c, s.u, s.v), 1e-12);
    }
  }
  EXPECT_GT(empty, 0u);
  // A hand-built correspondence guarantees the one-neighbor case.
  SceneGeometry g = f.geom;
  g.i2l_samples = {{1, 1.25, 3.5}};
  g.i2l_offsets.assign(g.grid.cells() + 1, 1);
  g.i2l_offsets[0] = 0;
  const auto one = mmri_i2l(f.h_p, f.h_c, g, block, f.cfg);
  std::vector<double> map(f.h_c.data().begin() + 32 * 8, f.h_c.data().begin() + 64 * 8);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(one.at(c), bilinear(map, 4, 8, 8, c, 1.25, 3.5), 1e-12);
  for (std::size_t k = 8; k < one.numel(); ++k) EXPECT_EQ(one.at(k), f.h_p.at(k));
}

TEST(ImageToLidar, MatchesDenseMaskedAttention) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Fixture f(20 + seed);
    nn::ParamStore store;
    Rng rng(seed);
    auto block = CrossBlock::create(store, "x", 8, rng, false);
    const auto got = mmri_i2l(f.h_p, f.h_c, f.geom, block, f.cfg);

    const std::size_t cells = f.geom.grid.cells();
    std::size_t maxn = 1;
    for (std::size_t c = 0; c < cells; ++c) maxn = std::max(maxn, f.geom.i2l_count(c));
    const auto sampled = ops::sample_points(f.h_c, f.geom.i2l_samples);
    const auto ks = block.k(sampled), vs = block.v(sampled);
    std::vector<double> K(cells * maxn * 8, 0.0), V(cells * maxn * 8, 0.0);
    AttentionMask mask(cells * maxn, 0);
    for (std::size_t c = 0; c < cells; ++c) {
      for (std::size_t j = 0; j < f.geom.i2l_count(c); ++j) {
        const std::size_t row = f.geom.i2l_offsets[c] + j;
        std::copy_n(ks.data().begin() + row * 8, 8, K.begin() + (c * maxn + j) * 8);
        std::copy_n(vs.data().begin() + row * 8, 8, V.begin() + (c * maxn + j) * 8);
        mask[c * maxn + j] = 1;
      }
    }
    const auto q = ops::reshape(block.q(ops::reshape(f.h_p, {cells, 8})), {cells, 1, 8});
    const auto dense = masked_mha(q, Tensor::from({cells, maxn, 8}, K), Tensor::from({cells, maxn, 8}, V), mask,
                                  f.cfg.attention());
    const auto proj = block.out(ops::reshape(dense, {cells, 8}));
    for (std::size_t c = 0; c < cells; ++c) {
      for (std::size_t ch = 0; ch < 8; ++ch) {
        const double want = f.geom.i2l_count(c) == 0 ? f.h_p.at(c * 8 + ch) : proj.at(c * 8 + ch);
        EXPECT_NEAR(got.at(c * 8 + ch), want, 1e-12);
      }
    }
  }
}

TEST(ImageToLidar, GroupedMatchesReference) {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Fixture f(60 + seed);
    nn::ParamStore store;
    Rng rng(seed);
    auto block = CrossBlock::create(store, "x", 8, rng, false);
    kernels::GroupedStats stats;
    const auto a = mmri_i2l(f.h_p, f.h_c, f.geom, block, f.cfg);
    const auto b = grouped_i2l(f.h_p, f.h_c, f.geom, f.cfg.intervals, block, f.cfg, &stats);
    worst = std::max(worst, max_abs_diff(a, b));
    EXPECT_LE(stats.padded_elements, stats.naive_elements);
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(ImageToLidar, SingleIntervalPadsLikeNaive) {
  Fixture f(5);
  nn::ParamStore store;
  Rng rng(5);
  auto block = CrossBlock::create(store, "x", 8, rng, false);
  kernels::GroupedStats stats;
  grouped_i2l(f.h_p, f.h_c, f.geom, GroupedIntervals{{0, 64}}, block, f.cfg, &stats);
  EXPECT_EQ(stats.padded_elements, stats.naive_elements);
  std::size_t nonempty = 0;
  for (std::size_t c = 0; c < f.geom.grid.cells(); ++c) nonempty += f.geom.i2l_count(c) > 0;
  EXPECT_EQ(stats.naive_elements, nonempty * 64);
}

TEST(ImageToLidar, BimodalFixturePaddingCount) {
  // 900 pillars with 4 neighbors and 100 with 64, boundaries {0, 4, 64}.
  Fixture f(5);
  SceneGeometry g = f.geom;
  g.grid = geometry::BevGrid{-50, 50, -5, 5, 10, 100};
  g.i2l_offsets.assign(1, 0);
  g.i2l_samples.clear();
  Rng rng(9);
  for (std::size_t cell = 0; cell < 1000; ++cell) {
    const std::size_t n = cell % 10 == 0 ? 64 : 4;
    for (std::size_t j = 0; j < n; ++j) g.i2l_samples.push_back({rng.below(4), rng.uniform(0, 3), rng.uniform(0, 7)});
    g.i2l_offsets.push_back(g.i2l_samples.size());
  }
  Rng r2(10);
  const auto h_p = random_tensor({10, 100, 8}, r2, 1.0, false);
  nn::ParamStore store;
  auto block = CrossBlock::create(store, "x", 8, r2, false);
  kernels::GroupedStats stats;
  const auto b = grouped_i2l(h_p, f.h_c, g, GroupedIntervals{{0, 4, 64}}, block, f.cfg, &stats);
  EXPECT_EQ(stats.padded_elements, 10000u);
  EXPECT_EQ(stats.naive_elements, 64000u);
  EXPECT_DOUBLE_EQ(double(stats.padded_elements) / double(stats.naive_elements), 0.15625);
  EXPECT_LT(max_abs_diff(b, mmri_i2l(h_p, f.h_c, g, block, f.cfg)), 1e-6);
  EXPECT_THROW(grouped_i2l(h_p, f.h_c, g, GroupedIntervals{{0, 4, 32}}, block, f.cfg), Error);
}

TEST(LidarToImage, DegenerateGridAndAllInvalid) {
  Fixture f(11);
  EncoderConfig cfg = f.cfg;
  cfg.k = 0;
  const auto geom = build_geometry(f.scene, f.geom.grid, 8, cfg);
  nn::ParamStore store;
  Rng rng(3);
  auto block = CrossBlock::create(store, "x", 8, rng, false);
  set_identity(block.q);
  set_identity(block.k);
  set_identity(block.v);
  set_identity(block.out);
  const auto out = mmri_l2i(f.h_c, f.h_p, geom, block, cfg);
  ASSERT_EQ(out.shape(), f.h_c.shape());
  for (std::size_t px = 0; px < geom.pixels(); ++px) {
    const auto& t = geom.l2i_targets[px];
    for (std::size_t c = 0; c < 8; ++c) {
      const double want = t.valid ? f.h_p.at(t.flat(geom.grid) * 8 + c) : f.h_c.at(px * 8 + c);
      EXPECT_NEAR(out.at(px * 8 + c), want, 1e-12);
    }
  }
  // Every neighbor invalid: the image passes through unchanged.
  SceneGeometry none = f.geom;
  for (auto& t : none.l2i_targets) t.valid = false;
  none.l2i_cells.clear();
  std::fill(none.l2i_offsets.begin(), none.l2i_offsets.end(), 0);
  const auto same = mmri_l2i(f.h_c, f.h_p, none, block, f.cfg);
  EXPECT_EQ(same.values(), f.h_c.values());
}

TEST(LidarToImage, MatchesDenseMaskedAttention) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Fixture f(80 + seed);
    nn::ParamStore store;
    Rng rng(seed);
    auto block = CrossBlock::create(store, "x", 8, rng, false);
    const auto got = mmri_l2i(f.h_c, f.h_p, f.geom, block, f.cfg);
    const std::size_t P = f.geom.pixels(), G = f.geom.l2i_grid, cells = f.geom.grid.cells();
    ASSERT_EQ(G, 9u);
    const auto kp = block.k(ops::reshape(f.h_p, {cells, 8})), vp = block.v(ops::reshape(f.h_p, {cells, 8}));
    std::vector<double> K(P * G * 8, 0.0), V(P * G * 8, 0.0);
    AttentionMask mask(P * G, 0);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t j = 0; j < G; ++j) {
        const auto& t = f.geom.l2i_targets[p * G + j];
        const std::size_t cell = t.flat(f.geom.grid);
        std::copy_n(kp.data().begin() + cell * 8, 8, K.begin() + (p * G + j) * 8);
        std::copy_n(vp.data().begin() + cell * 8, 8, V.begin() + (p * G + j) * 8);
        mask[p * G + j] = t.valid;
      }
    }
    const auto q = ops::reshape(block.q(ops::reshape(f.h_c, {P, 8})), {P, 1, 8});
    const auto dense =
        masked_mha(q, Tensor::from({P, G, 8}, K), Tensor::from({P, G, 8}, V), mask, f.cfg.attention());
    const auto proj = block.out(ops::reshape(dense, {P, 8}));
    for (std::size_t p = 0; p < P; ++p) {
      bool any = false;
      for (std::size_t j = 0; j < G; ++j) any |= mask[p * G + j] != 0;
      for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_NEAR(got.at(p * 8 + c), any ? proj.at(p * 8 + c) : f.h_c.at(p * 8 + c), 1e-12);
      }
    }
  }
}

TEST(PolarRay, ColumnIsolation) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    EncoderConfig cfg;
    cfg.channels = 8;
    cfg.heads = 2;
    nn::ParamStore store;
    auto block = CrossBlock::create(store, "p", 8, rng, false);
    const auto polar = random_tensor({10, 6, 8}, rng, 1.0, false);
    const auto image = random_tensor({4, 6, 8}, rng, 1.0, false);
    const auto base = polar_columns(polar, image, block, cfg);
    const std::size_t j = rng.below(6);
    auto zeroed = image.clone();
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 8; ++c) zeroed.data()[(r * 6 + j) * 8 + c] = 0.0;
    const auto out = polar_columns(polar, zeroed, block, cfg);
    bool changed = false;
    for (std::size_t r = 0; r < 10; ++r) {
      for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t c = 0; c < 8; ++c) {
          const std::size_t k = (r * 6 + i) * 8 + c;
          if (i != j) {
            EXPECT_EQ(out.at(k), base.at(k));
          } else {
            changed |= out.at(k) != base.at(k);
          }
        }
      }
    }
    EXPECT_TRUE(changed);
  }
}

TEST(PolarRay, SingleColumnMatchesMaskedAttention) {
  Rng rng(4);
  EncoderConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  nn::ParamStore store;
  auto block = CrossBlock::create(store, "p", 8, rng, false);
  const std::size_t R = 7, Wc = 5, Hc = 3;
  const auto polar = random_tensor({R, Wc, 8}, rng, 1.0, false);
  const auto image = random_tensor({Hc, Wc, 8}, rng, 1.0, false);
  const auto out = polar_columns(polar, image, block, cfg);
  const auto pe_r = sinusoidal_table(R, 8), pe_h = sinusoidal_table(Hc, 8);
  for (std::size_t i = 0; i < Wc; ++i) {
    std::vector<double> qin(R * 8), kin(Hc * 8);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < 8; ++c) qin[r * 8 + c] = polar.at((r * Wc + i) * 8 + c) + pe_r[r * 8 + c];
    for (std::size_t r = 0; r < Hc; ++r)
      for (std::size_t c = 0; c < 8; ++c) kin[r * 8 + c] = image.at((r * Wc + i) * 8 + c) + pe_h[r * 8 + c];
    const auto q = block.q(Tensor::from({R, 8}, qin));
    const auto kt = Tensor::from({Hc, 8}, kin);
    const auto col = block.out(masked_mha(q, block.k(kt), block.v(kt), {}, cfg.attention()));
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at((r * Wc + i) * 8 + c), col.at(r * 8 + c), 1e-12);
  }
  EXPECT_THROW(polar_columns(polar, random_tensor({Hc, Wc + 1, 8}, rng, 1.0, false), block, cfg), ShapeError);
}

TEST(PolarRay, OutputIsBevShaped) {
  Fixture f(13);
  nn::ParamStore store;
  Rng rng(1);
  auto block = CrossBlock::create(store, "p", 8, rng, false);
  const auto out = polar_ray_attention(f.h_p, f.h_c, f.geom, block, f.cfg);
  EXPECT_EQ(out.shape(), f.h_p.shape());
  double energy = 0;
  for (double v : out.values()) energy += std::abs(v);
  EXPECT_GT(energy, 0);
}

TEST(EncoderLayer, ZeroInitOutputsReduceToLayerNorm) {
  Fixture f(14);
  nn::ParamStore store;
  Rng rng(2);
  const auto enc = Encoder::create(store, "enc", f.cfg, rng);
  const auto [p, c] = encoder_layer(f.h_p, f.h_c, f.geom, enc.layers[0], f.cfg);
  // Every residual branch adds exactly zero, so each stream is its input
  // passed through that stream's chain of layer norms.
  const auto ones = Tensor::full({8}, 1.0), zeros = Tensor::zeros({8});
  auto ln = [&](Tensor x, int times) {
    for (int i = 0; i < times; ++i) x = ops::layer_norm(x, ones, zeros);
    return x;
  };
  EXPECT_EQ(p.values(), ln(f.h_p, 4).values());
  EXPECT_EQ(c.values(), ln(f.h_c, 3).values());
  EXPECT_LT(max_abs_diff(p, ln(f.h_p, 1)), 1e-3);
}

TEST(EncoderLayer, ShapesPreservedAcrossConfigs) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Fixture f(30 + seed);
    EncoderConfig cfg = f.cfg;
    cfg.zero_init_outputs = false;
    cfg.k = seed % 2;
    cfg.points = 1 + seed;
    const auto geom = build_geometry(f.scene, f.geom.grid, 8, cfg);
    nn::ParamStore store;
    Rng rng(seed);
    const auto enc = Encoder::create(store, "enc", cfg, rng);
    const auto [p, c] = encoder_layer(f.h_p, f.h_c, geom, enc.layers[0], cfg);
    EXPECT_EQ(p.shape(), f.h_p.shape());
    EXPECT_EQ(c.shape(), f.h_c.shape());
    EXPECT_GT(max_abs_diff(p, f.h_p), 1e-3);
    EXPECT_GT(max_abs_diff(c, f.h_c), 1e-3);
  }
}

TEST(EncoderLayer, CrossModalGradientIsLive) {
  Fixture f(15);
  EncoderConfig cfg = f.cfg;
  cfg.zero_init_outputs = false;
  nn::ParamStore store;
  Rng rng(4);
  const auto enc = Encoder::create(store, "enc", cfg, rng);
  Rng r2(5);
  auto h_c = random_tensor(f.h_c.shape(), r2, 1.0, true);
  const auto w = random_tensor(f.h_p.shape(), r2, 1.0, false);
  const auto [p, c] = encoder_layer(f.h_p, h_c, f.geom, enc.layers[0], cfg);
  backward(ops::dot(p, w));
  double g = 0;
  for (double x : h_c.grad()) g += std::abs(x);
  EXPECT_GT(g, 1e-6);
}

TEST(Encoder, EveryParameterLearnsAfterOneStep) {
  Fixture f(16, 2);
  nn::ParamStore store;
  Rng rng(6);
  const auto enc = Encoder::create(store, "enc", f.cfg, rng);
  Rng r2(7);
  const auto wp = random_tensor(f.h_p.shape(), r2, 1.0, false);
  const auto wc = random_tensor(f.h_c.shape(), r2, 1.0, false);
  Adam adam;
  for (int step = 0; step < 2; ++step) {
    store.zero_grad();
    const auto [p, c] = encode(f.h_p, f.h_c, f.geom, enc);
    backward(ops::add(ops::dot(p, wp), ops::dot(c, wc)));
    if (step == 0) adam.step(store.all(), AdamHyper{0.01});
  }
  for (const auto& [name, t] : store.all()) {
    double g = 0;
    if (t.has_grad()) {
      for (double x : t.grad()) g += std::abs(x);
    }
    EXPECT_GT(g, 0.0) << name;
  }
}

TEST(Encoder, ZeroLayersIsIdentityAndTwoLayersCompose) {
  Fixture f(17, 2);
  f.cfg.zero_init_outputs = false;
  nn::ParamStore store;
  Rng rng(8);
  const auto enc = Encoder::create(store, "enc", f.cfg, rng);
  const auto [p, c] = encode(f.h_p, f.h_c, f.geom, enc);
  const auto [p1, c1] = encoder_layer(f.h_p, f.h_c, f.geom, enc.layers[0], f.cfg);
  const auto [p2, c2] = encoder_layer(p1, c1, f.geom, enc.layers[1], f.cfg);
  EXPECT_EQ(p.values(), p2.values());
  EXPECT_EQ(c.values(), c2.values());

  const auto none_cfg = with_variant(f.cfg, Variant::None);
  nn::ParamStore s2;
  const auto none = Encoder::create(s2, "enc", none_cfg, rng);
  EXPECT_EQ(s2.all().size(), 0u);
  const auto [q, d] = encode(f.h_p, f.h_c, f.geom, none);
  EXPECT_EQ(q.values(), f.h_p.values());
  EXPECT_EQ(d.values(), f.h_c.values());
}

TEST(Encoder, AblationVariantsProduceValidOutputs) {
  Fixture f(18, 2);
  for (auto v : {Variant::None, Variant::Iml, Variant::Mmri, Variant::Both}) {
    auto cfg = with_variant(f.cfg, v);
    cfg.zero_init_outputs = false;
    nn::ParamStore store;
    Rng rng(9);
    const auto enc = Encoder::create(store, "enc", cfg, rng);
    const auto [p, c] = encode(f.h_p, f.h_c, f.geom, enc);
    EXPECT_EQ(p.shape(), f.h_p.shape());
    EXPECT_EQ(c.shape(), f.h_c.shape());
    EXPECT_EQ(parse_variant(to_string(v)), v);
    const bool has_polar = std::any_of(store.all().begin(), store.all().end(),
                                       [](const auto& kv) { return kv.first.find("polar") != std::string::npos; });
    EXPECT_EQ(has_polar, v == Variant::Mmri || v == Variant::Both);
  }
  EXPECT_THROW(parse_variant("half"), ConfigError);
}

TEST(Encoder, GeometryNeighborCountsRespectCap) {
  Fixture f(19);
  for (std::size_t c = 0; c < f.geom.grid.cells(); ++c) EXPECT_LE(f.geom.i2l_count(c), 64u);
  EXPECT_EQ(f.geom.l2i_targets.size(), f.geom.pixels() * 9);
  EXPECT_EQ(f.geom.polar.size(), 4u);
}
