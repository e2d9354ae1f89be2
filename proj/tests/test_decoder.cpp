#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dipp/decoder.hpp"
#include "dipp/error.hpp"
#include "dipp/ops.hpp"
#include "gradcheck.hpp"

using namespace dipp;
using namespace dipp::decoder;
using geometry::BevGrid;
using geometry::CameraModel;
using scenesim::Box3D;

namespace {

Box3D make_box(double x, double y, double z, double w, double l, double h, double yaw) {
  Box3D b;
  b.center = {x, y, z};
  b.w = w;
  b.l = l;
  b.h = h;
  b.yaw = yaw;
  return b;
}

double bilinear(const std::vector<double>& map, std::size_t H, std::size_t W, std::size_t C, std::size_t ch,
                double r, double c) {
  if (r < 0 || c < 0 || r > double(H - 1) || c > double(W - 1)) return 0.0;
  const auto r0 = std::size_t(std::floor(r)), c0 = std::size_t(std::floor(c));
  const std::size_t r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
  const double fr = r - double(r0), fc = c - double(c0);
  auto at = [&](std::size_t rr, std::size_t cc) { return map[(rr * W + cc) * C + ch]; };
  return (1 - fr) * (1 - fc) * at(r0, c0) + (1 - fr) * fc * at(r0, c1) + fr * (1 - fc) * at(r1, c0) + fr * fc * at(r1, c1);
}

DecoderConfig small_cfg() {
  DecoderConfig c;
  c.channels = 8;
  c.heads = 2;
  c.roi_size = 3;
  c.num_classes = 3;
  c.queries_train = 6;
  c.queries_infer = 8;
  return c;
}

struct Fixture {
  BevGrid grid{-16, 16, -16, 16, 8, 8};
  std::vector<CameraModel> cams;
  Tensor h_p, h_c;
  DecodeContext ctx;

  explicit Fixture(std::size_t C, Rng& rng) {
    scenesim::RigSpec rig;
    rig.cameras = 4;
    rig.image_width = 32;
    rig.image_height = 16;
    rig.stride = 8;
    for (const auto& cam : scenesim::make_rig(rig)) cams.push_back(cam.scaled(8));
    h_p = dipp::testing::random_tensor({grid.H, grid.W, C}, rng);
    h_c = dipp::testing::random_tensor({cams.size(), cams[0].height, cams[0].width, C}, rng);
    ctx.h_p = &h_p;
    ctx.h_c = &h_c;
    ctx.grid = grid;
    ctx.feature_cams = cams;
  }
};

}  // namespace

TEST(BoxCodec, YawSweepRoundTrip) {
  const BevGrid g;
  for (int k = 0; k < 360; ++k) {
    const double yaw = -std::numbers::pi + k * 2 * std::numbers::pi / 360;
    auto b = make_box(3.7, -12.1, 0.8, 1.9, 4.5, 1.6, yaw);
    b.vx = 1.5;
    b.vy = -0.25;
    const auto v = encode_box(b, g);
    const auto d = decode_box(v, g, 2);
    EXPECT_NEAR(d.yaw, yaw, 1e-9);
    EXPECT_NEAR(d.center.x(), 3.7, 1e-9);
    EXPECT_NEAR(d.center.y(), -12.1, 1e-9);
    EXPECT_NEAR(d.center.z(), 0.8, 1e-12);
    EXPECT_NEAR(d.w, 1.9, 1e-12);
    EXPECT_NEAR(d.l, 4.5, 1e-12);
    EXPECT_NEAR(d.h, 1.6, 1e-12);
    EXPECT_EQ(d.vx, 1.5);
    EXPECT_EQ(d.vy, -0.25);
    EXPECT_EQ(d.class_id, 2u);
  }
  // Unnormalized (sin, cos) still gives the angle.
  std::array<double, 10> v{0, 0, 0, 0, 0, 0, 1.2 * std::sin(0.3), 1.2 * std::cos(0.3), 0, 0};
  EXPECT_NEAR(decode_box(v, g).yaw, 0.3, 1e-12);
}

TEST(BoxCodec, CenterInCellCoordinates) {
  const BevGrid g;
  const auto c = g.cell_center(17, 42);
  const auto v = encode_box(make_box(c.x(), c.y(), 0, 1, 1, 1, 0), g);
  EXPECT_NEAR(v[0], 42.0, 1e-9);
  EXPECT_NEAR(v[1], 17.0, 1e-9);
}

TEST(Modality, Parity) {
  std::vector<Modality> want{Modality::Image, Modality::Bev, Modality::Image, Modality::Bev, Modality::Image};
  for (std::size_t l = 1; l <= 5; ++l) EXPECT_EQ(modality_of_layer(l), want[l - 1]);
  EXPECT_THROW(modality_of_layer(0), ArgumentError);
}

TEST(SelectPeaks, IsolatedDeltas) {
  const std::size_t K = 2, H = 10, W = 12;
  std::vector<double> s(K * H * W, 0.0);
  const std::vector<std::pair<std::size_t, std::size_t>> deltas{{0, 13}, {0, 77}, {1, 5}, {1, 100}, {0, 119}};
  double score = 0.9;
  for (auto [k, cell] : deltas) {
    s[k * H * W + cell] = score;
    score -= 0.1;
  }
  const auto peaks = select_peaks(s, K, H, W, deltas.size());
  ASSERT_EQ(peaks.size(), deltas.size());
  for (std::size_t q = 0; q < deltas.size(); ++q) {
    EXPECT_EQ(peaks[q].cls, deltas[q].first);
    EXPECT_EQ(peaks[q].cell, deltas[q].second);
  }
}

TEST(SelectPeaks, TieGoesToSmallerFlatIndex) {
  const std::size_t K = 2, H = 6, W = 6;
  std::vector<double> s(K * H * W, 0.0);
  s[1 * H * W + 3] = 0.5;  // class 1, cell 3: flat 39
  s[0 * H * W + 30] = 0.5;  // class 0, cell 30: flat 30
  auto p = select_peaks(s, K, H, W, 1);
  EXPECT_EQ(p[0].cls, 0u);
  EXPECT_EQ(p[0].cell, 30u);
  s[0 * H * W + 2] = 0.5;  // same class, isolated
  p = select_peaks(s, K, H, W, 2);
  EXPECT_EQ(p[0].cell, 2u);
  EXPECT_EQ(p[1].cell, 30u);
}

TEST(SelectPeaks, MatchesExhaustiveSort) {
  Rng rng(11);
  const std::size_t K = 3, H = 9, W = 7;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(K * H * W);
    for (auto& x : s) x = rng.uniform(0, 1);
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          const double x = s[k * H * W + i * W + j];
          bool max = true;
          for (int di = -1; di <= 1; ++di) {
            for (int dj = -1; dj <= 1; ++dj) {
              const int a = int(i) + di, b = int(j) + dj;
              if (a < 0 || b < 0 || a >= int(H) || b >= int(W)) continue;
              if (s[k * H * W + a * W + b] > x) max = false;
            }
          }
          all.emplace_back(max ? x : 0.0, k * H * W + i * W + j);
        }
      }
    }
    std::sort(all.begin(), all.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    const std::size_t N = 15;
    const auto peaks = select_peaks(s, K, H, W, N);
    for (std::size_t q = 0; q < N; ++q) {
      EXPECT_EQ(peaks[q].cls * H * W + peaks[q].cell, all[q].second);
      EXPECT_EQ(peaks[q].score, all[q].first);
    }
  }
}

TEST(InitQueries, EmbeddingAndBoxes) {
  Rng rng(3);
  auto cfg = small_cfg();
  nn::ParamStore store;
  const auto head = HeatmapHead::create(store, "hm", cfg, rng);
  const BevGrid g{-8, 8, -8, 8, 5, 6};
  const auto h = dipp::testing::random_tensor({5, 6, cfg.channels}, rng);
  EXPECT_THROW(init_queries(h, 31, head, cfg, g), ArgumentError);

  const auto qs = init_queries(h, 7, head, cfg, g);
  EXPECT_EQ(qs.embedding.shape(), (Shape{7, cfg.channels}));
  EXPECT_EQ(qs.boxes.shape(), (Shape{7, kBoxDim}));
  EXPECT_EQ(qs.heatmap_logits.shape(), (Shape{5, 6, cfg.num_classes}));
  for (std::size_t q = 0; q < 7; ++q) {
    const auto& p = qs.peaks[q];
    const double row = static_cast<double>(p.cell / 6);
    const double col = static_cast<double>(p.cell % 6);
    EXPECT_EQ(qs.boxes.at(q * kBoxDim), col);
    EXPECT_EQ(qs.boxes.at(q * kBoxDim + 1), row);
    const auto pe = position_code(row, col, cfg.channels);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      const double want = h.at(p.cell * cfg.channels + c) + pe[c] + head.class_embed.w.at(p.cls * cfg.channels + c);
      EXPECT_NEAR(qs.embedding.at(q * cfg.channels + c), want, 1e-12);
    }
  }
  // The prior bias puts the initial heatmap near 0.1.
  nn::ParamStore s2;
  Rng r2(3);
  auto quiet = HeatmapHead::create(s2, "hm", cfg, r2);
  std::ranges::fill(quiet.conv2.w.data(), 0.0);
  const auto logits = quiet(h);
  for (std::size_t k = 0; k < logits.numel(); ++k) EXPECT_NEAR(1 / (1 + std::exp(-logits.at(k))), 0.1, 1e-3);
}

TEST(RoiImage, BehindCameraIsInvisible) {
  const auto cam = CameraModel::looking(0, {0, 0, 0}, 10, 10, 7.5, 3.5, 16, 8);
  EXPECT_FALSE(roi_image(make_box(-10, 0, 0, 1, 1, 1, 0.3), cam));
  // In front but far outside the view.
  EXPECT_FALSE(roi_image(make_box(10, 60, 0, 1, 1, 1, 0), cam));
}

TEST(RoiImage, UnitCubeOnAxisIsCentered) {
  const auto full = CameraModel::looking(0, {0, 0, 0}, 80, 80, 63.5, 31.5, 128, 64);
  const auto feat = full.scaled(8);
  const auto r = roi_image(make_box(10, 0, 0, 1, 1, 1, 0), feat);
  ASSERT_TRUE(r);
  EXPECT_NEAR(0.5 * (r->c0 + r->c1), (full.cx + 0.5) / 8 - 0.5, 1e-12);
  EXPECT_NEAR(0.5 * (r->r0 + r->r1), (full.cy + 0.5) / 8 - 0.5, 1e-12);
  EXPECT_NEAR(0.5 * (r->c0 + r->c1), feat.cx, 1e-12);
  // Nearest face at 9.5 m sets the extent: 0.5 * fx / 9.5 each side.
  EXPECT_NEAR(r->c1 - r->c0, 10.0 / 9.5, 1e-12);
}

TEST(RoiImage, MatchesPerCornerProjection) {
  Rng rng(21);
  const auto cam = CameraModel::looking(0.2, {0.3, 0.1, 1.6}, 20, 20, 15.5, 7.5, 32, 16);
  int checked = 0;
  for (int t = 0; t < 300; ++t) {
    const auto b = make_box(rng.uniform(-5, 30), rng.uniform(-15, 15), rng.uniform(0, 2), rng.uniform(0.5, 3),
                            rng.uniform(0.5, 5), rng.uniform(0.5, 2), rng.uniform(-3.1, 3.1));
    double u0 = 1e9, u1 = -1e9, v0 = 1e9, v1 = -1e9;
    bool any = false;
    for (const auto& c : b.corners()) {
      const Eigen::Vector3d pc = cam.rotation * c + cam.translation;
      if (pc.z() <= 0) continue;
      any = true;
      const double u = cam.fx * pc.x() / pc.z() + cam.cx, v = cam.fy * pc.y() / pc.z() + cam.cy;
      u0 = std::min(u0, u), u1 = std::max(u1, u), v0 = std::min(v0, v), v1 = std::max(v1, v);
    }
    const bool visible = any && u1 >= -0.5 && u0 < 31.5 && v1 >= -0.5 && v0 < 15.5;
    const auto r = roi_image(b, cam);
    ASSERT_EQ(bool(r), visible);
    if (!r) continue;
    ++checked;
    EXPECT_NEAR(r->c0, std::clamp(u0, 0.0, 31.0), 1e-9);
    EXPECT_NEAR(r->c1, std::clamp(u1, 0.0, 31.0), 1e-9);
    EXPECT_NEAR(r->r0, std::clamp(v0, 0.0, 15.0), 1e-9);
    EXPECT_NEAR(r->r1, std::clamp(v1, 0.0, 15.0), 1e-9);
  }
  EXPECT_GT(checked, 50);
}

TEST(RoiBev, Arithmetic) {
  const BevGrid g;
  const auto r = roi_bev(make_box(0, 0, 0.5, 2, 2, 1, 0), g, 2.0);
  const double center = g.row_coord(0);
  EXPECT_NEAR((r.r1 - r.r0) * g.cell_y(), 4.0, 1e-9);
  EXPECT_NEAR((r.c1 - r.c0) * g.cell_x(), 4.0, 1e-9);
  EXPECT_NEAR(0.5 * (r.r0 + r.r1), center, 1e-9);
  EXPECT_NEAR(0.5 * (r.c0 + r.c1), g.col_coord(0), 1e-9);

  const auto d = roi_bev(make_box(0, 0, 0.5, 2, 2, 1, std::numbers::pi / 4), g, 2.0);
  EXPECT_NEAR((d.r1 - d.r0) * g.cell_y(), 4.0 * std::sqrt(2.0), 1e-9);
  EXPECT_NEAR((d.c1 - d.c0) * g.cell_x(), 4.0 * std::sqrt(2.0), 1e-9);

  const auto e = roi_bev(make_box(53.5, -53.5, 0.5, 2, 4, 1, 0.4), g, 2.0);
  EXPECT_EQ(e.c1, double(g.W - 1));
  EXPECT_EQ(e.r0, 0.0);
  EXPECT_LT(e.c0, e.c1);
  EXPECT_LT(e.r0, e.r1);
}

TEST(RoiAlign, ConstantVerbatimAndOracle) {
  Rng rng(8);
  const std::size_t B = 2, H = 9, W = 11, C = 3;
  const auto constant = Tensor::full({B, H, W, C}, 2.5);
  const auto a = roi_align(constant, 1, {1.3, 2.2, 6.9, 8.1}, 7);
  ASSERT_EQ(a.shape(), (Shape{49, C}));
  for (std::size_t k = 0; k < a.numel(); ++k) EXPECT_DOUBLE_EQ(a.at(k), 2.5);

  const auto maps = dipp::testing::random_tensor({B, H, W, C}, rng, 1.0, false);
  const auto v = roi_align(maps, 1, {2, 3, 4, 5}, 3);
  for (std::size_t a2 = 0; a2 < 3; ++a2) {
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        EXPECT_EQ(v.at((a2 * 3 + b) * C + c), maps.at(((1 * H + 2 + a2) * W + 3 + b) * C + c));
      }
    }
  }

  const auto one = roi_align(maps, 0, {2, 3, 4, 5}, 1);
  for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(one.at(c), maps.at((3 * W + 4) * C + c));

  const auto all = maps.values();
  const std::vector<double> map1(all.begin() + H * W * C, all.end());
  for (int t = 0; t < 50; ++t) {
    const double r0 = rng.uniform(0, H - 1), r1 = rng.uniform(r0, H - 1);
    const double c0 = rng.uniform(0, W - 1), c1 = rng.uniform(c0, W - 1);
    const std::size_t S = 1 + t % 7;
    const auto got = roi_align(maps, 1, {r0, c0, r1, c1}, S);
    for (std::size_t a2 = 0; a2 < S; ++a2) {
      for (std::size_t b = 0; b < S; ++b) {
        const double r = S == 1 ? (r0 + r1) / 2 : r0 + (r1 - r0) * a2 / double(S - 1);
        const double c = S == 1 ? (c0 + c1) / 2 : c0 + (c1 - c0) * b / double(S - 1);
        for (std::size_t ch = 0; ch < C; ++ch) {
          EXPECT_NEAR(got.at((a2 * S + b) * C + ch), bilinear(map1, H, W, C, ch, r, c), 1e-12);
        }
      }
    }
  }
}

TEST(MmpiLayer, ZeroGeneratorLeavesLayerNormOfResidual) {
  Rng rng(4);
  auto cfg = small_cfg();
  cfg.self_attention = false;
  cfg.zero_init_outputs = false;
  nn::ParamStore store;
  auto dec = Decoder::create(store, "dec", cfg, rng);
  auto& layer = dec.layers[0];
  std::ranges::fill(layer.generator.w.data(), 0.0);
  std::ranges::fill(layer.generator.b.data(), 0.0);
  Fixture fx(cfg.channels, rng);
  const auto emb = dipp::testing::random_tensor({5, cfg.channels}, rng, 1.0, false);
  std::vector<double> boxes(5 * kBoxDim, 0.0);
  for (std::size_t q = 0; q < 5; ++q) {
    boxes[q * kBoxDim] = double(q);
    boxes[q * kBoxDim + 1] = 7.0 - double(q);
    boxes[q * kBoxDim + 7] = 1;
  }
  const auto b = Tensor::from({5, kBoxDim}, boxes);
  const auto out = mmpi_layer(emb, b, Modality::Bev, fx.ctx, layer, cfg);
  EXPECT_EQ(out.visible, 5u);
  const auto want = layer.ln_mmpi(emb);
  for (std::size_t k = 0; k < want.numel(); ++k) EXPECT_NEAR(out.embedding.at(k), want.at(k), 1e-12);
}

TEST(MmpiLayer, InvisibleQueriesKeepEmbeddingAndStillPredict) {
  Rng rng(5);
  auto cfg = small_cfg();
  cfg.self_attention = false;
  cfg.zero_init_outputs = false;
  nn::ParamStore store;
  const auto dec = Decoder::create(store, "dec", cfg, rng);
  Fixture fx(cfg.channels, rng);
  const auto emb = dipp::testing::random_tensor({2, cfg.channels}, rng, 1.0, false);
  // Query 0 sits at the ego (inside every camera's blind spot with a tiny box), query 1 ahead.
  std::vector<double> boxes(2 * kBoxDim, 0.0);
  boxes[0] = fx.grid.col_coord(0), boxes[1] = fx.grid.row_coord(0), boxes[2] = 50.0;
  boxes[3] = boxes[4] = boxes[5] = std::log(0.1);
  boxes[7] = 1;
  boxes[kBoxDim] = fx.grid.col_coord(10), boxes[kBoxDim + 1] = fx.grid.row_coord(0), boxes[kBoxDim + 2] = 1.0;
  boxes[kBoxDim + 7] = 1;
  const auto out = mmpi_layer(emb, Tensor::from({2, kBoxDim}, boxes), Modality::Image, fx.ctx, dec.layers[0], cfg);
  EXPECT_EQ(out.visible, 1u);
  for (std::size_t c = 0; c < cfg.channels; ++c) EXPECT_EQ(out.embedding.at(c), emb.at(c));
  bool changed = false;
  for (std::size_t c = 0; c < cfg.channels; ++c) changed |= out.embedding.at(cfg.channels + c) != emb.at(cfg.channels + c);
  EXPECT_TRUE(changed);
  EXPECT_EQ(out.logits.shape(), (Shape{2, cfg.num_classes}));
  EXPECT_EQ(out.boxes.shape(), (Shape{2, kBoxDim}));
}

TEST(MmpiLayer, QueryCountConserved) {
  Rng rng(6);
  auto cfg = small_cfg();
  nn::ParamStore store;
  const auto dec = Decoder::create(store, "dec", cfg, rng);
  Fixture fx(cfg.channels, rng);
  for (std::size_t N : {1u, 2u, 7u, 40u}) {
    const auto emb = dipp::testing::random_tensor({N, cfg.channels}, rng, 1.0, false);
    std::vector<double> boxes(N * kBoxDim);
    for (auto& x : boxes) x = rng.uniform(0, 7);
    for (auto m : {Modality::Image, Modality::Bev}) {
      const auto out = mmpi_layer(emb, Tensor::from({N, kBoxDim}, boxes), m, fx.ctx, dec.layers[0], cfg);
      EXPECT_EQ(out.embedding.dim(0), N);
      EXPECT_EQ(out.logits.dim(0), N);
      EXPECT_EQ(out.boxes.dim(0), N);
    }
  }
  const auto emb = dipp::testing::random_tensor({3, cfg.channels + 1}, rng, 1.0, false);
  EXPECT_THROW(mmpi_layer(emb, Tensor::zeros({3, kBoxDim}), Modality::Bev, fx.ctx, dec.layers[0], cfg), ShapeError);
}

TEST(MmpiLayer, GradientCheck) {
  for (auto modality : {Modality::Bev, Modality::Image}) {
    Rng rng(7);
    auto cfg = small_cfg();
    cfg.zero_init_outputs = false;
    cfg.roi_size = 2;
    nn::ParamStore store;
    const auto dec = Decoder::create(store, "dec", cfg, rng);
    Fixture fx(cfg.channels, rng);
    fx.h_p.set_requires_grad(true);
    fx.h_c.set_requires_grad(true);
    const std::size_t N = 3;
    const auto emb = dipp::testing::random_tensor({N, cfg.channels}, rng);
    std::vector<double> boxes(N * kBoxDim, 0.0);
    for (std::size_t q = 0; q < N; ++q) {
      boxes[q * kBoxDim] = fx.grid.col_coord(4.0 + 3.0 * q);
      boxes[q * kBoxDim + 1] = fx.grid.row_coord(-2.0 + 2.0 * q);
      boxes[q * kBoxDim + 2] = 0.8;
      boxes[q * kBoxDim + 3] = std::log(1.9);
      boxes[q * kBoxDim + 4] = std::log(3.7);
      boxes[q * kBoxDim + 5] = std::log(1.6);
      boxes[q * kBoxDim + 6] = std::sin(0.3 * q);
      boxes[q * kBoxDim + 7] = std::cos(0.3 * q);
    }
    const auto b = Tensor::from({N, kBoxDim}, boxes);
    const auto& L = dec.layers[0];
    const auto r1 = dipp::testing::random_tensor({N, cfg.channels}, rng, 1.0, false);
    const auto r2 = dipp::testing::random_tensor({N, cfg.num_classes}, rng, 1.0, false);
    const auto r3 = dipp::testing::random_tensor({N, kBoxDim}, rng, 1.0, false);
    auto loss = [&] {
      const auto o = mmpi_layer(emb, b, modality, fx.ctx, L, cfg);
      return ops::add(ops::add(ops::dot(o.embedding, r1), ops::dot(o.logits, r2)), ops::dot(o.boxes, r3));
    };
    EXPECT_EQ(mmpi_layer(emb, b, modality, fx.ctx, L, cfg).visible, N) << to_string(modality);
    const auto map = modality == Modality::Image ? fx.h_c : fx.h_p;
    EXPECT_LT(dipp::testing::gradcheck(loss, {emb, map, L.generator.w, L.generator.b, L.reduce.w, L.sa_q.w, L.sa_v.w,
                                        L.ln_mmpi.gamma, L.cls_out.w, L.reg_hidden.w}),
              1e-5)
        << to_string(modality);
  }
}

TEST(Decode, ScheduleAndStableStart) {
  Rng rng(9);
  auto cfg = small_cfg();
  nn::ParamStore store;
  const auto dec = Decoder::create(store, "dec", cfg, rng);
  Fixture fx(cfg.channels, rng);
  const auto qs = init_queries(fx.h_p, cfg.queries_train, dec.heatmap, cfg, fx.grid);
  const auto outs = decode(qs, fx.ctx, dec);
  ASSERT_EQ(outs.size(), 5u);
  std::vector<Modality> trace;
  for (const auto& o : outs) trace.push_back(o.modality);
  EXPECT_EQ(trace, (std::vector<Modality>{Modality::Image, Modality::Bev, Modality::Image, Modality::Bev, Modality::Image}));
  for (const auto& o : outs) {
    EXPECT_EQ(o.embedding.dim(0), cfg.queries_train);
    EXPECT_EQ(o.boxes.values(), qs.boxes.values());  // zero-initialized box heads
  }

  cfg.num_layers = 1;
  nn::ParamStore s1;
  const auto one = Decoder::create(s1, "dec", cfg, rng);
  const auto o1 = decode(init_queries(fx.h_p, 4, one.heatmap, cfg, fx.grid), fx.ctx, one);
  ASSERT_EQ(o1.size(), 1u);
  EXPECT_EQ(o1[0].modality, Modality::Image);
}

TEST(Decode, GradientsReachBothStreams) {
  Rng rng(10);
  auto cfg = small_cfg();
  cfg.zero_init_outputs = false;
  cfg.num_layers = 2;
  nn::ParamStore store;
  const auto dec = Decoder::create(store, "dec", cfg, rng);
  Fixture fx(cfg.channels, rng);
  fx.h_p.set_requires_grad(true);
  fx.h_c.set_requires_grad(true);
  const auto qs = init_queries(fx.h_p, 6, dec.heatmap, cfg, fx.grid);
  const auto outs = decode(qs, fx.ctx, dec);
  backward(ops::add(ops::sum(outs[1].logits), ops::sum(outs[1].boxes)));
  auto nonzero = [](const Tensor& t) {
    if (!t.has_grad()) return false;
    return std::ranges::any_of(t.grad(), [](double g) { return g != 0.0; });
  };
  EXPECT_TRUE(nonzero(fx.h_p));
  EXPECT_TRUE(nonzero(fx.h_c));
  EXPECT_TRUE(nonzero(dec.layers[0].generator.w));
}

TEST(Detections, ClassAndScore) {
  Rng rng(12);
  auto cfg = small_cfg();
  nn::ParamStore store;
  const auto dec = Decoder::create(store, "dec", cfg, rng);
  Fixture fx(cfg.channels, rng);
  const auto qs = init_queries(fx.h_p, 4, dec.heatmap, cfg, fx.grid);
  LayerOutput out;
  out.logits = Tensor::from({4, 3}, {0, 2, 1, -1, -2, -3, 5, 5, 0, 0, 0, 9});
  out.boxes = qs.boxes;
  const std::vector<std::size_t> cls{1, 0, 0, 2};
  const std::vector<double> best{2, -1, 5, 9};
  for (bool with_heatmap : {false, true}) {
    cfg.score_with_heatmap = with_heatmap;
    const auto dets = detections(out, qs, cfg, fx.grid);
    ASSERT_EQ(dets.size(), 4u);
    for (std::size_t q = 0; q < 4; ++q) {
      EXPECT_EQ(dets[q].box.class_id, cls[q]);
      const double hm = with_heatmap ? qs.peaks[q].score : 1.0;
      EXPECT_NEAR(dets[q].score, hm / (1 + std::exp(-best[q])), 1e-12);
    }
  }
}
