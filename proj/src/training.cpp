#include "dipp/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "dipp/error.hpp"
#include "dipp/ops.hpp"

namespace dipp::training {

using decoder::kBoxDim;
using geometry::BevGrid;
using scenesim::Box3D;

std::size_t MatchResult::matched() const {
  return static_cast<std::size_t>(std::count_if(assignment.begin(), assignment.end(),
                                                [](std::size_t a) { return a != kUnmatched; }));
}

MatchResult hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  if (cost.size() != rows * cols) throw ShapeError("hungarian: cost size does not match rows x cols");
  check_finite(cost, "hungarian");
  MatchResult res;
  res.assignment.assign(rows, kUnmatched);
  if (rows == 0 || cols == 0) return res;

  // Potentials method on the orientation with n <= m.
  const bool transposed = rows > cols;
  const std::size_t n = transposed ? cols : rows, m = transposed ? rows : cols;
  auto a = [&](std::size_t i, std::size_t j) { return transposed ? cost[j * cols + i] : cost[i * cols + j]; };
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const std::size_t i = p[j] - 1, c = j - 1;
    if (transposed) {
      res.assignment[c] = i;
    } else {
      res.assignment[i] = c;
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (res.assignment[r] != kUnmatched) res.total_cost += cost[r * cols + res.assignment[r]];
  }
  return res;
}

Targets make_targets(const std::vector<Box3D>& gts, const BevGrid& grid, std::size_t num_classes) {
  Targets t;
  const auto H = grid.H, W = grid.W;
  t.heatmap.assign(H * W * num_classes, 0.0);
  const double cell = std::min(grid.cell_x(), grid.cell_y());
  for (const auto& b : gts) {
    if (b.class_id >= num_classes) throw ConfigError("ground-truth class outside the model's classes");
    const double row = grid.row_coord(b.center.y()), col = grid.col_coord(b.center.x());
    if (row < -0.5 || col < -0.5 || row >= H - 0.5 || col >= W - 0.5) continue;
    t.classes.push_back(b.class_id);
    t.boxes.push_back(decoder::encode_box(b, grid));
    const long ci = std::lround(row), cj = std::lround(col);
    const long r = std::max(1L, static_cast<long>(0.5 * std::max(b.w, b.l) / cell));
    const double sigma = (2.0 * static_cast<double>(r) + 1) / 6.0;
    for (long di = -r; di <= r; ++di) {
      for (long dj = -r; dj <= r; ++dj) {
        const long i = ci + di, j = cj + dj;
        if (i < 0 || j < 0 || i >= static_cast<long>(H) || j >= static_cast<long>(W)) continue;
        const double g = std::exp(-static_cast<double>(di * di + dj * dj) / (2 * sigma * sigma));
        auto& cellv = t.heatmap[(static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j)) * num_classes + b.class_id];
        cellv = std::max(cellv, g);
      }
    }
  }
  return t;
}

std::vector<double> matching_cost(const Tensor& logits, const Tensor& boxes, const Targets& gt, const LossConfig& cfg) {
  const auto N = logits.dim(0), K = logits.dim(1), M = gt.size();
  if (boxes.dim(0) != N || boxes.dim(1) != kBoxDim) throw ShapeError("matching_cost: boxes must be [N, 10]");
  std::vector<double> cost(N * M);
  const auto lg = logits.data();
  const auto bx = boxes.data();
  constexpr double eps = 1e-8;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < M; ++j) {
      const std::size_t k = gt.classes[j];
      if (k >= K) throw ShapeError("matching_cost: class outside the logits");
      const double p = 1.0 / (1.0 + std::exp(-lg[i * K + k]));
      const double pos = cfg.focal_alpha * std::pow(1 - p, cfg.focal_gamma) * -std::log(p + eps);
      const double neg = (1 - cfg.focal_alpha) * std::pow(p, cfg.focal_gamma) * -std::log(1 - p + eps);
      double l1 = 0;
      for (std::size_t d = 0; d < 8; ++d) l1 += std::abs(bx[i * kBoxDim + d] - gt.boxes[j][d]);
      cost[i * M + j] = cfg.cls_weight * (pos - neg) + cfg.box_weight * l1 / 8.0;
    }
  }
  return cost;
}

Tensor focal_loss(const Tensor& logits, const std::vector<std::size_t>& target_class, double alpha, double gamma,
                  std::size_t matched) {
  const auto N = logits.dim(0), K = logits.dim(1);
  if (target_class.size() != N) throw ShapeError("focal_loss: one target per query");
  std::vector<double> t(N * K, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    if (target_class[i] == kUnmatched) continue;
    if (target_class[i] >= K) throw ShapeError("focal_loss: class outside the logits");
    t[i * K + target_class[i]] = 1.0;
  }
  return ops::scale(ops::sigmoid_focal_loss(logits, t, alpha, gamma), 1.0 / static_cast<double>(std::max<std::size_t>(1, matched)));
}

Tensor l1_box_loss(const Tensor& boxes, const std::vector<std::size_t>& assignment, const Targets& gt) {
  const auto N = boxes.dim(0);
  if (assignment.size() != N || boxes.dim(1) != kBoxDim) throw ShapeError("l1_box_loss: boxes must be [N, 10] with one entry per query");
  std::vector<double> target(N * kBoxDim, 0.0), weight(N * kBoxDim, 0.0);
  std::size_t matched = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (assignment[i] == kUnmatched) continue;
    ++matched;
    std::copy(gt.boxes[assignment[i]].begin(), gt.boxes[assignment[i]].end(), target.begin() + static_cast<std::ptrdiff_t>(i * kBoxDim));
    std::fill_n(weight.begin() + static_cast<std::ptrdiff_t>(i * kBoxDim), kBoxDim, 1.0);
  }
  const double norm = static_cast<double>(kBoxDim * std::max<std::size_t>(1, matched));
  return ops::scale(ops::l1_loss(boxes, target, weight), 1.0 / norm);
}

LayerLoss layer_loss(const Tensor& logits, const Tensor& boxes, const Targets& gt, const LossConfig& cfg) {
  LayerLoss out;
  const auto N = logits.dim(0);
  if (gt.size() == 0) {
    out.match.assignment.assign(N, kUnmatched);
  } else {
    out.match = hungarian(matching_cost(logits, boxes, gt, cfg), N, gt.size());
  }
  const auto m = out.match.matched();
  std::vector<std::size_t> cls(N, kUnmatched);
  for (std::size_t i = 0; i < N; ++i) {
    if (out.match.assignment[i] != kUnmatched) cls[i] = gt.classes[out.match.assignment[i]];
  }
  out.cls = ops::scale(focal_loss(logits, cls, cfg.focal_alpha, cfg.focal_gamma, m), cfg.cls_weight);
  out.box = ops::scale(l1_box_loss(boxes, out.match.assignment, gt), cfg.box_weight);
  return out;
}

Tensor heatmap_loss(const Tensor& heatmap_logits, const Targets& gt) {
  return ops::scale(ops::gaussian_focal_loss(heatmap_logits, gt.heatmap),
                    1.0 / static_cast<double>(std::max<std::size_t>(1, gt.size())));
}

void ModelConfig::sync() {
  encoder.channels = channels;
  decoder.channels = channels;
  decoder.num_classes = num_classes;
}

void ModelConfig::validate() const {
  grid.validate();
  if (stride == 0) throw ConfigError("feature stride must be positive");
  if (encoder.channels != channels || decoder.channels != channels || decoder.num_classes != num_classes) {
    throw ConfigError("encoder and decoder must share the model's channels and classes");
  }
  encoder.validate();
  decoder.validate();
}

std::unique_ptr<Model> Model::create(ModelConfig cfg, std::uint64_t seed) {
  cfg.validate();
  auto m = std::make_unique<Model>();
  m->cfg = cfg;
  const Rng root(seed);
  auto r1 = root.split(1), r2 = root.split(2), r3 = root.split(3), r4 = root.split(4);
  m->points = scenesim::PointFeaturizer::create(m->store, "pts", cfg.channels, r1);
  m->images = scenesim::ImageFeaturizer::create(m->store, "img", cfg.num_classes + 2, cfg.channels, r2);
  m->enc = encoder::Encoder::create(m->store, "enc", cfg.encoder, r3);
  m->dec = decoder::Decoder::create(m->store, "dec", cfg.decoder, r4);
  return m;
}

PreparedScene prepare_scene(scenesim::Scene scene, const ModelConfig& cfg) {
  PreparedScene p;
  p.geometry = encoder::build_geometry(scene, cfg.grid, cfg.stride, cfg.encoder);
  p.points = scenesim::point_inputs(scene.points, cfg.grid);
  std::vector<Tensor> rasters;
  for (const auto& cam : p.geometry.feature_cams) {
    const auto r = scenesim::rasterize_image(scene, cam, cfg.num_classes);
    rasters.push_back(ops::reshape(r, {1, r.dim(0), r.dim(1), r.dim(2)}));
  }
  p.rasters = ops::concat0(rasters);
  p.targets = make_targets(scene.boxes, cfg.grid, cfg.num_classes);
  p.scene = std::move(scene);
  return p;
}

ForwardResult forward(const Model& model, const PreparedScene& scene, std::size_t num_queries) {
  const auto& cfg = model.cfg;
  ForwardResult f;
  const auto h_p = model.points(scene.points, cfg.grid);
  const auto h_c = model.images(scene.rasters);
  std::tie(f.h_p, f.h_c) = encoder::encode(h_p, h_c, scene.geometry, model.enc);
  f.queries = decoder::init_queries(f.h_p, std::min(num_queries, cfg.grid.cells()), model.dec.heatmap, cfg.decoder, cfg.grid);
  decoder::DecodeContext ctx{&f.h_p, &f.h_c, cfg.grid, scene.geometry.feature_cams};
  f.layers = decoder::decode(f.queries, ctx, model.dec);
  return f;
}

double LossBreakdown::recomputed() const {
  double s = heatmap;
  for (std::size_t l = 0; l < cls.size(); ++l) s = s + (cls[l] + box[l]);
  return s;
}

LossBreakdown compute_loss(const ForwardResult& fwd, const Targets& gt, const LossConfig& cfg) {
  LossBreakdown b;
  b.total = ops::scale(heatmap_loss(fwd.queries.heatmap_logits, gt), cfg.heatmap_weight);
  b.heatmap = b.total.item();
  for (const auto& layer : fwd.layers) {
    const auto l = layer_loss(layer.logits, layer.boxes, gt, cfg);
    b.total = ops::add(b.total, ops::add(l.cls, l.box));
    b.cls.push_back(l.cls.item());
    b.box.push_back(l.box.item());
    b.matched.push_back(l.match.matched());
  }
  return b;
}

std::vector<std::uint64_t> split_seeds(std::uint64_t seed, std::size_t split, std::size_t count) {
  Rng r = Rng(seed).split(split);
  std::vector<std::uint64_t> out(count);
  for (auto& s : out) s = r.next_u64();
  return out;
}

std::vector<scenesim::Scene> make_split(const TrainConfig& cfg, std::size_t split) {
  std::vector<scenesim::Scene> out;
  const auto n = split == 0 ? cfg.train_scenes : cfg.heldout_scenes;
  for (auto s : split_seeds(cfg.seed, split, n)) {
    auto spec = cfg.scenes;
    spec.seed = s;
    out.push_back(scenesim::gen_scene(spec));
  }
  return out;
}

namespace {

double wrap(double a) {
  a = std::remainder(a, 2 * std::numbers::pi);
  return a >= std::numbers::pi ? a - 2 * std::numbers::pi : a;
}

}  // namespace

scenesim::Scene augment_scene(const scenesim::Scene& scene, double yaw, bool flip) {
  scenesim::Scene s = scene;
  const double c = std::cos(yaw), sn = std::sin(yaw);
  auto move = [&](double& x, double& y) {
    if (flip) y = -y;
    const double nx = c * x - sn * y, ny = sn * x + c * y;
    x = nx;
    y = ny;
  };
  for (std::size_t p = 0; p < s.num_points(); ++p) move(s.points[p * scenesim::kPointStride], s.points[p * scenesim::kPointStride + 1]);
  for (auto& b : s.boxes) {
    move(b.center.x(), b.center.y());
    move(b.vx, b.vy);
    b.yaw = wrap((flip ? -b.yaw : b.yaw) + yaw);
  }
  return s;
}

LossBreakdown train_step(Model& model, TrainState& state, const PreparedScene& scene, const TrainConfig& cfg,
                         std::size_t total_steps) {
  model.store.zero_grad();
  const auto fwd = forward(model, scene, model.cfg.decoder.queries_train);
  auto loss = compute_loss(fwd, scene.targets, cfg.loss);
  backward(loss.total);
  for (const auto& [name, t] : model.store.all()) {
    if (t.has_grad()) check_finite(t.grad(), name.c_str());
  }
  OneCycle sched;
  sched.lr_max = cfg.lr_max;
  AdamHyper hyper;
  hyper.lr = sched.lr(state.step, total_steps);
  hyper.beta1 = sched.beta1(state.step, total_steps);
  hyper.weight_decay = cfg.weight_decay;
  state.adam.step(model.store.all(), hyper);
  ++state.step;
  return loss;
}

std::vector<evalbench::Frame> predict(const Model& model, const std::vector<PreparedScene>& scenes) {
  NoGradGuard ng;
  std::vector<evalbench::Frame> frames;
  for (const auto& s : scenes) {
    const auto fwd = forward(model, s, model.cfg.decoder.queries_infer);
    frames.push_back({decoder::detections(fwd.layers.back(), fwd.queries, model.cfg.decoder, model.cfg.grid), s.scene.boxes});
  }
  return frames;
}

double evaluate(const Model& model, const std::vector<PreparedScene>& scenes) {
  const auto frames = predict(model, scenes);
  return evalbench::map_lite(frames, model.cfg.num_classes);
}

void train_loop(Model& model, TrainState& state, const TrainConfig& cfg,
                const std::function<void(const EpochReport&)>& on_epoch) {
  if (cfg.scenes.classes.size() != model.cfg.num_classes) throw ConfigError("scene classes do not match the model's classes");
  if (state.epoch >= cfg.epochs) return;
  const auto train = make_split(cfg, 0);
  std::vector<PreparedScene> heldout, fixed;
  for (auto& s : make_split(cfg, 1)) heldout.push_back(prepare_scene(std::move(s), model.cfg));
  if (!cfg.augment) {
    for (const auto& s : train) fixed.push_back(prepare_scene(s, model.cfg));
  }
  const std::size_t total_steps = cfg.epochs * train.size();
  const Rng root(cfg.seed);
  for (std::size_t e = state.epoch; e < cfg.epochs; ++e) {
    Rng order_rng = root.split(100 + e);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    double loss_sum = 0;
    for (auto idx : order) {
      LossBreakdown b;
      if (cfg.augment) {
        Rng aug = root.split(1000000 + state.step);
        const double yaw = aug.uniform(-std::numbers::pi, std::numbers::pi);
        const bool flip = aug.below(2) == 1;
        b = train_step(model, state, prepare_scene(augment_scene(train[idx], yaw, flip), model.cfg), cfg, total_steps);
      } else {
        b = train_step(model, state, fixed[idx], cfg, total_steps);
      }
      loss_sum += b.total.item();
    }
    EpochReport rep;
    rep.epoch = e;
    rep.loss = train.empty() ? 0.0 : loss_sum / static_cast<double>(train.size());
    rep.map = evaluate(model, heldout);
    state.epoch = e + 1;
    state.epoch_loss.push_back(rep.loss);
    state.epoch_map.push_back(rep.map);
    if (on_epoch) on_epoch(rep);
  }
}

namespace {

constexpr char kMagic[4] = {'D', 'I', 'P', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated checkpoint");
  return v;
}

Tensor vec(const std::vector<double>& v) { return Tensor::from({v.size()}, v); }

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const TrainState& state) {
  std::map<std::string, Tensor> table;
  for (const auto& [name, t] : model.store.all()) {
    table["param/" + name] = t;
    const auto it = state.adam.states().find(name);
    if (it == state.adam.states().end()) continue;
    table["adam.m/" + name] = vec(it->second.m);
    table["adam.v/" + name] = vec(it->second.v);
    table["adam.step/" + name] = Tensor::scalar(static_cast<double>(it->second.step));
  }
  table["state.epoch"] = Tensor::scalar(static_cast<double>(state.epoch));
  table["state.step"] = Tensor::scalar(static_cast<double>(state.step));
  if (!state.epoch_loss.empty()) {
    table["trace.loss"] = vec(state.epoch_loss);
    table["trace.map"] = vec(state.epoch_map);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, table.size());
  for (const auto& [name, t] : table) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, t);
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

std::map<std::string, Tensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError("'" + path + "' is not a checkpoint");
  if (get<std::uint32_t>(in) > kCheckpointVersion) throw IoError("checkpoint version is newer than this build");
  const auto count = get<std::uint64_t>(in);
  std::map<std::string, Tensor> table;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw IoError("truncated checkpoint");
    table[name] = read_tensor(in);
  }
  return table;
}

TrainState load_checkpoint(const std::string& path, Model& model) {
  const auto table = read_checkpoint(path);
  TrainState state;
  for (auto& [name, t] : model.store.all()) {
    const auto it = table.find("param/" + name);
    if (it == table.end()) throw IoError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != t.shape()) throw ShapeError("checkpoint parameter '" + name + "' has a different shape");
    std::ranges::copy(it->second.data(), t.data().begin());
    const auto m = table.find("adam.m/" + name);
    if (m == table.end()) continue;
    AdamState s;
    s.m = m->second.values();
    s.v = table.at("adam.v/" + name).values();
    s.step = static_cast<std::size_t>(table.at("adam.step/" + name).item());
    state.adam.states()[name] = std::move(s);
  }
  auto number = [&](const std::string& key) {
    const auto it = table.find(key);
    return it == table.end() ? 0 : static_cast<std::size_t>(it->second.item());
  };
  state.epoch = number("state.epoch");
  state.step = number("state.step");
  if (table.count("trace.loss")) state.epoch_loss = table.at("trace.loss").values();
  if (table.count("trace.map")) state.epoch_map = table.at("trace.map").values();
  return state;
}

}  // namespace dipp::training
