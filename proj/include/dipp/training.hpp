#pragma once

// Set matching, detection losses with deep supervision, and the toy training
// loop over synthetic scenes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dipp/decoder.hpp"
#include "dipp/encoder.hpp"
#include "dipp/evalbench.hpp"
#include "dipp/nn.hpp"
#include "dipp/optim.hpp"
#include "dipp/scenesim.hpp"

namespace dipp::training {

inline constexpr std::size_t kUnmatched = std::numeric_limits<std::size_t>::max();

struct MatchResult {
  std::vector<std::size_t> assignment;  // per row (query): column (gt) or kUnmatched
  double total_cost = 0;

  std::size_t matched() const;
};

// Minimum-cost assignment of a row-major rows x cols matrix; min(rows, cols)
// pairs are matched. Throws NumericError on non-finite entries.
MatchResult hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols);

struct LossConfig {
  double cls_weight = 1.0;
  double box_weight = 0.25;
  double heatmap_weight = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

// Ground truth of one scene in decoder units.
struct Targets {
  std::vector<std::size_t> classes;
  std::vector<decoder::BoxVector> boxes;
  std::vector<double> heatmap;  // [H, W, K] Gaussian-splatted centers

  std::size_t size() const { return classes.size(); }
};
Targets make_targets(const std::vector<scenesim::Box3D>& gts, const geometry::BevGrid& grid, std::size_t num_classes);

// cost[i, j] = cls_weight * (focal positive cost - focal negative cost of
// class j under query i) + box_weight * mean |delta| over the first eight box
// entries (center, z, log sizes, sin, cos). [N, M] row-major.
std::vector<double> matching_cost(const Tensor& logits, const Tensor& boxes, const Targets& gt, const LossConfig& cfg);

// Focal loss over all queries and classes against the one-hot targets of the
// matched queries, divided by max(1, matched).
Tensor focal_loss(const Tensor& logits, const std::vector<std::size_t>& target_class, double alpha, double gamma,
                  std::size_t matched);
// Mean over the 10 box entries of |pred - gt|, summed over matched queries and
// divided by max(1, matched).
Tensor l1_box_loss(const Tensor& boxes, const std::vector<std::size_t>& assignment, const Targets& gt);

struct LayerLoss {
  Tensor cls, box;
  MatchResult match;
};
// Hungarian matching then the weighted losses of one prediction set.
LayerLoss layer_loss(const Tensor& logits, const Tensor& boxes, const Targets& gt, const LossConfig& cfg);
// Penalty-reduced focal loss of the heatmap, divided by max(1, objects).
Tensor heatmap_loss(const Tensor& heatmap_logits, const Targets& gt);

struct ModelConfig {
  geometry::BevGrid grid{-54, 54, -54, 54, 100, 100};
  std::size_t stride = 8;
  std::size_t num_classes = 3;
  std::size_t channels = 32;
  encoder::EncoderConfig encoder;
  decoder::DecoderConfig decoder;

  // Copies channels and classes into the sub-configs and checks them.
  void sync();
  void validate() const;
};

// Featurizers, encoder and decoder over one parameter store. Parameter names
// start with pts., img., enc. or dec.
struct Model {
  ModelConfig cfg;
  nn::ParamStore store;
  scenesim::PointFeaturizer points;
  scenesim::ImageFeaturizer images;
  encoder::Encoder enc;
  decoder::Decoder dec;

  static std::unique_ptr<Model> create(ModelConfig cfg, std::uint64_t seed);
};

// Parameter-free inputs of one scene, reusable across steps.
struct PreparedScene {
  scenesim::Scene scene;
  scenesim::PointInputs points;
  Tensor rasters;  // [cameras, Hf, Wf, classes + 2]
  encoder::SceneGeometry geometry;
  Targets targets;
};
PreparedScene prepare_scene(scenesim::Scene scene, const ModelConfig& cfg);

struct ForwardResult {
  decoder::QuerySet queries;
  std::vector<decoder::LayerOutput> layers;
  Tensor h_p, h_c;  // encoder outputs
};
ForwardResult forward(const Model& model, const PreparedScene& scene, std::size_t num_queries);

struct LossBreakdown {
  Tensor total;
  double heatmap = 0;
  std::vector<double> cls, box;  // per decoder layer, weighted
  std::vector<std::size_t> matched;
  // Sum of the heatmap and per-layer terms accumulated in that order.
  double recomputed() const;
};
LossBreakdown compute_loss(const ForwardResult& fwd, const Targets& gt, const LossConfig& cfg);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t train_scenes = 40;
  std::size_t heldout_scenes = 10;
  double lr_max = 1e-3;
  double weight_decay = 1e-4;
  bool augment = true;        // random yaw rotation and left-right flip per step
  LossConfig loss;
  scenesim::SceneSpec scenes;  // template; the seed is replaced per scene
  std::uint64_t seed = 0;
};

struct TrainState {
  Adam adam;
  std::size_t epoch = 0;  // completed epochs
  std::size_t step = 0;   // completed optimizer steps
  std::vector<double> epoch_loss;
  std::vector<double> epoch_map;
};

// Scene seeds of a split (0 = train, 1 = held-out) derived from the run seed.
std::vector<std::uint64_t> split_seeds(std::uint64_t seed, std::size_t split, std::size_t count);
std::vector<scenesim::Scene> make_split(const TrainConfig& cfg, std::size_t split);

// Rotates by `yaw` about the ego z axis after optionally mirroring y.
scenesim::Scene augment_scene(const scenesim::Scene& scene, double yaw, bool flip);

// One optimizer step on one scene. Throws NumericError (without touching the
// parameters) when the loss is not finite.
LossBreakdown train_step(Model& model, TrainState& state, const PreparedScene& scene, const TrainConfig& cfg,
                         std::size_t total_steps);

// Held-out detections for the metric, N_infer queries each.
std::vector<evalbench::Frame> predict(const Model& model, const std::vector<PreparedScene>& scenes);
double evaluate(const Model& model, const std::vector<PreparedScene>& scenes);

struct EpochReport {
  std::size_t epoch = 0;
  double loss = 0;
  double map = 0;
};

// Runs epochs state.epoch .. cfg.epochs - 1 and reports each one. A fresh run
// passes a new state; resuming passes the state loaded with the parameters.
void train_loop(Model& model, TrainState& state, const TrainConfig& cfg,
                const std::function<void(const EpochReport&)>& on_epoch = {});

// "DIPP" checkpoint: magic, u32 version, u64 count, then (u32 name length,
// UTF-8 name, DIPT tensor) per entry. Holds parameters, Adam moments and
// training progress.
void save_checkpoint(const std::string& path, const Model& model, const TrainState& state);
// Loads into an already created model; unknown names are ignored.
TrainState load_checkpoint(const std::string& path, Model& model);
std::map<std::string, Tensor> read_checkpoint(const std::string& path);

}  // namespace dipp::training
