#pragma once

// Run configuration and scene files on disk.

#include <cstdint>
#include <string>
#include <vector>

#include "dipp/training.hpp"

namespace dipp::config {

struct RunConfig {
  std::uint64_t seed = 0;
  geometry::BevGrid grid{-54, 54, -54, 54, 100, 100};
  scenesim::SceneSpec scene;  // range follows `grid`, the seed follows `seed`
  std::size_t stride = 8;
  std::size_t channels = 32;
  encoder::EncoderConfig encoder;
  decoder::DecoderConfig decoder;
  training::TrainConfig train;  // scenes and seed are filled from the fields above
  std::string out = "out";

  training::ModelConfig model_config() const;
  training::TrainConfig train_config() const;
  void validate() const;
};

// Every key is optional and defaults as above; unknown keys are a ConfigError.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string dump_config(const RunConfig& cfg);

// Scene envelope (JSON: seed, rig, boxes, point count) next to a DIPT point
// tensor [N, 4] named <stem>.points.dipt. `json_path` must end in ".json".
void save_scene(const scenesim::Scene& scene, const std::string& json_path);
scenesim::Scene load_scene(const std::string& json_path);

}  // namespace dipp::config
