#include "dipp/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dipp/error.hpp"
#include "json.hpp"

namespace dipp::config {

using nlohmann::json;

namespace {

// Reads optional keys of one object and rejects the ones nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key " + where_ + "." + k);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json grid_json(const geometry::BevGrid& g) {
  return {{"x_min", g.x_min}, {"x_max", g.x_max}, {"y_min", g.y_min}, {"y_max", g.y_max}, {"H", g.H}, {"W", g.W}};
}

void read_grid(const json& j, const std::string& where, geometry::BevGrid& g) {
  Reader r(j, where);
  r.get("x_min", g.x_min);
  r.get("x_max", g.x_max);
  r.get("y_min", g.y_min);
  r.get("y_max", g.y_max);
  r.get("H", g.H);
  r.get("W", g.W);
  r.finish();
}

json scene_json(const scenesim::SceneSpec& s) {
  json classes = json::array();
  for (const auto& c : s.classes) classes.push_back({{"name", c.name}, {"w", c.w}, {"l", c.l}, {"h", c.h}, {"jitter", c.jitter}});
  return {{"n_objects", s.n_objects},
          {"classes", classes},
          {"class_mix", s.class_mix},
          {"min_ego_distance", s.min_ego_distance},
          {"max_speed", s.max_speed},
          {"spacing", s.spacing},
          {"max_retries", s.max_retries},
          {"rig",
           {{"cameras", s.rig.cameras},
            {"image_width", s.rig.image_width},
            {"image_height", s.rig.image_height},
            {"mount_height", s.rig.mount_height},
            {"mount_radius", s.rig.mount_radius},
            {"fov_margin_deg", s.rig.fov_margin_deg}}},
          {"lidar",
           {{"rays_per_object", s.lidar.rays_per_object},
            {"ground_points", s.lidar.ground_points},
            {"reference_distance", s.lidar.reference_distance}}}};
}

void read_scene(const json& j, scenesim::SceneSpec& s) {
  Reader r(j, "scene");
  r.get("n_objects", s.n_objects);
  if (const auto* c = r.sub("classes")) {
    if (!c->is_array()) throw ConfigError("scene.classes must be an array");
    s.classes.clear();
    for (std::size_t k = 0; k < c->size(); ++k) {
      scenesim::ClassSpec cs;
      Reader cr(c->at(k), "scene.classes[" + std::to_string(k) + "]");
      cr.get("name", cs.name);
      cr.get("w", cs.w);
      cr.get("l", cs.l);
      cr.get("h", cs.h);
      cr.get("jitter", cs.jitter);
      cr.finish();
      s.classes.push_back(cs);
    }
  }
  r.get("class_mix", s.class_mix);
  r.get("min_ego_distance", s.min_ego_distance);
  r.get("max_speed", s.max_speed);
  r.get("spacing", s.spacing);
  r.get("max_retries", s.max_retries);
  if (const auto* rig = r.sub("rig")) {
    Reader rr(*rig, "scene.rig");
    rr.get("cameras", s.rig.cameras);
    rr.get("image_width", s.rig.image_width);
    rr.get("image_height", s.rig.image_height);
    rr.get("mount_height", s.rig.mount_height);
    rr.get("mount_radius", s.rig.mount_radius);
    rr.get("fov_margin_deg", s.rig.fov_margin_deg);
    rr.finish();
  }
  if (const auto* l = r.sub("lidar")) {
    Reader lr(*l, "scene.lidar");
    lr.get("rays_per_object", s.lidar.rays_per_object);
    lr.get("ground_points", s.lidar.ground_points);
    lr.get("reference_distance", s.lidar.reference_distance);
    lr.finish();
  }
  r.finish();
}

json encoder_json(const encoder::EncoderConfig& e) {
  return {{"num_layers", e.num_layers}, {"heads", e.heads},
          {"k", e.k},                   {"points", e.points},
          {"image_scales", e.image_scales}, {"bev_scales", e.bev_scales},
          {"polar_bins", e.polar_bins}, {"ffn_hidden", e.ffn_hidden},
          {"intervals", e.intervals.bounds}, {"iml", e.iml},
          {"mmri", e.mmri},             {"polar", e.polar},
          {"grouped", e.grouped},       {"zero_init_outputs", e.zero_init_outputs}};
}

void read_encoder(const json& j, encoder::EncoderConfig& e) {
  Reader r(j, "encoder");
  std::string variant;
  r.get("variant", variant);
  if (!variant.empty()) e = encoder::with_variant(e, encoder::parse_variant(variant));
  r.get("num_layers", e.num_layers);
  r.get("heads", e.heads);
  r.get("k", e.k);
  r.get("points", e.points);
  r.get("image_scales", e.image_scales);
  r.get("bev_scales", e.bev_scales);
  r.get("polar_bins", e.polar_bins);
  r.get("ffn_hidden", e.ffn_hidden);
  r.get("intervals", e.intervals.bounds);
  r.get("iml", e.iml);
  r.get("mmri", e.mmri);
  r.get("polar", e.polar);
  r.get("grouped", e.grouped);
  r.get("zero_init_outputs", e.zero_init_outputs);
  r.finish();
}

json decoder_json(const decoder::DecoderConfig& d) {
  return {{"num_layers", d.num_layers},
          {"queries_train", d.queries_train},
          {"queries_infer", d.queries_infer},
          {"roi_size", d.roi_size},
          {"bev_enlarge", d.bev_enlarge},
          {"heads", d.heads},
          {"self_attention", d.self_attention},
          {"zero_init_outputs", d.zero_init_outputs},
          {"heatmap_prior", d.heatmap_prior},
          {"score_with_heatmap", d.score_with_heatmap}};
}

void read_decoder(const json& j, decoder::DecoderConfig& d) {
  Reader r(j, "decoder");
  r.get("num_layers", d.num_layers);
  r.get("queries_train", d.queries_train);
  r.get("queries_infer", d.queries_infer);
  r.get("roi_size", d.roi_size);
  r.get("bev_enlarge", d.bev_enlarge);
  r.get("heads", d.heads);
  r.get("self_attention", d.self_attention);
  r.get("zero_init_outputs", d.zero_init_outputs);
  r.get("heatmap_prior", d.heatmap_prior);
  r.get("score_with_heatmap", d.score_with_heatmap);
  r.finish();
}

json train_json(const training::TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"train_scenes", t.train_scenes},
          {"heldout_scenes", t.heldout_scenes},
          {"lr_max", t.lr_max},
          {"weight_decay", t.weight_decay},
          {"augment", t.augment},
          {"loss",
           {{"cls_weight", t.loss.cls_weight},
            {"box_weight", t.loss.box_weight},
            {"heatmap_weight", t.loss.heatmap_weight},
            {"focal_alpha", t.loss.focal_alpha},
            {"focal_gamma", t.loss.focal_gamma}}}};
}

void read_train(const json& j, training::TrainConfig& t) {
  Reader r(j, "train");
  r.get("epochs", t.epochs);
  r.get("train_scenes", t.train_scenes);
  r.get("heldout_scenes", t.heldout_scenes);
  r.get("lr_max", t.lr_max);
  r.get("weight_decay", t.weight_decay);
  r.get("augment", t.augment);
  if (const auto* l = r.sub("loss")) {
    Reader lr(*l, "train.loss");
    lr.get("cls_weight", t.loss.cls_weight);
    lr.get("box_weight", t.loss.box_weight);
    lr.get("heatmap_weight", t.loss.heatmap_weight);
    lr.get("focal_alpha", t.loss.focal_alpha);
    lr.get("focal_gamma", t.loss.focal_gamma);
    lr.finish();
  }
  r.finish();
}

}  // namespace

training::ModelConfig RunConfig::model_config() const {
  training::ModelConfig m;
  m.grid = grid;
  m.stride = stride;
  m.channels = channels;
  m.num_classes = scene.classes.size();
  m.encoder = encoder;
  m.decoder = decoder;
  m.sync();
  return m;
}

training::TrainConfig RunConfig::train_config() const {
  auto t = train;
  t.scenes = scene;
  t.scenes.range = grid;
  t.scenes.rig.stride = stride;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  model_config().validate();
  auto s = train_config().scenes;
  s.validate();
  if (train.lr_max <= 0 || train.weight_decay < 0) throw ConfigError("learning rate must be positive and weight decay non-negative");
  if (out.empty()) throw ConfigError("output directory must be set");
}

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Reader r(j, "config");
  r.get("seed", c.seed);
  if (const auto* g = r.sub("grid")) read_grid(*g, "grid", c.grid);
  if (const auto* s = r.sub("scene")) read_scene(*s, c.scene);
  r.get("stride", c.stride);
  r.get("channels", c.channels);
  if (const auto* e = r.sub("encoder")) read_encoder(*e, c.encoder);
  if (const auto* d = r.sub("decoder")) read_decoder(*d, c.decoder);
  if (const auto* t = r.sub("train")) read_train(*t, c.train);
  r.get("out", c.out);
  r.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& c) {
  json j = {{"seed", c.seed},
            {"grid", grid_json(c.grid)},
            {"scene", scene_json(c.scene)},
            {"stride", c.stride},
            {"channels", c.channels},
            {"encoder", encoder_json(c.encoder)},
            {"decoder", decoder_json(c.decoder)},
            {"train", train_json(c.train)},
            {"out", c.out}};
  return j.dump(2) + "\n";
}

namespace {

std::string sidecar_of(const std::string& json_path) {
  const std::string ext = ".json";
  if (json_path.size() <= ext.size() || json_path.compare(json_path.size() - ext.size(), ext.size(), ext) != 0) {
    throw ArgumentError("scene files must end in .json: '" + json_path + "'");
  }
  return json_path.substr(0, json_path.size() - ext.size()) + ".points.dipt";
}

}  // namespace

void save_scene(const scenesim::Scene& scene, const std::string& json_path) {
  const auto sidecar = sidecar_of(json_path);
  json boxes = json::array();
  for (const auto& b : scene.boxes) {
    boxes.push_back({{"center", {b.center.x(), b.center.y(), b.center.z()}},
                     {"w", b.w}, {"l", b.l}, {"h", b.h}, {"yaw", b.yaw},
                     {"class_id", b.class_id}, {"vx", b.vx}, {"vy", b.vy}});
  }
  json rig = json::array();
  for (const auto& c : scene.rig) {
    std::vector<double> rot(c.rotation.data(), c.rotation.data() + 9);  // column-major
    rig.push_back({{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
                   {"width", c.width}, {"height", c.height},
                   {"rotation_colmajor", rot},
                   {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}}});
  }
  const json j = {{"format", "dipp-scene"},
                  {"version", 1},
                  {"seed", scene.seed},
                  {"num_points", scene.num_points()},
                  {"points_file", std::filesystem::path(sidecar).filename().string()},
                  {"boxes", boxes},
                  {"rig", rig}};
  std::ofstream out(json_path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + json_path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing '" + json_path + "'");
  if (scene.num_points() > 0) {
    save_tensor(sidecar, Tensor::from({scene.num_points(), scenesim::kPointStride}, scene.points));
  } else {
    std::filesystem::remove(sidecar);
  }
}

scenesim::Scene load_scene(const std::string& json_path) {
  std::ifstream in(json_path, std::ios::binary);
  if (!in) throw IoError("cannot open scene '" + json_path + "'");
  json j;
  try {
    j = json::parse(in);
    if (j.at("format") != "dipp-scene") throw IoError("'" + json_path + "' is not a scene file");
    scenesim::Scene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& b : j.at("boxes")) {
      scenesim::Box3D box;
      const auto c = b.at("center").get<std::vector<double>>();
      if (c.size() != 3) throw IoError("box center needs three entries");
      box.center = {c[0], c[1], c[2]};
      box.w = b.at("w");
      box.l = b.at("l");
      box.h = b.at("h");
      box.yaw = b.at("yaw");
      box.class_id = b.at("class_id");
      box.vx = b.at("vx");
      box.vy = b.at("vy");
      s.boxes.push_back(box);
    }
    for (const auto& c : j.at("rig")) {
      geometry::CameraModel cam;
      cam.fx = c.at("fx");
      cam.fy = c.at("fy");
      cam.cx = c.at("cx");
      cam.cy = c.at("cy");
      cam.width = c.at("width");
      cam.height = c.at("height");
      const auto rot = c.at("rotation_colmajor").get<std::vector<double>>();
      const auto t = c.at("translation").get<std::vector<double>>();
      if (rot.size() != 9 || t.size() != 3) throw IoError("camera pose has the wrong size");
      std::copy(rot.begin(), rot.end(), cam.rotation.data());
      cam.translation = {t[0], t[1], t[2]};
      cam.validate();
      s.rig.push_back(cam);
    }
    const auto n = j.at("num_points").get<std::size_t>();
    if (n > 0) {
      const auto pts = load_tensor(sidecar_of(json_path));
      if (pts.rank() != 2 || pts.dim(0) != n || pts.dim(1) != scenesim::kPointStride) {
        throw IoError("point file does not match the scene envelope");
      }
      s.points = pts.values();
    }
    return s;
  } catch (const json::exception& e) {
    throw IoError("malformed scene '" + json_path + "': " + e.what());
  }
}

}  // namespace dipp::config
