// dipp: scene generation, training, evaluation, attention benchmark and
// heatmap export.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "dipp/config.hpp"
#include "dipp/error.hpp"
#include "dipp/evalbench.hpp"
#include "dipp/training.hpp"

namespace fs = std::filesystem;
using namespace dipp;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (JSON)");
  cmd->add_option("--seed", c.seed, "overrides the configured seed");
  cmd->add_option("--out", c.out, "output directory");
}

config::RunConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? config::parse_config("{}") : config::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  return cfg;
}

fs::path make_out(const config::RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec || !fs::is_directory(cfg.out)) throw IoError("cannot create output directory '" + cfg.out + "'");
  return cfg.out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string scene_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu.json", k);
  return buf;
}

std::size_t parse_split(const std::string& s) {
  if (s == "train") return 0;
  if (s == "heldout") return 1;
  throw ArgumentError("split must be 'train' or 'heldout'");
}

int gen_scene(const Common& c, std::size_t count, const std::string& split) {
  const auto which = parse_split(split);
  const auto cfg = resolve(c);
  auto tc = cfg.train_config();
  tc.train_scenes = tc.heldout_scenes = count;
  const auto scenes = training::make_split(tc, which);
  const auto dir = make_out(cfg);
  for (std::size_t k = 0; k < scenes.size(); ++k) config::save_scene(scenes[k], (dir / scene_name(k)).string());
  std::cout << "scenes=" << scenes.size() << "\nout=" << dir.string() << "\n";
  return 0;
}

std::string metrics_text(const training::TrainState& st) {
  std::string s;
  for (std::size_t e = 0; e < st.epoch_loss.size(); ++e) {
    s += "epoch=" + std::to_string(e + 1) + " loss=" + fmt(st.epoch_loss[e]) + " map_lite=" + fmt(st.epoch_map[e]) + "\n";
  }
  return s;
}

struct StopTraining {};

int train(const Common& c, const std::string& resume, std::size_t stop_after) {
  const auto cfg = resolve(c);
  const auto dir = make_out(cfg);
  auto model = training::Model::create(cfg.model_config(), cfg.seed);
  training::TrainState state;
  if (!resume.empty()) state = training::load_checkpoint(resume, *model);
  write_text(dir / "config.json", config::dump_config(cfg));
  const auto ckpt = (dir / "checkpoint.dipp").string();
  std::size_t ran = 0;
  try {
    training::train_loop(*model, state, cfg.train_config(), [&](const training::EpochReport& r) {
      std::cout << "epoch=" << r.epoch + 1 << " loss=" << fmt(r.loss) << " map_lite=" << fmt(r.map) << std::endl;
      training::save_checkpoint(ckpt, *model, state);
      write_text(dir / "metrics.txt", metrics_text(state));
      if (++ran == stop_after) throw StopTraining{};
    });
  } catch (StopTraining) {
  }
  training::save_checkpoint(ckpt, *model, state);
  write_text(dir / "metrics.txt", metrics_text(state));
  std::cout << "checkpoint=" << ckpt << "\n";
  return 0;
}

std::vector<training::PreparedScene> load_scenes(const config::RunConfig& cfg, const std::string& dir,
                                                const std::string& split) {
  const auto mc = cfg.model_config();
  std::vector<training::PreparedScene> out;
  if (dir.empty()) {
    for (auto& s : training::make_split(cfg.train_config(), parse_split(split))) out.push_back(training::prepare_scene(std::move(s), mc));
    return out;
  }
  if (!fs::is_directory(dir)) throw IoError("scene directory '" + dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(training::prepare_scene(config::load_scene(f.string()), mc));
  return out;
}

std::unique_ptr<training::Model> load_model(const config::RunConfig& cfg, const std::string& checkpoint) {
  auto model = training::Model::create(cfg.model_config(), cfg.seed);
  training::load_checkpoint(checkpoint, *model);
  return model;
}

int eval(const Common& c, const std::string& checkpoint, const std::string& scene_dir, const std::string& split) {
  const auto cfg = resolve(c);
  const auto model = load_model(cfg, checkpoint);
  const auto scenes = load_scenes(cfg, scene_dir, split);
  const auto frames = training::predict(*model, scenes);
  std::string report = "scenes=" + std::to_string(scenes.size()) + "\n";
  report += "map_lite=" + fmt(evalbench::map_lite(frames, model->cfg.num_classes)) + "\n";
  for (std::size_t k = 0; k < model->cfg.num_classes; ++k) {
    for (double t : evalbench::kThresholds) {
      report += "ap." + cfg.scene.classes[k].name + "@" + fmt(t) + "=" + fmt(evalbench::ap_center_distance(frames, k, t)) + "\n";
    }
  }
  std::cout << report;
  if (!c.out.empty()) write_text(make_out(cfg) / "eval.txt", report);
  return 0;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ArgumentError("expected a comma-separated list of counts, got '" + s + "'");
    }
  }
  return out;
}

// "900x4,100x64": 900 queries with 4 neighbors and 100 with 64.
std::vector<std::size_t> parse_distribution(const std::string& s) {
  std::vector<std::size_t> counts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    if (x == std::string::npos) throw ArgumentError("distribution entries look like <queries>x<neighbors>, got '" + item + "'");
    const auto n = parse_list(item.substr(0, x)), k = parse_list(item.substr(x + 1));
    if (n.size() != 1 || k.size() != 1) throw ArgumentError("bad distribution entry '" + item + "'");
    counts.insert(counts.end(), n[0], k[0]);
  }
  return counts;
}

int bench_attn(const Common& c, const std::string& dist, const std::string& bounds, std::size_t trials) {
  const auto counts = dist.empty() ? evalbench::bimodal_fixture() : parse_distribution(dist);
  const auto b = parse_list(bounds);
  const auto seed = c.seed.value_or(0);
  const auto rep = evalbench::bench_grouped(counts, b, trials, 32, 4, seed);
  std::cout << rep.to_text();
  if (!c.out.empty()) {
    auto cfg = resolve(c);
    write_text(make_out(cfg) / "bench.txt", rep.to_text());
  }
  return 0;
}

int dump_heatmap(const Common& c, const std::string& checkpoint, const std::string& scene, int cls, std::string path) {
  const auto cfg = resolve(c);
  const auto model = load_model(cfg, checkpoint);
  const auto mc = model->cfg;
  auto prepared = scene.empty() ? training::prepare_scene(training::make_split(cfg.train_config(), 1).at(0), mc)
                                : training::prepare_scene(config::load_scene(scene), mc);
  NoGradGuard ng;
  const auto fwd = training::forward(*model, prepared, 1);
  const auto K = mc.num_classes, HW = mc.grid.cells();
  if (cls >= static_cast<int>(K)) throw ArgumentError("class index out of range");
  std::vector<double> map(HW);
  const auto logits = fwd.queries.heatmap_logits.data();
  for (std::size_t i = 0; i < HW; ++i) {
    double best = -1e300;
    for (std::size_t k = 0; k < K; ++k) {
      if (cls >= 0 && static_cast<int>(k) != cls) continue;
      best = std::max(best, 1.0 / (1.0 + std::exp(-logits[i * K + k])));
    }
    map[i] = best;
  }
  if (path.empty()) path = (make_out(cfg) / "heatmap.pgm").string();
  evalbench::dump_heatmap(map, mc.grid.H, mc.grid.W, path);
  std::cout << "heatmap=" << path << "\n";
  return 0;
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Argument: return 2;
    case ErrorCategory::Config: return 3;
    case ErrorCategory::Io: return 4;
    case ErrorCategory::Shape: return 5;
    case ErrorCategory::Numeric: return 6;
    case ErrorCategory::Geometry: return 7;
    case ErrorCategory::Infeasible: return 8;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal 3D detection toolkit on synthetic scenes"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, bench_c, heat_c;
  std::size_t count = 1, trials = 5, stop_after = 0;
  std::string split = "train", eval_split = "heldout", resume, checkpoint, scenes, dist, bounds = "0,4,64", scene, path;
  int cls = -1;

  auto* gen = app.add_subcommand("gen-scene", "write synthetic scenes (JSON + point sidecar)");
  add_common(gen, gen_c);
  gen->add_option("--count", count, "number of scenes");
  gen->add_option("--split", split, "train or heldout seed stream");

  auto* tr = app.add_subcommand("train", "train a model; writes checkpoint.dipp and metrics.txt");
  add_common(tr, train_c);
  tr->add_option("--resume", resume, "checkpoint to continue from");
  tr->add_option("--stop-after", stop_after, "run at most this many epochs now; the schedule still spans train.epochs");

  auto* ev = app.add_subcommand("eval", "map_lite and per-class AP of a checkpoint");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--scenes", scenes, "directory of scene files (default: generated split)");
  ev->add_option("--split", eval_split, "train or heldout when --scenes is absent");

  auto* be = app.add_subcommand("bench-attn", "grouped vs reference sparse attention");
  add_common(be, bench_c);
  be->add_option("--counts", dist, "neighbor distribution, e.g. 900x4,100x64 (default)");
  be->add_option("--bounds", bounds, "interval bounds, e.g. 0,4,64");
  be->add_option("--trials", trials, "timed repetitions");

  auto* hm = app.add_subcommand("dump-heatmap", "BEV class heatmap as PGM");
  add_common(hm, heat_c);
  hm->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  hm->add_option("--scene", scene, "scene file (default: first held-out scene)");
  hm->add_option("--class", cls, "class index (default: max over classes)");
  hm->add_option("--path", path, "output file (default: <out>/heatmap.pgm)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: argument: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) return gen_scene(gen_c, count, split);
    if (*tr) return train(train_c, resume, stop_after);
    if (*ev) return eval(eval_c, checkpoint, scenes, eval_split);
    if (*be) return bench_attn(bench_c, dist, bounds, trials);
    if (*hm) return dump_heatmap(heat_c, checkpoint, scene, cls, path);
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.category()) << ": " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
