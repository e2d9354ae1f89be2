#include "dipp/scenesim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dipp/error.hpp"
#include "dipp/ops.hpp"

namespace dipp::scenesim {

using geometry::BevGrid;
using geometry::CameraModel;

Eigen::Vector3d Box3D::to_box_frame(const Eigen::Vector3d& p) const {
  const Eigen::Vector3d d = p - center;
  const double c = std::cos(yaw), s = std::sin(yaw);
  return {c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()};
}

std::array<Eigen::Vector2d, 4> Box3D::bev_corners() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const Eigen::Vector2d fx(c * l / 2, s * l / 2), fy(-s * w / 2, c * w / 2);
  const Eigen::Vector2d o = center.head<2>();
  return {o + fx + fy, o - fx + fy, o - fx - fy, o + fx - fy};
}

std::array<Eigen::Vector3d, 8> Box3D::corners() const {
  std::array<Eigen::Vector3d, 8> out;
  const auto base = bev_corners();
  for (std::size_t k = 0; k < 4; ++k) {
    out[k] = {base[k].x(), base[k].y(), center.z() - h / 2};
    out[k + 4] = {base[k].x(), base[k].y(), center.z() + h / 2};
  }
  return out;
}

bool Box3D::contains(const Eigen::Vector3d& p, double margin) const {
  const Eigen::Vector3d q = to_box_frame(p);
  return std::abs(q.x()) <= l / 2 + margin && std::abs(q.y()) <= w / 2 + margin && std::abs(q.z()) <= h / 2 + margin;
}

bool bev_overlap(const Box3D& a, const Box3D& b, double margin) {
  Box3D ia = a, ib = b;
  ia.w += margin;
  ia.l += margin;
  ib.w += margin;
  ib.l += margin;
  const auto ca = ia.bev_corners(), cb = ib.bev_corners();
  for (const auto* poly : {&ca, &cb}) {
    for (std::size_t k = 0; k < 4; ++k) {
      const Eigen::Vector2d e = (*poly)[(k + 1) % 4] - (*poly)[k];
      const Eigen::Vector2d axis(-e.y(), e.x());
      double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
      for (const auto& p : ca) {
        amin = std::min(amin, axis.dot(p));
        amax = std::max(amax, axis.dot(p));
      }
      for (const auto& p : cb) {
        bmin = std::min(bmin, axis.dot(p));
        bmax = std::max(bmax, axis.dot(p));
      }
      if (amax < bmin || bmax < amin) return false;
    }
  }
  return true;
}

std::vector<ClassSpec> SceneSpec::default_classes() {
  return {{"car", 1.9, 4.5, 1.6, 0.1}, {"pedestrian", 0.7, 0.7, 1.75, 0.1}, {"barrier", 0.5, 2.5, 1.0, 0.1}};
}

void SceneSpec::validate() const {
  range.validate();
  if (classes.empty()) throw ConfigError("scene needs at least one class");
  if (!class_mix.empty()) {
    if (class_mix.size() != classes.size()) throw ConfigError("class mix must have one weight per class");
    double total = 0;
    for (double w : class_mix) {
      if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("class weights must be finite and non-negative");
      total += w;
    }
    if (!(total > 0)) throw ConfigError("class weights must not all be zero");
  }
  for (const auto& c : classes) {
    if (!(c.w > 0 && c.l > 0 && c.h > 0) || !(c.jitter >= 0 && c.jitter < 1)) {
      throw ConfigError("class sizes must be positive with jitter in [0, 1)");
    }
  }
  if (lidar.reference_distance <= 0) throw ConfigError("lidar reference distance must be positive");
}

std::vector<CameraModel> make_rig(const RigSpec& spec) {
  if (spec.cameras < 2 || spec.cameras > 6) throw ConfigError("rig must have 2 to 6 cameras");
  if (spec.image_width == 0 || spec.image_height == 0 || spec.stride == 0) throw ConfigError("rig image size must be positive");
  const double n = static_cast<double>(spec.cameras);
  const double fov = 2 * std::numbers::pi / n + spec.fov_margin_deg * std::numbers::pi / 180;
  if (!(fov < std::numbers::pi * 0.95)) throw ConfigError("rig field of view too wide for a pinhole camera");
  const double W = static_cast<double>(spec.image_width), H = static_cast<double>(spec.image_height);
  const double f = (W / 2) / std::tan(fov / 2);
  std::vector<CameraModel> rig;
  for (std::size_t k = 0; k < spec.cameras; ++k) {
    const double yaw = 2 * std::numbers::pi * static_cast<double>(k) / n;
    const Eigen::Vector3d pos(spec.mount_radius * std::cos(yaw), spec.mount_radius * std::sin(yaw), spec.mount_height);
    rig.push_back(CameraModel::looking(yaw, pos, f, f, (W - 1) / 2, (H - 1) / 2, spec.image_width, spec.image_height));
  }
  return rig;
}

namespace {

std::size_t pick_class(const SceneSpec& spec, Rng& rng) {
  if (spec.class_mix.empty()) return rng.below(spec.classes.size());
  const double total = std::accumulate(spec.class_mix.begin(), spec.class_mix.end(), 0.0);
  double u = rng.uniform() * total;
  for (std::size_t k = 0; k < spec.class_mix.size(); ++k) {
    if (u < spec.class_mix[k]) return k;
    u -= spec.class_mix[k];
  }
  return spec.class_mix.size() - 1;
}

double wrap_angle(double a) {
  const double two_pi = 2 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a < 0) a += two_pi;
  return a - std::numbers::pi;
}

}  // namespace

Scene gen_scene(const SceneSpec& spec) {
  spec.validate();
  Scene scene;
  scene.seed = spec.seed;
  scene.rig = make_rig(spec.rig);
  Rng root(spec.seed);
  Rng box_rng = root.split(1);
  for (std::size_t n = 0; n < spec.n_objects; ++n) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
      Box3D b;
      b.class_id = pick_class(spec, box_rng);
      const ClassSpec& cls = spec.classes[b.class_id];
      b.w = cls.w * (1 + cls.jitter * box_rng.uniform(-1, 1));
      b.l = cls.l * (1 + cls.jitter * box_rng.uniform(-1, 1));
      b.h = cls.h * (1 + cls.jitter * box_rng.uniform(-1, 1));
      b.yaw = wrap_angle(box_rng.uniform(-std::numbers::pi, std::numbers::pi));
      b.vx = box_rng.uniform(-spec.max_speed, spec.max_speed);
      b.vy = box_rng.uniform(-spec.max_speed, spec.max_speed);
      const double half = 0.5 * std::hypot(b.w, b.l);
      const double x0 = spec.range.x_min + half, x1 = spec.range.x_max - half;
      const double y0 = spec.range.y_min + half, y1 = spec.range.y_max - half;
      if (!(x1 > x0 && y1 > y0)) throw InfeasibleError("detection range too small for the object sizes");
      b.center = {box_rng.uniform(x0, x1), box_rng.uniform(y0, y1), b.h / 2};
      if (b.center.head<2>().norm() < spec.min_ego_distance + half) continue;
      const bool clash = std::any_of(scene.boxes.begin(), scene.boxes.end(),
                                     [&](const Box3D& o) { return bev_overlap(b, o, spec.spacing); });
      if (clash) continue;
      scene.boxes.push_back(b);
      placed = true;
    }
    if (!placed) {
      throw InfeasibleError("could not place object " + std::to_string(n) + " after " +
                            std::to_string(spec.max_retries) + " attempts");
    }
  }
  Rng lidar_rng = root.split(2);
  scene.points = sample_lidar(scene.boxes, spec.range, spec.lidar, lidar_rng);
  if (scene.points.empty()) throw ConfigError("scene must contain at least one point");
  return scene;
}

PointCloud sample_lidar(const std::vector<Box3D>& boxes, const BevGrid& range, const LidarSpec& spec, Rng& rng) {
  PointCloud pts;
  for (const Box3D& b : boxes) {
    if (spec.rays_per_object == 0) break;
    const double dist = std::max(b.center.head<2>().norm(), 1e-6);
    const double expected = static_cast<double>(spec.rays_per_object) * std::min(1.0, spec.reference_distance / dist);
    auto count = static_cast<std::size_t>(std::floor(expected));
    if (rng.uniform() < expected - std::floor(expected)) ++count;
    // Faces: top, +x, -x, +y, -y (the bottom rests on the ground).
    const double areas[5] = {b.l * b.w, b.w * b.h, b.w * b.h, b.l * b.h, b.l * b.h};
    const double total = areas[0] + areas[1] + areas[2] + areas[3] + areas[4];
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    for (std::size_t k = 0; k < count; ++k) {
      double u = rng.uniform() * total;
      std::size_t face = 0;
      while (face < 4 && u >= areas[face]) u -= areas[face++];
      const double a = rng.uniform(-0.5, 0.5), e = rng.uniform(-0.5, 0.5);
      Eigen::Vector3d q;
      switch (face) {
        case 0: q = {a * b.l, e * b.w, b.h / 2}; break;
        case 1: q = {b.l / 2, a * b.w, e * b.h}; break;
        case 2: q = {-b.l / 2, a * b.w, e * b.h}; break;
        case 3: q = {a * b.l, b.w / 2, e * b.h}; break;
        default: q = {a * b.l, -b.w / 2, e * b.h}; break;
      }
      const double x = b.center.x() + c * q.x() - s * q.y();
      const double y = b.center.y() + s * q.x() + c * q.y();
      pts.insert(pts.end(), {x, y, b.center.z() + q.z(), rng.uniform()});
    }
  }
  for (std::size_t k = 0; k < spec.ground_points; ++k) {
    const double x = rng.uniform(range.x_min, range.x_max), y = rng.uniform(range.y_min, range.y_max);
    pts.insert(pts.end(), {x, y, 0.0, rng.uniform()});
  }
  return pts;
}

geometry::DepthMap render_sparse_depth(const PointCloud& points, const CameraModel& cam) {
  if (points.size() % kPointStride != 0) throw ShapeError("point cloud rows must have 4 values");
  auto map = geometry::DepthMap::empty(cam.width, cam.height);
  for (std::size_t p = 0; p < points.size(); p += kPointStride) {
    const auto px = geometry::try_project({points[p], points[p + 1], points[p + 2]}, cam);
    if (!px || !geometry::in_image(px->u, px->v, cam)) continue;
    const auto col = static_cast<std::size_t>(std::lround(px->u));
    const auto row = static_cast<std::size_t>(std::lround(px->v));
    if (col >= cam.width || row >= cam.height) continue;
    const std::size_t k = row * cam.width + col;
    if (!map.valid[k] || px->depth < map.depth[k]) {
      map.depth[k] = px->depth;
      map.valid[k] = 1;
    }
  }
  return map;
}

PointInputs point_inputs(const PointCloud& points, const BevGrid& grid) {
  if (points.size() % kPointStride != 0) throw ShapeError("point cloud rows must have 4 values");
  PointInputs in;
  in.cells = grid.cells();
  std::vector<double> feats;
  for (std::size_t p = 0; p < points.size(); p += kPointStride) {
    const double x = points[p], y = points[p + 1];
    const auto cell = geometry::bev_index(x, y, grid);
    if (!cell.valid) continue;
    const Eigen::Vector2d c = grid.cell_center(cell.i, cell.j);
    feats.insert(feats.end(), {(x - c.x()) / grid.cell_x(), (y - c.y()) / grid.cell_y(), points[p + 2] / 2,
                               points[p + 3]});
    in.cell_of_point.push_back(cell.flat(grid));
  }
  if (!in.cell_of_point.empty()) in.features = Tensor::from({in.cell_of_point.size(), 4}, std::move(feats));
  return in;
}

Tensor rasterize_image(const Scene& scene, const CameraModel& cam, std::size_t num_classes) {
  const std::size_t H = cam.height, W = cam.width, D = num_classes + 2;
  std::vector<double> img(H * W * D, 0.0);
  for (std::size_t k = 0; k < H * W; ++k) img[k * D + num_classes + 1] = 1.0;

  struct Footprint {
    double depth, u0, u1, v0, v1;
    std::size_t cls;
  };
  std::vector<Footprint> prints;
  for (const Box3D& b : scene.boxes) {
    if (b.class_id >= num_classes) throw ConfigError("box class outside the configured class count");
    const auto center = geometry::try_project(b.center, cam);
    if (!center) continue;
    Footprint f{center->depth, 1e300, -1e300, 1e300, -1e300, b.class_id};
    std::size_t front = 0;
    for (const auto& c : b.corners()) {
      const auto px = geometry::try_project(c, cam);
      if (!px || px->depth < 0.1) continue;
      ++front;
      f.u0 = std::min(f.u0, px->u);
      f.u1 = std::max(f.u1, px->u);
      f.v0 = std::min(f.v0, px->v);
      f.v1 = std::max(f.v1, px->v);
    }
    if (front == 0) continue;
    prints.push_back(f);
  }
  std::stable_sort(prints.begin(), prints.end(), [](const Footprint& a, const Footprint& b) { return a.depth > b.depth; });
  for (const auto& f : prints) {
    const double inv = std::min(1.0, 5.0 / f.depth);
    for (std::size_t r = 0; r < H; ++r) {
      const double v = static_cast<double>(r);
      if (v < f.v0 || v > f.v1) continue;
      for (std::size_t c = 0; c < W; ++c) {
        const double u = static_cast<double>(c);
        if (u < f.u0 || u > f.u1) continue;
        double* px = img.data() + (r * W + c) * D;
        std::fill(px, px + D, 0.0);
        px[f.cls] = 1.0;
        px[num_classes] = inv;
      }
    }
  }
  return Tensor::from({H, W, D}, std::move(img));
}

PointFeaturizer PointFeaturizer::create(nn::ParamStore& store, const std::string& name, std::size_t channels,
                                        Rng& rng) {
  PointFeaturizer f;
  f.channels = channels;
  f.mlp_in = nn::Linear::create(store, name + ".mlp1", 4, channels, rng);
  f.mlp_out = nn::Linear::create(store, name + ".mlp2", channels, channels, rng);
  f.conv1 = nn::Conv2d::create(store, name + ".conv1", channels, channels, 3, rng);
  f.conv2 = nn::Conv2d::create(store, name + ".conv2", channels, channels, 3, rng);
  return f;
}

Tensor PointFeaturizer::pillar_grid(const PointInputs& in, const BevGrid& grid) const {
  if (in.cells != grid.cells()) throw ShapeError("point inputs were built for a different grid");
  if (in.cell_of_point.empty()) return Tensor::zeros({grid.H, grid.W, channels});
  const Tensor per_point = mlp_out(ops::relu(mlp_in(in.features)));
  return ops::reshape(ops::pillar_max(per_point, in.cell_of_point, grid.cells()), {grid.H, grid.W, channels});
}

Tensor PointFeaturizer::operator()(const PointInputs& in, const BevGrid& grid) const {
  const Tensor g = ops::reshape(pillar_grid(in, grid), {1, grid.H, grid.W, channels});
  return ops::reshape(conv2(ops::relu(conv1(g))), {grid.H, grid.W, channels});
}

ImageFeaturizer ImageFeaturizer::create(nn::ParamStore& store, const std::string& name, std::size_t in_channels,
                                        std::size_t channels, Rng& rng) {
  ImageFeaturizer f;
  f.conv1 = nn::Conv2d::create(store, name + ".conv1", in_channels, channels, 3, rng, kernels::PadMode::Replicate);
  f.conv2 = nn::Conv2d::create(store, name + ".conv2", channels, channels, 3, rng, kernels::PadMode::Replicate);
  return f;
}

Tensor ImageFeaturizer::operator()(const Tensor& raster) const {
  if (raster.rank() == 3) {
    const Shape s = raster.shape();
    const Tensor out = (*this)(ops::reshape(raster, {1, s[0], s[1], s[2]}));
    return ops::reshape(out, {s[0], s[1], out.dim(3)});
  }
  if (raster.rank() != 4) throw ShapeError("image raster must be [B, H, W, C] or [H, W, C]");
  return conv2(ops::relu(conv1(raster)));
}

Tensor featurize_points(const PointCloud& points, const BevGrid& grid, const PointFeaturizer& params) {
  return params(point_inputs(points, grid), grid);
}

Tensor featurize_image(const Scene& scene, const CameraModel& feature_cam, std::size_t num_classes,
                       const ImageFeaturizer& params) {
  return params(rasterize_image(scene, feature_cam, num_classes));
}

}  // namespace dipp::scenesim
