#pragma once

// Procedural driving scenes and the toy featurizers that turn them into the
// two modality representations.

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dipp/geometry.hpp"
#include "dipp/nn.hpp"
#include "dipp/rng.hpp"
#include "dipp/tensor.hpp"

namespace dipp::scenesim {

struct Box3D {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double w = 1, l = 1, h = 1;  // extent along box y, box x, z
  double yaw = 0;              // heading of the box x axis, in [-pi, pi)
  std::size_t class_id = 0;
  double vx = 0, vy = 0;

  // World point expressed in the box frame (x along heading).
  Eigen::Vector3d to_box_frame(const Eigen::Vector3d& p) const;
  // Ground footprint corners, counter-clockwise.
  std::array<Eigen::Vector2d, 4> bev_corners() const;
  std::array<Eigen::Vector3d, 8> corners() const;
  bool contains(const Eigen::Vector3d& p, double margin = 0) const;
};

// Separating-axis test on the two footprints, inflated by `margin` meters.
bool bev_overlap(const Box3D& a, const Box3D& b, double margin = 0);

using PointCloud = std::vector<double>;  // rows of (x, y, z, intensity)
inline constexpr std::size_t kPointStride = 4;

struct Scene {
  PointCloud points;
  std::vector<Box3D> boxes;
  std::vector<geometry::CameraModel> rig;
  std::uint64_t seed = 0;

  std::size_t num_points() const { return points.size() / kPointStride; }
};

struct ClassSpec {
  std::string name;
  double w = 1.9, l = 4.5, h = 1.6;
  double jitter = 0.1;  // relative size noise
};

struct RigSpec {
  std::size_t cameras = 4;
  std::size_t image_width = 128, image_height = 64;
  std::size_t stride = 8;          // feature stride
  double mount_height = 1.6;
  double mount_radius = 0.3;       // camera offset from the ego center
  double fov_margin_deg = 10;      // horizontal overlap between neighbors
};

struct LidarSpec {
  std::size_t rays_per_object = 200;  // expected object points at the reference distance
  std::size_t ground_points = 2000;
  double reference_distance = 10;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t n_objects = 8;
  std::vector<ClassSpec> classes = default_classes();
  std::vector<double> class_mix;  // sampling weights, empty means uniform
  geometry::BevGrid range;
  double min_ego_distance = 3;
  double max_speed = 2;
  double spacing = 0.5;  // minimum footprint gap between boxes
  std::size_t max_retries = 200;
  RigSpec rig;
  LidarSpec lidar;

  static std::vector<ClassSpec> default_classes();
  void validate() const;
};

// Camera rig with evenly spaced yaws and enough horizontal field of view that
// neighbors overlap by the configured margin. Throws for fewer than 2 or more
// than 6 cameras.
std::vector<geometry::CameraModel> make_rig(const RigSpec& spec);

// Throws InfeasibleError when a box cannot be placed after the retry budget.
Scene gen_scene(const SceneSpec& spec);

// Object points lie on the box surface (no bottom face) with a count that
// falls off as reference_distance / distance; ground points are uniform over
// the range at z = 0.
PointCloud sample_lidar(const std::vector<Box3D>& boxes, const geometry::BevGrid& range,
                        const LidarSpec& spec, Rng& rng);

// Nearest-pixel splat; the smallest depth wins per pixel.
geometry::DepthMap render_sparse_depth(const PointCloud& points, const geometry::CameraModel& cam);

// Per-point inputs of the pillar featurizer for the points inside the grid:
// (offset from the cell center in cells along x and y, z / 2, intensity).
struct PointInputs {
  Tensor features;                    // [N, 4]; undefined when N == 0
  std::vector<std::size_t> cell_of_point;
  std::size_t cells = 0;
};
PointInputs point_inputs(const PointCloud& points, const geometry::BevGrid& grid);

// Class-and-depth raster at feature resolution: one-hot class channels, an
// inverse-depth channel and a background channel that is 1 where no box is
// drawn. Nearer boxes overwrite farther ones. Result [Hf, Wf, classes + 2].
Tensor rasterize_image(const Scene& scene, const geometry::CameraModel& feature_cam, std::size_t num_classes);

struct PointFeaturizer {
  nn::Linear mlp_in, mlp_out;
  nn::Conv2d conv1, conv2;
  std::size_t channels = 0;

  static PointFeaturizer create(nn::ParamStore& store, const std::string& name, std::size_t channels, Rng& rng);
  // -> [H, W, C]
  Tensor operator()(const PointInputs& in, const geometry::BevGrid& grid) const;
  // The pillar grid before the convolutions, [H, W, C].
  Tensor pillar_grid(const PointInputs& in, const geometry::BevGrid& grid) const;
};

struct ImageFeaturizer {
  nn::Conv2d conv1, conv2;

  static ImageFeaturizer create(nn::ParamStore& store, const std::string& name, std::size_t in_channels,
                                std::size_t channels, Rng& rng);
  // raster [B, Hf, Wf, in] or [Hf, Wf, in] -> same leading dims with C channels
  Tensor operator()(const Tensor& raster) const;
};

Tensor featurize_points(const PointCloud& points, const geometry::BevGrid& grid, const PointFeaturizer& params);
Tensor featurize_image(const Scene& scene, const geometry::CameraModel& feature_cam, std::size_t num_classes,
                       const ImageFeaturizer& params);

}  // namespace dipp::scenesim
