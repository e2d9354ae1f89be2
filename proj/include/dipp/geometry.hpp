#pragma once

// Coordinate-frame machinery shared by the featurizers, the cross-modal
// correspondences, and the decoder RoIs.
//
// Conventions: world frame is x forward, y left, z up (meters). Camera frame
// is x right, y down, z along the optical axis. Pixel (u, v) is (column, row)
// with integer values at pixel centers. BEV cell (i, j) is (row along y,
// column along x); continuous BEV sample coordinates place cell centers on
// integers.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dipp/kernels.hpp"
#include "dipp/tensor.hpp"

namespace dipp::geometry {

struct CameraModel {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world -> camera
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  std::size_t width = 1, height = 1;

  // Throws GeometryError on non-positive focal lengths or a non-rotation.
  static CameraModel create(const Eigen::Matrix3d& K, const Eigen::Matrix4d& E, std::size_t width,
                            std::size_t height);
  // Level camera at `position` whose optical axis points along world yaw `yaw`.
  static CameraModel looking(double yaw, const Eigen::Vector3d& position, double fx, double fy,
                             double cx, double cy, std::size_t width, std::size_t height);

  void validate() const;
  Eigen::Matrix3d K() const;
  Eigen::Matrix4d E() const;
  Eigen::Vector3d origin() const { return -rotation.transpose() * translation; }
  // The same camera sampled at 1/stride resolution; pixel centers of the
  // coarse grid sit at the centers of each stride x stride block.
  CameraModel scaled(std::size_t stride) const;
};

struct PixelDepth {
  double u = 0, v = 0, depth = 0;
};

std::optional<PixelDepth> try_project(const Eigen::Vector3d& p_world, const CameraModel& cam);
// Throws GeometryError(BehindCamera) when the camera-frame z <= 0.
PixelDepth project_point(const Eigen::Vector3d& p_world, const CameraModel& cam);
// Throws GeometryError(InvalidDepth) for depth <= 0.
Eigen::Vector3d lift_pixel(double u, double v, double depth, const CameraModel& cam);

bool in_image(double u, double v, const CameraModel& cam);

struct BevGrid {
  double x_min = -54, x_max = 54, y_min = -54, y_max = 54;
  std::size_t H = 100, W = 100;

  void validate() const;
  double cell_x() const { return (x_max - x_min) / static_cast<double>(W); }
  double cell_y() const { return (y_max - y_min) / static_cast<double>(H); }
  std::size_t cells() const { return H * W; }
  bool contains(double x, double y) const { return x >= x_min && x <= x_max && y >= y_min && y <= y_max; }
  // Continuous sample coordinates (integer at cell centers).
  double row_coord(double y) const { return (y - y_min) / (y_max - y_min) * static_cast<double>(H) - 0.5; }
  double col_coord(double x) const { return (x - x_min) / (x_max - x_min) * static_cast<double>(W) - 0.5; }
  Eigen::Vector2d cell_center(std::size_t i, std::size_t j) const;
};

struct BevCell {
  std::size_t i = 0, j = 0;
  bool valid = false;  // false when the input lay outside the detection range
  std::size_t flat(const BevGrid& g) const { return i * g.W + j; }
};

// Floor-then-clamp continuous -> cell conversion; out-of-range inputs are
// clamped but flagged invalid.
BevCell bev_index(double x, double y, const BevGrid& grid);

struct DepthMap {
  std::size_t width = 0, height = 0;
  std::vector<double> depth;
  std::vector<std::uint8_t> valid;

  static DepthMap empty(std::size_t width, std::size_t height);
  bool is_valid(std::size_t row, std::size_t col) const { return valid[row * width + col] != 0; }
  double at(std::size_t row, std::size_t col) const { return depth[row * width + col]; }
  std::size_t valid_count() const;
};

struct CompletionOptions {
  // Holes with no valid pixel within this Chebyshev radius get `fallback`;
  // 0 means unbounded search.
  std::size_t max_radius = 0;
  double fallback = 0;
};

// Nearest-valid-neighbor fill (Euclidean in pixel units; ties go to the
// smaller row, then the smaller column). Throws GeometryError when no pixel
// is valid.
DepthMap complete_depth(const DepthMap& sparse, const CompletionOptions& options = {});

struct BevTarget {
  std::size_t i = 0, j = 0;
  bool valid = false;
  std::size_t flat(const BevGrid& g) const { return i * g.W + j; }
};

// Camera -> BEV neighbors of pixel (row, col): the (2k+1)^2 grid around it,
// row-major over (drow, dcol). Neighbors outside the image or lifting outside
// the detection range are flagged invalid.
std::vector<BevTarget> map_c2p(std::size_t row, std::size_t col, std::size_t k,
                               const DepthMap& dense, const CameraModel& cam, const BevGrid& grid);

struct ImageTarget {
  std::size_t camera = 0;
  double u = 0, v = 0;  // pixel coordinates in that camera
};

// Point indices per BEV cell (CSR); points outside the range are dropped.
struct PillarIndex {
  std::vector<std::size_t> offsets;  // cells + 1
  std::vector<std::size_t> points;
  std::vector<std::size_t> cell_of_point;  // per input point, or npos
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::span<const std::size_t> in_cell(std::size_t cell) const {
    return std::span<const std::size_t>(points).subspan(offsets[cell], offsets[cell + 1] - offsets[cell]);
  }
};

// points: rows of (x, y, z, ...) with `stride` doubles per point.
PillarIndex build_pillars(std::span<const double> points, std::size_t stride, const BevGrid& grid);

// BEV -> camera neighbors of cell (i, j): the projection of every pillar
// point landing inside some camera image with positive depth.
std::vector<ImageTarget> map_p2c(std::size_t i, std::size_t j, std::span<const double> points,
                                 std::size_t stride, std::span<const CameraModel> cams,
                                 const BevGrid& grid);
std::vector<ImageTarget> map_p2c(std::size_t cell, const PillarIndex& pillars,
                                 std::span<const double> points, std::size_t stride,
                                 std::span<const CameraModel> cams);

struct PolarGrid {
  std::size_t R = 128;
  std::size_t W = 1;
  double r_max = 1;
  Eigen::Vector2d origin = Eigen::Vector2d::Zero();

  void validate() const;
  double bin_size() const { return r_max / static_cast<double>(R); }
  double radius_of_bin(std::size_t b) const { return (static_cast<double>(b) + 0.5) * bin_size(); }
};

// Polar grid for one feature-resolution camera: W = camera width, origin at
// the camera center, r_max = detection-range diagonal.
PolarGrid polar_grid_for(const CameraModel& feature_cam, const BevGrid& grid, std::size_t R);

// Azimuth of feature column i relative to the optical axis:
// atan((i - cx) / fx) on the feature-resolution camera, which equals the
// full-resolution angle at the stride's center pixel. Throws on i >= width.
double azimuth_of_column(std::size_t i, const CameraModel& feature_cam);
// Ground-plane unit direction of the ray through column i.
Eigen::Vector2d column_direction(std::size_t i, const CameraModel& feature_cam);

// BEV sample coordinates of every polar node, row-major [R, W].
std::vector<kernels::SamplePoint> polar_sample_points(const CameraModel& feature_cam,
                                                      const PolarGrid& pgrid, const BevGrid& grid);

// BEV cells covered by the polar grid and their (bin, column) coordinates.
struct PolarInverse {
  std::vector<std::size_t> cells;
  std::vector<kernels::SamplePoint> polar_coords;  // u = bin, v = column
};
PolarInverse polar_inverse(const CameraModel& feature_cam, const PolarGrid& pgrid, const BevGrid& grid);

// h_p [H,W,C] -> h_polar [R,W_polar,C]
Tensor cart_to_polar(const Tensor& h_p, const CameraModel& feature_cam, const PolarGrid& pgrid,
                     const BevGrid& grid);
// Inverse resampling. Cells inside the camera's polar support take the
// bilinear polar value; all other cells keep `base`.
Tensor polar_to_cart(const Tensor& h_polar, const Tensor& base, const CameraModel& feature_cam,
                     const PolarGrid& pgrid, const BevGrid& grid);

// Same transforms with the sampling pattern precomputed.
Tensor cart_to_polar(const Tensor& h_p, std::span<const kernels::SamplePoint> samples, const PolarGrid& pgrid,
                     const BevGrid& grid);
Tensor polar_to_cart(const Tensor& h_polar, const Tensor& base, const PolarInverse& inverse, const BevGrid& grid);

}  // namespace dipp::geometry
