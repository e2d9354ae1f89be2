#include "dipp/geometry.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>

#include "dipp/error.hpp"
#include "dipp/ops.hpp"

namespace dipp::geometry {

void CameraModel::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera focal lengths must be positive");
  if (width == 0 || height == 0) throw ConfigError("camera image size must be positive");
  if (!rotation.allFinite() || !translation.allFinite() || !std::isfinite(cx) || !std::isfinite(cy)) {
    throw NumericError("camera parameters must be finite");
  }
  const double ortho = (rotation * rotation.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho > 1e-6 || std::abs(rotation.determinant() - 1.0) > 1e-6) {
    throw ConfigError("camera rotation is not a proper rotation");
  }
}

CameraModel CameraModel::create(const Eigen::Matrix3d& K, const Eigen::Matrix4d& E, std::size_t width,
                                std::size_t height) {
  CameraModel c;
  c.fx = K(0, 0);
  c.fy = K(1, 1);
  c.cx = K(0, 2);
  c.cy = K(1, 2);
  c.rotation = E.topLeftCorner<3, 3>();
  c.translation = E.topRightCorner<3, 1>();
  c.width = width;
  c.height = height;
  if (std::abs(K(0, 1)) > 1e-12 || std::abs(K(1, 0)) > 1e-12 || std::abs(K(2, 0)) > 1e-12 ||
      std::abs(K(2, 1)) > 1e-12 || std::abs(K(2, 2) - 1.0) > 1e-12) {
    throw ConfigError("intrinsics must be a skew-free pinhole matrix");
  }
  if ((E.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12) {
    throw ConfigError("extrinsics bottom row must be [0 0 0 1]");
  }
  c.validate();
  return c;
}

CameraModel CameraModel::looking(double yaw, const Eigen::Vector3d& position, double fx, double fy,
                                 double cx, double cy, std::size_t width, std::size_t height) {
  CameraModel c;
  c.fx = fx;
  c.fy = fy;
  c.cx = cx;
  c.cy = cy;
  c.width = width;
  c.height = height;
  const double s = std::sin(yaw), co = std::cos(yaw);
  c.rotation.row(0) = Eigen::RowVector3d(s, -co, 0);   // right
  c.rotation.row(1) = Eigen::RowVector3d(0, 0, -1);    // down
  c.rotation.row(2) = Eigen::RowVector3d(co, s, 0);    // forward
  c.translation = -c.rotation * position;
  c.validate();
  return c;
}

Eigen::Matrix3d CameraModel::K() const {
  Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
  k(0, 0) = fx;
  k(1, 1) = fy;
  k(0, 2) = cx;
  k(1, 2) = cy;
  return k;
}

Eigen::Matrix4d CameraModel::E() const {
  Eigen::Matrix4d e = Eigen::Matrix4d::Identity();
  e.topLeftCorner<3, 3>() = rotation;
  e.topRightCorner<3, 1>() = translation;
  return e;
}

CameraModel CameraModel::scaled(std::size_t stride) const {
  if (stride == 0) throw ConfigError("feature stride must be positive");
  CameraModel c = *this;
  const double s = static_cast<double>(stride);
  c.fx = fx / s;
  c.fy = fy / s;
  c.cx = (cx + 0.5) / s - 0.5;
  c.cy = (cy + 0.5) / s - 0.5;
  c.width = (width + stride - 1) / stride;
  c.height = (height + stride - 1) / stride;
  return c;
}

std::optional<PixelDepth> try_project(const Eigen::Vector3d& p_world, const CameraModel& cam) {
  const Eigen::Vector3d pc = cam.rotation * p_world + cam.translation;
  if (!(pc.z() > 0)) return std::nullopt;
  return PixelDepth{cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy, pc.z()};
}

PixelDepth project_point(const Eigen::Vector3d& p_world, const CameraModel& cam) {
  auto r = try_project(p_world, cam);
  if (!r) throw GeometryError(GeometryFault::BehindCamera, "point is behind the camera");
  return *r;
}

Eigen::Vector3d lift_pixel(double u, double v, double depth, const CameraModel& cam) {
  if (!(depth > 0) || !std::isfinite(depth)) {
    throw GeometryError(GeometryFault::InvalidDepth, "lift depth must be positive and finite");
  }
  const Eigen::Vector3d pc((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
  return cam.rotation.transpose() * (pc - cam.translation);
}

bool in_image(double u, double v, const CameraModel& cam) {
  return u >= -0.5 && v >= -0.5 && u < static_cast<double>(cam.width) - 0.5 &&
         v < static_cast<double>(cam.height) - 0.5;
}

void BevGrid::validate() const {
  if (!(x_max > x_min) || !(y_max > y_min)) throw ConfigError("BEV range must have max > min");
  if (H == 0 || W == 0) throw ConfigError("BEV grid needs at least one cell per axis");
}

Eigen::Vector2d BevGrid::cell_center(std::size_t i, std::size_t j) const {
  return {x_min + (static_cast<double>(j) + 0.5) * cell_x(), y_min + (static_cast<double>(i) + 0.5) * cell_y()};
}

BevCell bev_index(double x, double y, const BevGrid& grid) {
  BevCell c;
  c.valid = grid.contains(x, y);
  auto to_cell = [](double t, double lo, double hi, std::size_t n) {
    if (!std::isfinite(t)) return std::size_t{0};
    const double f = std::floor((t - lo) / (hi - lo) * static_cast<double>(n));
    if (f <= 0) return std::size_t{0};
    if (f >= static_cast<double>(n - 1)) return n - 1;
    return static_cast<std::size_t>(f);
  };
  c.i = to_cell(y, grid.y_min, grid.y_max, grid.H);
  c.j = to_cell(x, grid.x_min, grid.x_max, grid.W);
  return c;
}

DepthMap DepthMap::empty(std::size_t width, std::size_t height) {
  DepthMap d;
  d.width = width;
  d.height = height;
  d.depth.assign(width * height, 0.0);
  d.valid.assign(width * height, 0);
  return d;
}

std::size_t DepthMap::valid_count() const {
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }));
}

DepthMap complete_depth(const DepthMap& sparse, const CompletionOptions& options) {
  const std::size_t W = sparse.width, H = sparse.height;
  if (sparse.depth.size() != W * H || sparse.valid.size() != W * H) throw ShapeError("depth map buffers do not match its size");
  if (sparse.valid_count() == 0) throw GeometryError(GeometryFault::InvalidDepth, "depth map has no valid pixel");
  for (std::size_t p = 0; p < W * H; ++p) {
    if (sparse.valid[p] && !(std::isfinite(sparse.depth[p]) && sparse.depth[p] > 0)) {
      throw NumericError("valid depth entries must be finite and positive");
    }
  }
  DepthMap out = sparse;
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  const long limit = options.max_radius == 0 ? std::max(h, w) : static_cast<long>(options.max_radius);
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      if (sparse.valid[r * w + c]) continue;
      long best_d2 = std::numeric_limits<long>::max(), best_r = 0, best_c = 0;
      auto consider = [&](long rr, long cc) {
        if (rr < 0 || cc < 0 || rr >= h || cc >= w || !sparse.valid[rr * w + cc]) return;
        const long d2 = (rr - r) * (rr - r) + (cc - c) * (cc - c);
        if (d2 < best_d2 || (d2 == best_d2 && (rr < best_r || (rr == best_r && cc < best_c)))) {
          best_d2 = d2;
          best_r = rr;
          best_c = cc;
        }
      };
      // Every pixel on Chebyshev ring `ring` is at least `ring` away, so the
      // search can stop once ring^2 exceeds the best squared distance.
      for (long ring = 1; ring <= limit; ++ring) {
        if (ring * ring > best_d2) break;
        for (long dc = -ring; dc <= ring; ++dc) {
          consider(r - ring, c + dc);
          consider(r + ring, c + dc);
        }
        for (long dr = -ring + 1; dr <= ring - 1; ++dr) {
          consider(r + dr, c - ring);
          consider(r + dr, c + ring);
        }
      }
      if (best_d2 != std::numeric_limits<long>::max()) {
        out.depth[r * w + c] = sparse.depth[best_r * w + best_c];
      } else {
        if (!(options.fallback > 0)) throw GeometryError(GeometryFault::InvalidDepth, "no valid depth within the search radius");
        out.depth[r * w + c] = options.fallback;
      }
      out.valid[r * w + c] = 1;
    }
  }
  return out;
}

std::vector<BevTarget> map_c2p(std::size_t row, std::size_t col, std::size_t k, const DepthMap& dense,
                               const CameraModel& cam, const BevGrid& grid) {
  if (dense.width != cam.width || dense.height != cam.height) throw ShapeError("depth map does not match camera size");
  if (row >= dense.height || col >= dense.width) throw GeometryError(GeometryFault::OutOfImage, "pixel outside image");
  std::vector<BevTarget> out;
  const long K = static_cast<long>(k);
  out.reserve((2 * k + 1) * (2 * k + 1));
  for (long dr = -K; dr <= K; ++dr) {
    for (long dc = -K; dc <= K; ++dc) {
      const long r = static_cast<long>(row) + dr, c = static_cast<long>(col) + dc;
      BevTarget t;
      if (r >= 0 && c >= 0 && r < static_cast<long>(dense.height) && c < static_cast<long>(dense.width) &&
          dense.valid[r * dense.width + c]) {
        const Eigen::Vector3d p = lift_pixel(static_cast<double>(c), static_cast<double>(r),
                                             dense.depth[r * dense.width + c], cam);
        const BevCell cell = bev_index(p.x(), p.y(), grid);
        t.i = cell.i;
        t.j = cell.j;
        t.valid = cell.valid;
      }
      out.push_back(t);
    }
  }
  return out;
}

PillarIndex build_pillars(std::span<const double> points, std::size_t stride, const BevGrid& grid) {
  if (stride < 3 || points.size() % stride != 0) throw ShapeError("point buffer must hold rows of at least (x, y, z)");
  const std::size_t n = points.size() / stride;
  PillarIndex idx;
  idx.cell_of_point.assign(n, PillarIndex::npos);
  idx.offsets.assign(grid.cells() + 1, 0);
  for (std::size_t p = 0; p < n; ++p) {
    const BevCell c = bev_index(points[p * stride], points[p * stride + 1], grid);
    if (!c.valid) continue;
    idx.cell_of_point[p] = c.flat(grid);
    ++idx.offsets[c.flat(grid) + 1];
  }
  for (std::size_t c = 0; c < grid.cells(); ++c) idx.offsets[c + 1] += idx.offsets[c];
  idx.points.resize(idx.offsets.back());
  std::vector<std::size_t> fill(idx.offsets.begin(), idx.offsets.end() - 1);
  for (std::size_t p = 0; p < n; ++p) {
    if (idx.cell_of_point[p] != PillarIndex::npos) idx.points[fill[idx.cell_of_point[p]]++] = p;
  }
  return idx;
}

std::vector<ImageTarget> map_p2c(std::size_t cell, const PillarIndex& pillars, std::span<const double> points,
                                 std::size_t stride, std::span<const CameraModel> cams) {
  std::vector<ImageTarget> out;
  for (std::size_t p : pillars.in_cell(cell)) {
    const Eigen::Vector3d x(points[p * stride], points[p * stride + 1], points[p * stride + 2]);
    for (std::size_t c = 0; c < cams.size(); ++c) {
      const auto px = try_project(x, cams[c]);
      if (px && in_image(px->u, px->v, cams[c])) out.push_back({c, px->u, px->v});
    }
  }
  return out;
}

std::vector<ImageTarget> map_p2c(std::size_t i, std::size_t j, std::span<const double> points, std::size_t stride,
                                 std::span<const CameraModel> cams, const BevGrid& grid) {
  if (i >= grid.H || j >= grid.W) throw GeometryError(GeometryFault::OutOfRange, "BEV cell outside grid");
  return map_p2c(i * grid.W + j, build_pillars(points, stride, grid), points, stride, cams);
}

void PolarGrid::validate() const {
  if (R == 0 || W == 0) throw ConfigError("polar grid needs at least one bin per axis");
  if (!(r_max > 0)) throw ConfigError("polar grid radius must be positive");
}

PolarGrid polar_grid_for(const CameraModel& feature_cam, const BevGrid& grid, std::size_t R) {
  PolarGrid g;
  g.R = R;
  g.W = feature_cam.width;
  g.r_max = std::hypot(grid.x_max - grid.x_min, grid.y_max - grid.y_min);
  g.origin = feature_cam.origin().head<2>();
  g.validate();
  return g;
}

double azimuth_of_column(std::size_t i, const CameraModel& feature_cam) {
  if (i >= feature_cam.width) throw GeometryError(GeometryFault::OutOfImage, "feature column outside image");
  return std::atan((static_cast<double>(i) - feature_cam.cx) / feature_cam.fx);
}

Eigen::Vector2d column_direction(std::size_t i, const CameraModel& feature_cam) {
  const double theta = azimuth_of_column(i, feature_cam);
  const Eigen::Vector3d ray_cam(std::sin(theta), 0.0, std::cos(theta));
  const Eigen::Vector2d d = (feature_cam.rotation.transpose() * ray_cam).head<2>();
  const double n = d.norm();
  if (!(n > 1e-9)) throw GeometryError(GeometryFault::OutOfRange, "camera ray has no ground-plane direction");
  return d / n;
}

std::vector<kernels::SamplePoint> polar_sample_points(const CameraModel& feature_cam, const PolarGrid& pgrid,
                                                      const BevGrid& grid) {
  pgrid.validate();
  if (pgrid.W != feature_cam.width) throw ShapeError("polar width must equal the camera feature width");
  std::vector<kernels::SamplePoint> pts(pgrid.R * pgrid.W);
  for (std::size_t i = 0; i < pgrid.W; ++i) {
    const Eigen::Vector2d dir = column_direction(i, feature_cam);
    for (std::size_t b = 0; b < pgrid.R; ++b) {
      const Eigen::Vector2d p = pgrid.origin + pgrid.radius_of_bin(b) * dir;
      pts[b * pgrid.W + i] = {0, grid.row_coord(p.y()), grid.col_coord(p.x())};
    }
  }
  return pts;
}

PolarInverse polar_inverse(const CameraModel& feature_cam, const PolarGrid& pgrid, const BevGrid& grid) {
  pgrid.validate();
  if (pgrid.W != feature_cam.width) throw ShapeError("polar width must equal the camera feature width");
  PolarInverse inv;
  const double max_bin = static_cast<double>(pgrid.R - 1);
  const double max_col = static_cast<double>(pgrid.W - 1);
  for (std::size_t i = 0; i < grid.H; ++i) {
    for (std::size_t j = 0; j < grid.W; ++j) {
      const Eigen::Vector2d d = grid.cell_center(i, j) - pgrid.origin;
      const Eigen::Vector3d dc = feature_cam.rotation * Eigen::Vector3d(d.x(), d.y(), 0.0);
      if (!(dc.z() > 0)) continue;
      const double col = feature_cam.fx * dc.x() / dc.z() + feature_cam.cx;
      const double bin = d.norm() / pgrid.bin_size() - 0.5;
      if (col < 0 || col > max_col || bin < 0 || bin > max_bin) continue;
      inv.cells.push_back(i * grid.W + j);
      inv.polar_coords.push_back({0, bin, col});
    }
  }
  return inv;
}

Tensor cart_to_polar(const Tensor& h_p, std::span<const kernels::SamplePoint> samples, const PolarGrid& pgrid,
                     const BevGrid& grid) {
  if (h_p.rank() != 3 || h_p.dim(0) != grid.H || h_p.dim(1) != grid.W) throw ShapeError("BEV map must be [H, W, C]");
  if (samples.size() != pgrid.R * pgrid.W) throw ShapeError("polar sample count must be R * W");
  const std::size_t C = h_p.dim(2);
  const Tensor s = ops::sample_points(ops::reshape(h_p, {1, grid.H, grid.W, C}), samples);
  return ops::reshape(s, {pgrid.R, pgrid.W, C});
}

Tensor cart_to_polar(const Tensor& h_p, const CameraModel& feature_cam, const PolarGrid& pgrid, const BevGrid& grid) {
  return cart_to_polar(h_p, polar_sample_points(feature_cam, pgrid, grid), pgrid, grid);
}

Tensor polar_to_cart(const Tensor& h_polar, const Tensor& base, const PolarInverse& inv, const BevGrid& grid) {
  if (h_polar.rank() != 3) throw ShapeError("polar map must be [R, W, C]");
  if (base.rank() != 3 || base.dim(0) != grid.H || base.dim(1) != grid.W || base.dim(2) != h_polar.dim(2)) {
    throw ShapeError("base BEV map must be [H, W, C] matching the polar channels");
  }
  const std::size_t C = h_polar.dim(2);
  if (inv.cells.empty()) return base;
  std::vector<double> keep(grid.cells(), 1.0);
  for (std::size_t c : inv.cells) keep[c] = 0.0;
  const Tensor sampled =
      ops::sample_points(ops::reshape(h_polar, {1, h_polar.dim(0), h_polar.dim(1), C}), inv.polar_coords);
  const Tensor flat = ops::reshape(base, {grid.cells(), C});
  const Tensor merged = ops::add(ops::scale_rows(flat, keep), ops::scatter_rows(sampled, inv.cells, grid.cells()));
  return ops::reshape(merged, {grid.H, grid.W, C});
}

Tensor polar_to_cart(const Tensor& h_polar, const Tensor& base, const CameraModel& feature_cam,
                     const PolarGrid& pgrid, const BevGrid& grid) {
  if (h_polar.rank() != 3 || h_polar.dim(0) != pgrid.R || h_polar.dim(1) != pgrid.W) {
    throw ShapeError("polar map must be [R, W, C]");
  }
  return polar_to_cart(h_polar, base, polar_inverse(feature_cam, pgrid, grid), grid);
}

}  // namespace dipp::geometry
