#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "radloc/autodiff.hpp"
#include "radloc/se2.hpp"

namespace radloc {

/// Dense row-major single-channel raster.
struct Image {
  int rows = 0;
  int cols = 0;
  std::vector<double> px;

  static Image zeros(int rows, int cols) { return {rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0)}; }

  double& at(int r, int c) { return px[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return px[static_cast<std::size_t>(r) * cols + c]; }
  bool inside(int r, int c) const { return r >= 0 && r < rows && c >= 0 && c < cols; }
  /// Bilinear sample at fractional (row, col); taps outside the raster read 0.
  double sample(double row, double col) const;
};

/// Global occupancy map. Cell (row a, col b) has its center at
/// origin + R(theta) * (b * resolution, a * resolution) in world coordinates.
struct GridMap {
  Image cells;
  double resolution = 1.0;  // meters per cell
  double origin_x = 0.0;
  double origin_y = 0.0;
  double theta = 0.0;

  /// World point to fractional (row, col).
  std::pair<double, double> to_cell(double wx, double wy) const;
  double sample(double wx, double wy) const;
  bool contains(double wx, double wy) const;
};

/// Robot-centred bird's-eye raster. Pixel (rows/2, cols/2) is the center pose;
/// image rows run along robot -x (forward is up), columns along robot +y.
struct BevImage {
  Image image;
  double resolution = 1.0;
  Pose2 center;
};

/// Raw scanning-radar sweep: azimuths x range bins. Azimuth a points at
/// a * 2pi / azimuths counter-clockwise from robot +x; bin b is at range
/// b * range_resolution.
struct PolarScan {
  int azimuths = 0;
  int range_bins = 0;
  double range_resolution = 1.0;
  std::vector<double> intensity;

  double at(int a, int b) const { return intensity[static_cast<std::size_t>(a) * range_bins + b]; }
  double& at(int a, int b) { return intensity[static_cast<std::size_t>(a) * range_bins + b]; }
};

struct WeightedPoint {
  double x = 0.0;
  double y = 0.0;
  double weight = 1.0;
};

// Pixel <-> robot-frame conversions for a rows x cols raster at resolution.
std::pair<double, double> pixel_to_robot(int row, int col, int rows, int cols, double resolution);
std::pair<double, double> robot_to_pixel(double x, double y, int rows, int cols, double resolution);

BevImage rasterize_points(std::span<const WeightedPoint> world_points, double resolution, int rows, int cols,
                          const Pose2& center);

BevImage polar_to_cartesian(const PolarScan& scan, double resolution, int rows, int cols);

/// Window of the map centered at pose, rotated into the robot frame, bilinear.
/// Throws ConfigError unless resolution and map resolution differ by an
/// integer factor (either way).
BevImage crop_at(const GridMap& map, const Pose2& pose, int rows, int cols, double resolution);

/// crop_at with gradients to pose ([3]: x, y, theta) through the bilinear map
/// lookup. Returns [1, 1, rows, cols].
ad::Tensor crop_at_var(const GridMap& map, const ad::Tensor& pose, int rows, int cols, double resolution);

/// The field as observed from the pose displaced by offset. Bilinear inverse
/// sampling, zero outside.
Image warp_by_offset(const Image& image, const Offset& offset, double resolution);

/// warp_by_offset for every grid candidate, in grid enumeration order.
std::vector<Image> batch_warp(const Image& image, const OffsetGrid& grid, double resolution);

/// Precomputed bilinear taps for warping rows x cols fields by each offset; the
/// differentiable counterpart of batch_warp (see ad::resample).
std::shared_ptr<const ad::ResamplePlan> make_warp_plan(int rows, int cols, std::span<const Offset> offsets,
                                                       double resolution);

// -- on-disk formats: <stem>.bin (float32 little-endian, row-major) + <stem>.json

void save_grid_map(const GridMap& map, const std::filesystem::path& stem);
GridMap load_grid_map(const std::filesystem::path& stem);
void save_bev(const BevImage& image, const std::filesystem::path& stem);
BevImage load_bev(const std::filesystem::path& stem);
void save_polar(const PolarScan& scan, const std::filesystem::path& stem);
PolarScan load_polar(const std::filesystem::path& stem);

}  // namespace radloc
