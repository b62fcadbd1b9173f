#include "radloc/bev.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "radloc/error.hpp"
#include "radloc/io.hpp"
#include "radloc/parallel.hpp"

namespace radloc {

namespace {

struct Taps {
  int src[4];
  double w[4];
};

// Bilinear taps for a fractional (row, col) over a rows x cols raster.
Taps bilinear_taps(double u, double v, int rows, int cols) {
  Taps t{};
  const double fu0 = std::floor(u);
  const double fv0 = std::floor(v);
  const double fu = u - fu0;
  const double fv = v - fv0;
  const int r0 = static_cast<int>(fu0);
  const int c0 = static_cast<int>(fv0);
  const int rr[4] = {r0, r0, r0 + 1, r0 + 1};
  const int cc[4] = {c0, c0 + 1, c0, c0 + 1};
  const double ww[4] = {(1.0 - fu) * (1.0 - fv), (1.0 - fu) * fv, fu * (1.0 - fv), fu * fv};
  for (int i = 0; i < 4; ++i) {
    const bool ok = rr[i] >= 0 && rr[i] < rows && cc[i] >= 0 && cc[i] < cols && ww[i] != 0.0;
    t.src[i] = ok ? rr[i] * cols + cc[i] : -1;
    t.w[i] = ok ? ww[i] : 0.0;
  }
  return t;
}

// Warp geometry in pixel units: output pixel (i, j) of the displaced view reads
// the source at the robot-frame point R(dtheta) (q + d), q being (i, j) in the
// displaced frame and d the translation in pixels.
struct WarpGeometry {
  double c, s, dx, dy, half_r, half_c;

  WarpGeometry(const Offset& o, double resolution, int rows, int cols)
      : c(std::cos(o.dtheta)),
        s(std::sin(o.dtheta)),
        dx(o.dx / resolution),
        dy(o.dy / resolution),
        half_r(static_cast<double>(rows / 2)),
        half_c(static_cast<double>(cols / 2)) {}

  std::pair<double, double> source(int i, int j) const {
    const double qx = half_r - i + dx;
    const double qy = j - half_c + dy;
    const double ox = c * qx - s * qy;
    const double oy = s * qx + c * qy;
    return {half_r - ox, half_c + oy};
  }
};

void check_resolution(double r, const char* what) {
  if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError(std::string(what) + ": resolution must be positive");
}

void check_even(int rows, int cols, const char* what) {
  if (rows <= 0 || cols <= 0 || rows % 2 != 0 || cols % 2 != 0) {
    throw ConfigError(std::string(what) + ": raster size must be positive and even, got " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  }
}

}  // namespace

double Image::sample(double row, double col) const {
  const Taps t = bilinear_taps(row, col, rows, cols);
  double v = 0.0;
  for (int i = 0; i < 4; ++i)
    if (t.src[i] >= 0) v += t.w[i] * px[static_cast<std::size_t>(t.src[i])];
  return v;
}

std::pair<double, double> GridMap::to_cell(double wx, double wy) const {
  const double c = std::cos(theta), s = std::sin(theta);
  const double ex = wx - origin_x, ey = wy - origin_y;
  const double mx = c * ex + s * ey;
  const double my = -s * ex + c * ey;
  return {my / resolution, mx / resolution};
}

double GridMap::sample(double wx, double wy) const {
  const auto [a, b] = to_cell(wx, wy);
  return cells.sample(a, b);
}

bool GridMap::contains(double wx, double wy) const {
  const auto [a, b] = to_cell(wx, wy);
  return a >= -0.5 && b >= -0.5 && a <= cells.rows - 0.5 && b <= cells.cols - 0.5;
}

std::pair<double, double> pixel_to_robot(int row, int col, int rows, int cols, double resolution) {
  return {(rows / 2 - row) * resolution, (col - cols / 2) * resolution};
}

std::pair<double, double> robot_to_pixel(double x, double y, int rows, int cols, double resolution) {
  return {rows / 2 - x / resolution, cols / 2 + y / resolution};
}

BevImage rasterize_points(std::span<const WeightedPoint> world_points, double resolution, int rows, int cols,
                          const Pose2& center) {
  check_resolution(resolution, "rasterize_points");
  check_even(rows, cols, "rasterize_points");
  BevImage out{Image::zeros(rows, cols), resolution, center};
  std::vector<double> best(out.image.px.size(), -std::numeric_limits<double>::infinity());
  const double c = std::cos(center.theta), s = std::sin(center.theta);
  for (const WeightedPoint& p : world_points) {
    const double ex = p.x - center.x, ey = p.y - center.y;
    const double rx = c * ex + s * ey;
    const double ry = -s * ex + c * ey;
    const auto [u, v] = robot_to_pixel(rx, ry, rows, cols, resolution);
    const int i = static_cast<int>(std::floor(u + 0.5));
    const int j = static_cast<int>(std::floor(v + 0.5));
    if (!out.image.inside(i, j)) continue;
    double& b = best[static_cast<std::size_t>(i) * cols + j];
    b = std::max(b, p.weight);
  }
  for (std::size_t k = 0; k < best.size(); ++k)
    if (std::isfinite(best[k])) out.image.px[k] = std::clamp(best[k], 0.0, 1.0);
  return out;
}

BevImage polar_to_cartesian(const PolarScan& scan, double resolution, int rows, int cols) {
  check_resolution(resolution, "polar_to_cartesian");
  check_even(rows, cols, "polar_to_cartesian");
  if (scan.azimuths < 1 || scan.range_bins < 2) throw ConfigError("polar_to_cartesian: empty scan");
  BevImage out{Image::zeros(rows, cols), resolution, Pose2{}};
  const double az_step = 2.0 * kPi / scan.azimuths;
  const double max_bin = scan.range_bins - 1;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const auto [x, y] = pixel_to_robot(i, j, rows, cols, resolution);
      const double t = std::hypot(x, y) / scan.range_resolution;
      if (t > max_bin) continue;
      double phi = std::atan2(y, x);
      if (phi < 0) phi += 2.0 * kPi;
      int a = static_cast<int>(std::lround(phi / az_step)) % scan.azimuths;
      const int b0 = std::min(static_cast<int>(std::floor(t)), scan.range_bins - 2);
      const double f = t - b0;
      out.image.at(i, j) = (1.0 - f) * scan.at(a, b0) + f * scan.at(a, b0 + 1);
    }
  }
  return out;
}

BevImage crop_at(const GridMap& map, const Pose2& pose, int rows, int cols, double resolution) {
  check_resolution(resolution, "crop_at");
  check_even(rows, cols, "crop_at");
  const double ratio = resolution / map.resolution;
  const double r1 = std::round(ratio), r2 = std::round(1.0 / ratio);
  const bool ok = (r1 >= 1.0 && std::abs(ratio - r1) < 1e-9 * r1) || (r2 >= 1.0 && std::abs(1.0 / ratio - r2) < 1e-9 * r2);
  if (!ok) {
    throw ConfigError("crop_at: image resolution " + io::fmt_double(resolution) + " and map resolution " +
                      io::fmt_double(map.resolution) + " differ by a non-integer factor");
  }
  BevImage out{Image::zeros(rows, cols), resolution, pose};
  const double c = std::cos(pose.theta), s = std::sin(pose.theta);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const auto [x, y] = pixel_to_robot(i, j, rows, cols, resolution);
      out.image.at(i, j) = map.sample(pose.x + c * x - s * y, pose.y + s * x + c * y);
    }
  }
  return out;
}

ad::Tensor crop_at_var(const GridMap& map, const ad::Tensor& pose, int rows, int cols, double resolution) {
  if (pose.numel() != 3) throw ConfigError("crop_at_var: pose must have 3 elements");
  const Pose2 at{pose.at(0), pose.at(1), pose.at(2)};
  BevImage crop = crop_at(map, at, rows, cols, resolution);
  if (ad::kink_tracing()) {
    const double c = std::cos(at.theta), s = std::sin(at.theta);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        const auto [x, y] = pixel_to_robot(i, j, rows, cols, resolution);
        const auto [a, b] = map.to_cell(at.x + c * x - s * y, at.y + s * x + c * y);
        ad::record_branch(static_cast<std::int64_t>(std::floor(a)) * 1000003 + static_cast<std::int64_t>(std::floor(b)));
      }
  }
  ad::Node* pn = pose.node();
  const GridMap* mp = &map;  // callers keep the map alive through backward
  return ad::custom_op({1, 1, rows, cols}, std::move(crop.image.px), {pose},
                       [pn, mp, at, rows, cols, resolution](const ad::Node& o) {
    if (!pn->requires_grad) return;
    const GridMap& m = *mp;
    const Image& im = m.cells;
    const double c = std::cos(at.theta), s = std::sin(at.theta);
    const double cm = std::cos(m.theta), sm = std::sin(m.theta);
    auto cell = [&](int r, int k) { return im.inside(r, k) ? im.at(r, k) : 0.0; };
    double gx = 0.0, gy = 0.0, gt = 0.0;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        const double g = o.grad[static_cast<std::size_t>(i) * cols + j];
        if (g == 0.0) continue;
        const auto [x, y] = pixel_to_robot(i, j, rows, cols, resolution);
        const auto [a, b] = m.to_cell(at.x + c * x - s * y, at.y + s * x + c * y);
        const double fa = std::floor(a), fb = std::floor(b);
        const int r0 = static_cast<int>(fa), c0 = static_cast<int>(fb);
        const double u = a - fa, v = b - fb;
        const double m00 = cell(r0, c0), m01 = cell(r0, c0 + 1), m10 = cell(r0 + 1, c0), m11 = cell(r0 + 1, c0 + 1);
        const double da = (1.0 - v) * (m10 - m00) + v * (m11 - m01);
        const double db = (1.0 - u) * (m01 - m00) + u * (m11 - m10);
        // (a, b) = (-sm ex + cm ey, cm ex + sm ey) / res
        const double dwx = (-sm * da + cm * db) / m.resolution;
        const double dwy = (cm * da + sm * db) / m.resolution;
        gx += g * dwx;
        gy += g * dwy;
        gt += g * (dwx * (-s * x - c * y) + dwy * (c * x - s * y));
      }
    std::vector<double>& gp = pn->ensure_grad();
    gp[0] += gx;
    gp[1] += gy;
    gp[2] += gt;
  });
}

Image warp_by_offset(const Image& image, const Offset& offset, double resolution) {
  check_resolution(resolution, "warp_by_offset");
  const WarpGeometry g(offset, resolution, image.rows, image.cols);
  Image out = Image::zeros(image.rows, image.cols);
  for (int i = 0; i < image.rows; ++i) {
    for (int j = 0; j < image.cols; ++j) {
      const auto [u, v] = g.source(i, j);
      out.at(i, j) = image.sample(u, v);
    }
  }
  return out;
}

std::vector<Image> batch_warp(const Image& image, const OffsetGrid& grid, double resolution) {
  std::vector<Image> out(grid.size());
  parallel_for(grid.size(), [&](std::size_t m) { out[m] = warp_by_offset(image, grid[m], resolution); });
  return out;
}

std::shared_ptr<const ad::ResamplePlan> make_warp_plan(int rows, int cols, std::span<const Offset> offsets,
                                                       double resolution) {
  check_resolution(resolution, "make_warp_plan");
  auto plan = std::make_shared<ad::ResamplePlan>();
  plan->channels = static_cast<int>(offsets.size());
  plan->height = rows;
  plan->width = cols;
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  plan->src.resize(offsets.size() * plane * 4);
  plan->wts.resize(offsets.size() * plane * 4);
  parallel_for(offsets.size(), [&](std::size_t m) {
    const WarpGeometry g(offsets[m], resolution, rows, cols);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        const auto [u, v] = g.source(i, j);
        const Taps t = bilinear_taps(u, v, rows, cols);
        const std::size_t base = 4 * (m * plane + static_cast<std::size_t>(i) * cols + j);
        for (int k = 0; k < 4; ++k) {
          plan->src[base + k] = t.src[k];
          plan->wts[base + k] = t.w[k];
        }
      }
    }
  });
  return plan;
}

// ------------------------------------------------------------------ disk I/O

namespace {

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  std::filesystem::path p = stem;
  p += ext;
  return p;
}

template <class T>
T get_field(const io::json& j, const char* key, const std::filesystem::path& where) {
  if (!j.contains(key)) throw IoError(where.string() + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const io::json::exception& e) {
    throw IoError(where.string() + ": bad field '" + key + "': " + e.what());
  }
}

void write_raster(const Image& img, double res, double ox, double oy, double theta, const std::filesystem::path& stem) {
  io::write_f32(with_ext(stem, ".bin"), img.px);
  io::json j;
  j["height"] = img.rows;
  j["width"] = img.cols;
  j["resolution_m_per_px"] = res;
  j["origin_x"] = ox;
  j["origin_y"] = oy;
  j["theta"] = theta;
  io::write_json(with_ext(stem, ".json"), j);
}

struct RasterHeader {
  Image img;
  double res, ox, oy, theta;
};

RasterHeader read_raster(const std::filesystem::path& stem) {
  const auto side = with_ext(stem, ".json");
  const io::json j = io::read_json(side);
  RasterHeader h;
  h.img.rows = get_field<int>(j, "height", side);
  h.img.cols = get_field<int>(j, "width", side);
  h.res = get_field<double>(j, "resolution_m_per_px", side);
  h.ox = get_field<double>(j, "origin_x", side);
  h.oy = get_field<double>(j, "origin_y", side);
  h.theta = get_field<double>(j, "theta", side);
  if (h.img.rows <= 0 || h.img.cols <= 0 || !(h.res > 0.0)) throw IoError(side.string() + ": invalid raster header");
  h.img.px = io::read_f32(with_ext(stem, ".bin"), static_cast<std::size_t>(h.img.rows) * h.img.cols);
  return h;
}

}  // namespace

void save_grid_map(const GridMap& map, const std::filesystem::path& stem) {
  write_raster(map.cells, map.resolution, map.origin_x, map.origin_y, map.theta, stem);
}

GridMap load_grid_map(const std::filesystem::path& stem) {
  RasterHeader h = read_raster(stem);
  return GridMap{std::move(h.img), h.res, h.ox, h.oy, h.theta};
}

void save_bev(const BevImage& image, const std::filesystem::path& stem) {
  write_raster(image.image, image.resolution, image.center.x, image.center.y, image.center.theta, stem);
}

BevImage load_bev(const std::filesystem::path& stem) {
  RasterHeader h = read_raster(stem);
  return BevImage{std::move(h.img), h.res, Pose2{h.ox, h.oy, h.theta}};
}

void save_polar(const PolarScan& scan, const std::filesystem::path& stem) {
  io::write_f32(with_ext(stem, ".bin"), scan.intensity);
  io::json j;
  j["azimuths"] = scan.azimuths;
  j["range_bins"] = scan.range_bins;
  j["range_resolution_m"] = scan.range_resolution;
  io::write_json(with_ext(stem, ".json"), j);
}

PolarScan load_polar(const std::filesystem::path& stem) {
  const auto side = with_ext(stem, ".json");
  const io::json j = io::read_json(side);
  PolarScan s;
  s.azimuths = get_field<int>(j, "azimuths", side);
  s.range_bins = get_field<int>(j, "range_bins", side);
  s.range_resolution = get_field<double>(j, "range_resolution_m", side);
  if (s.azimuths <= 0 || s.range_bins <= 0 || !(s.range_resolution > 0.0))
    throw IoError(side.string() + ": invalid polar header");
  s.intensity = io::read_f32(with_ext(stem, ".bin"), static_cast<std::size_t>(s.azimuths) * s.range_bins);
  return s;
}

}  // namespace radloc
