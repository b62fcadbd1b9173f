#include "radloc/odom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>
#include <Eigen/Eigenvalues>

#include "radloc/error.hpp"
#include "radloc/io.hpp"
#include "radloc/parallel.hpp"

namespace radloc {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

void IcpConfig::validate() const {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("icp threshold must lie in [0, 1]");
  if (!(trim_fraction > 0.0 && trim_fraction <= 1.0)) throw ConfigError("icp trim fraction must lie in (0, 1]");
  if (max_iterations < 1) throw ConfigError("icp needs at least one iteration");
  if (!(tolerance > 0.0)) throw ConfigError("icp tolerance must be positive");
}

PointSet2 extract_salient_points(const PolarScan& scan, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("salient-point threshold must lie in [0, 1]");
  PointSet2 out;
  for (int a = 0; a < scan.azimuths; ++a) {
    const double az = 2.0 * kPi * a / scan.azimuths;
    const double c = std::cos(az), s = std::sin(az);
    for (int b = 0; b < scan.range_bins; ++b) {
      const double v = scan.at(a, b);
      if (v > threshold) {
        const double r = b * scan.range_resolution;
        out.points.push_back({r * c, r * s});
        out.intensities.push_back(v);
      }
    }
  }
  return out;
}

namespace {

using BPoint = bg::model::point<double, 2, bg::cs::cartesian>;
using Entry = std::pair<BPoint, std::size_t>;

bool degenerate(const PointSet2& s) {
  if (s.size() < 3) return true;
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& p : s.points) mean += Eigen::Vector2d(p.x, p.y);
  mean /= static_cast<double>(s.size());
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& p : s.points) {
    const Eigen::Vector2d d = Eigen::Vector2d(p.x, p.y) - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(s.size());
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov, Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0) < 1e-9;
}

}  // namespace

IcpResult icp_align(const PointSet2& src, const PointSet2& dst, const Offset& init, const IcpConfig& cfg) {
  cfg.validate();
  IcpResult res;
  if (degenerate(src) || degenerate(dst)) return res;

  std::vector<Entry> entries;
  entries.reserve(dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i) entries.emplace_back(BPoint(dst.points[i].x, dst.points[i].y), i);
  const bgi::rtree<Entry, bgi::quadratic<16>> tree(entries.begin(), entries.end());

  // Current estimate as dst = R q + t.
  double th = init.dtheta;
  Eigen::Vector2d t = Eigen::Rotation2Dd(th) * Eigen::Vector2d(init.dx, init.dy);
  const std::size_t n = src.size();
  const std::size_t keep = std::max<std::size_t>(3, static_cast<std::size_t>(std::floor(cfg.trim_fraction * n)));
  std::vector<std::size_t> match(n), order(n);
  std::vector<double> d2(n);
  std::vector<Entry> hit;

  for (int it = 0; it < cfg.max_iterations; ++it) {
    const Eigen::Rotation2Dd rot(th);
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Vector2d q = rot * Eigen::Vector2d(src.points[i].x, src.points[i].y) + t;
      hit.clear();
      tree.query(bgi::nearest(BPoint(q.x(), q.y()), 1), std::back_inserter(hit));
      match[i] = hit.front().second;
      const Point2& p = dst.points[match[i]];
      d2[i] = (q.x() - p.x) * (q.x() - p.x) + (q.y() - p.y) * (q.y() - p.y);
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d2[a] < d2[b]; });

    Eigen::Vector2d qm = Eigen::Vector2d::Zero(), pm = Eigen::Vector2d::Zero();
    for (std::size_t r = 0; r < keep; ++r) {
      const std::size_t i = order[r];
      qm += Eigen::Vector2d(src.points[i].x, src.points[i].y);
      pm += Eigen::Vector2d(dst.points[match[i]].x, dst.points[match[i]].y);
    }
    qm /= static_cast<double>(keep);
    pm /= static_cast<double>(keep);
    double sxx = 0.0, sxy = 0.0, syx = 0.0, syy = 0.0;
    for (std::size_t r = 0; r < keep; ++r) {
      const std::size_t i = order[r];
      const double qx = src.points[i].x - qm.x(), qy = src.points[i].y - qm.y();
      const double px = dst.points[match[i]].x - pm.x(), py = dst.points[match[i]].y - pm.y();
      sxx += qx * px;
      sxy += qx * py;
      syx += qy * px;
      syy += qy * py;
    }
    const double new_th = std::atan2(sxy - syx, sxx + syy);
    const Eigen::Vector2d new_t = pm - Eigen::Rotation2Dd(new_th) * qm;
    const double dt = (new_t - t).norm(), dth = std::abs(wrap_angle(new_th - th));
    th = new_th;
    t = new_t;
    res.iterations = it + 1;
    if (dt < cfg.tolerance && dth < cfg.tolerance) {
      res.converged = true;
      break;
    }
  }

  // Residual of the final estimate over the trimmed matches.
  const Eigen::Rotation2Dd rot(th);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d q = rot * Eigen::Vector2d(src.points[i].x, src.points[i].y) + t;
    hit.clear();
    tree.query(bgi::nearest(BPoint(q.x(), q.y()), 1), std::back_inserter(hit));
    const Point2& p = dst.points[hit.front().second];
    d2[i] = (q.x() - p.x) * (q.x() - p.x) + (q.y() - p.y) * (q.y() - p.y);
  }
  std::sort(d2.begin(), d2.end());
  res.rmse = std::sqrt(std::accumulate(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(keep), 0.0) /
                       static_cast<double>(keep));
  const Eigen::Vector2d d = rot.inverse() * t;
  res.u = {d.x(), d.y(), wrap_angle(th)};
  return res;
}

std::vector<IcpResult> odometry_chain(std::span<const PolarScan> scans, const IcpConfig& cfg) {
  cfg.validate();
  if (scans.size() < 2) throw ConfigError("odometry needs at least two scans");
  std::vector<PointSet2> pts(scans.size());
  parallel_for(scans.size(), [&](std::size_t i) { pts[i] = extract_salient_points(scans[i], cfg.threshold); });
  std::vector<IcpResult> out(scans.size() - 1);
  if (thread_count() > 1) {
    parallel_for(out.size(), [&](std::size_t i) { out[i] = icp_align(pts[i + 1], pts[i], Offset{}, cfg); });
  } else {
    Offset warm;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = icp_align(pts[i + 1], pts[i], warm, cfg);
      warm = out[i].converged ? out[i].u : Offset{};
    }
  }
  return out;
}

void write_controls_csv(std::span<const IcpResult> controls, std::span<const double> timestamps,
                        const std::filesystem::path& path) {
  if (!timestamps.empty() && timestamps.size() != controls.size())
    throw ConfigError("controls CSV needs one timestamp per control");
  std::ostringstream os;
  os << "t,dx,dy,dtheta,converged,rmse\n";
  for (std::size_t i = 0; i < controls.size(); ++i) {
    const IcpResult& c = controls[i];
    const double t = timestamps.empty() ? static_cast<double>(i + 1) : timestamps[i];
    os << io::fmt_double(t) << ',' << io::fmt_double(c.u.dx) << ',' << io::fmt_double(c.u.dy) << ','
       << io::fmt_double(c.u.dtheta) << ',' << (c.converged ? 1 : 0) << ',' << io::fmt_double(c.rmse) << '\n';
  }
  io::write_text(path, os.str());
}

std::vector<ControlRow> read_controls_csv(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,dx,dy,dtheta", 0) != 0)
    throw IoError(path.string() + ": expected header t,dx,dy,dtheta,...");
  std::vector<ControlRow> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = io::split_csv(line);
    if (f.size() < 4) throw IoError(path.string() + ":" + std::to_string(lineno) + ": too few fields");
    try {
      ControlRow r;
      r.t = std::stod(f[0]);
      r.u = {std::stod(f[1]), std::stod(f[2]), std::stod(f[3])};
      if (f.size() > 4) r.converged = std::stoi(f[4]) != 0;
      if (f.size() > 5) r.rmse = std::stod(f[5]);
      out.push_back(r);
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

}  // namespace radloc
