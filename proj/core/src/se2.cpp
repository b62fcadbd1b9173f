#include "radloc/se2.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "radloc/error.hpp"

namespace radloc {

double wrap_angle(double a) {
  if (a > -kPi && a <= kPi) return a;
  double w = std::atan2(std::sin(a), std::cos(a));
  if (w <= -kPi) w = kPi;
  return w;
}

Pose2 boxplus(const Pose2& pose, const Offset& offset) {
  const double heading = pose.theta + offset.dtheta;
  const double c = std::cos(heading);
  const double s = std::sin(heading);
  return {pose.x + c * offset.dx - s * offset.dy, pose.y + s * offset.dx + c * offset.dy,
          wrap_angle(heading)};
}

Offset boxminus(const Pose2& pose_b, const Pose2& pose_a) {
  const double dtheta = wrap_angle(pose_b.theta - pose_a.theta);
  const double c = std::cos(pose_b.theta);
  const double s = std::sin(pose_b.theta);
  const double ex = pose_b.x - pose_a.x;
  const double ey = pose_b.y - pose_a.y;
  return {c * ex + s * ey, -s * ex + c * ey, dtheta};
}

Offset compose(const Offset& a, const Offset& b) {
  const double c = std::cos(b.dtheta);
  const double s = std::sin(b.dtheta);
  return {c * a.dx + s * a.dy + b.dx, -s * a.dx + c * a.dy + b.dy, wrap_angle(a.dtheta + b.dtheta)};
}

Eigen::Matrix3d motion_jacobian(const Pose2& pose, const Offset& u) {
  const double heading = pose.theta + u.dtheta;
  const double c = std::cos(heading);
  const double s = std::sin(heading);
  Eigen::Matrix3d f = Eigen::Matrix3d::Identity();
  f(0, 2) = -s * u.dx - c * u.dy;
  f(1, 2) = c * u.dx - s * u.dy;
  return f;
}

bool is_valid_covariance(const Covariance3& cov, double sym_tol) {
  if (!cov.allFinite()) return false;
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > sym_tol * std::max(1.0, cov.cwiseAbs().maxCoeff()))
    return false;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(symmetrized(cov), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() >= -1e-9;
}

Covariance3 symmetrized(const Covariance3& cov) { return 0.5 * (cov + cov.transpose()); }

namespace {

int axis_count(double limit, double res, const char* name) {
  if (!(limit > 0.0) || !(res > 0.0) || !std::isfinite(limit) || !std::isfinite(res)) {
    std::ostringstream os;
    os << "grid axis " << name << ": limit and resolution must be positive (got " << limit << ", " << res << ")";
    throw ConfigError(os.str());
  }
  const double ratio = limit / res;
  const double rounded = std::round(ratio);
  if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-9 * std::max(1.0, ratio)) {
    std::ostringstream os;
    os << "grid axis " << name << ": limit " << limit << " is not an integer multiple of resolution " << res;
    throw ConfigError(os.str());
  }
  return 2 * static_cast<int>(rounded) + 1;
}

std::vector<double> axis_bins(int n, double res) {
  std::vector<double> v(static_cast<std::size_t>(n));
  const int half = n / 2;
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = (i - half) * res;
  return v;
}

}  // namespace

OffsetGrid OffsetGrid::build(const GridLimits& limits, const GridResolution& resolution) {
  OffsetGrid g;
  g.limits_ = limits;
  g.resolution_ = resolution;
  g.nx_ = axis_count(limits.x, resolution.x, "x");
  g.ny_ = axis_count(limits.y, resolution.y, "y");
  g.nt_ = axis_count(limits.theta, resolution.theta, "theta");
  g.axes_[0] = axis_bins(g.nx_, resolution.x);
  g.axes_[1] = axis_bins(g.ny_, resolution.y);
  g.axes_[2] = axis_bins(g.nt_, resolution.theta);
  g.candidates_.reserve(static_cast<std::size_t>(g.nx_) * g.ny_ * g.nt_);
  for (double dx : g.axes_[0])
    for (double dy : g.axes_[1])
      for (double dt : g.axes_[2]) g.candidates_.push_back({dx, dy, dt});
  return g;
}

int OffsetGrid::count(Axis a) const {
  switch (a) {
    case Axis::kX: return nx_;
    case Axis::kY: return ny_;
    case Axis::kTheta: return nt_;
  }
  return 0;
}

const std::vector<double>& OffsetGrid::axis_values(Axis a) const { return axes_[static_cast<int>(a)]; }

std::size_t OffsetGrid::index(int i, int j, int k) const {
  return (static_cast<std::size_t>(i) * ny_ + static_cast<std::size_t>(j)) * nt_ + static_cast<std::size_t>(k);
}

int OffsetGrid::nearest_bin(Axis a, double value) const {
  const int ai = static_cast<int>(a);
  const double res = ai == 0 ? resolution_.x : ai == 1 ? resolution_.y : resolution_.theta;
  const double lim = ai == 0 ? limits_.x : ai == 1 ? limits_.y : limits_.theta;
  const int n = count(a);
  const int idx = static_cast<int>(std::ceil((value + lim) / res - 0.5));
  return std::clamp(idx, 0, n - 1);
}

bool OffsetGrid::contains(const Offset& o, double tol) const {
  return std::abs(o.dx) <= limits_.x + tol && std::abs(o.dy) <= limits_.y + tol &&
         std::abs(o.dtheta) <= limits_.theta + tol;
}

OneHotTargets one_hot_targets(const OffsetGrid& grid, const Offset& gt) {
  if (!grid.contains(gt)) {
    std::ostringstream os;
    os << "ground-truth offset (" << gt.dx << ", " << gt.dy << ", " << gt.dtheta << ") outside grid limits";
    throw RangeError(os.str());
  }
  OneHotTargets t;
  t.cx.assign(static_cast<std::size_t>(grid.count(Axis::kX)), 0.0);
  t.cy.assign(static_cast<std::size_t>(grid.count(Axis::kY)), 0.0);
  t.ctheta.assign(static_cast<std::size_t>(grid.count(Axis::kTheta)), 0.0);
  t.cx[static_cast<std::size_t>(grid.nearest_bin(Axis::kX, gt.dx))] = 1.0;
  t.cy[static_cast<std::size_t>(grid.nearest_bin(Axis::kY, gt.dy))] = 1.0;
  t.ctheta[static_cast<std::size_t>(grid.nearest_bin(Axis::kTheta, gt.dtheta))] = 1.0;
  return t;
}

}  // namespace radloc
