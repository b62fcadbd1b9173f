#pragma once

#include <array>
#include <cstddef>
#include <numbers>
#include <vector>

#include <Eigen/Core>

namespace radloc {

inline constexpr double kPi = std::numbers::pi;

inline constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Normalizes an angle to (-pi, pi].
double wrap_angle(double a);

/// World-frame SE(2) pose. theta is kept in (-pi, pi] by every operation here.
struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
};

/// Robot-frame pose offset: rotate by dtheta first, then translate by (dx, dy)
/// in the rotated frame.
struct Offset {
  double dx = 0.0;
  double dy = 0.0;
  double dtheta = 0.0;

  Offset operator-() const { return {-dx, -dy, -dtheta}; }
};

using Covariance3 = Eigen::Matrix3d;

/// Applies a robot-frame offset to a pose:
///   x' = x + cos(theta + dtheta) dx - sin(theta + dtheta) dy
///   y' = y + sin(theta + dtheta) dx + cos(theta + dtheta) dy
///   theta' = theta + dtheta
Pose2 boxplus(const Pose2& pose, const Offset& offset);

/// Inverse of boxplus: the offset o with boxplus(pose_a, o) == pose_b.
Offset boxminus(const Pose2& pose_b, const Pose2& pose_a);

/// Offset composition: boxplus(boxplus(p, a), b) == boxplus(p, compose(a, b)).
Offset compose(const Offset& a, const Offset& b);

/// Jacobian of boxplus with respect to the pose, at (pose, u).
Eigen::Matrix3d motion_jacobian(const Pose2& pose, const Offset& u);

/// True when cov is symmetric (to tol) and all eigenvalues are >= -1e-9.
bool is_valid_covariance(const Covariance3& cov, double sym_tol = 1e-9);

/// (cov + cov^T) / 2
Covariance3 symmetrized(const Covariance3& cov);

struct GridLimits {
  double x = 0.0;      // meters
  double y = 0.0;      // meters
  double theta = 0.0;  // radians
};

struct GridResolution {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
};

enum class Axis : int { kX = 0, kY = 1, kTheta = 2 };

/// Discretized offset solution space. Candidates are enumerated row-major in
/// (i, j, k) = (x bin, y bin, theta bin).
class OffsetGrid {
 public:
  /// Throws ConfigError unless every limit is a positive integer multiple of
  /// its resolution.
  static OffsetGrid build(const GridLimits& limits, const GridResolution& resolution);

  const GridLimits& limits() const { return limits_; }
  const GridResolution& resolution() const { return resolution_; }
  std::array<int, 3> counts() const { return {nx_, ny_, nt_}; }
  int count(Axis a) const;
  std::size_t size() const { return candidates_.size(); }

  /// Bin centers along one axis, ascending, symmetric about zero.
  const std::vector<double>& axis_values(Axis a) const;
  const std::vector<Offset>& candidates() const { return candidates_; }
  const Offset& operator[](std::size_t m) const { return candidates_[m]; }

  std::size_t index(int i, int j, int k) const;
  std::size_t center_index() const { return index(nx_ / 2, ny_ / 2, nt_ / 2); }

  /// Nearest bin along an axis; exact midpoints resolve to the lower index.
  int nearest_bin(Axis a, double value) const;
  bool contains(const Offset& o, double tol = 1e-9) const;

 private:
  GridLimits limits_;
  GridResolution resolution_;
  int nx_ = 0, ny_ = 0, nt_ = 0;
  std::array<std::vector<double>, 3> axes_;
  std::vector<Offset> candidates_;
};

/// Per-axis one-hot classification targets.
struct OneHotTargets {
  std::vector<double> cx;
  std::vector<double> cy;
  std::vector<double> ctheta;
};

/// Throws RangeError when gt lies outside the grid limits.
OneHotTargets one_hot_targets(const OffsetGrid& grid, const Offset& gt);

}  // namespace radloc
