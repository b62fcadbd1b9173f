#pragma once

// Radar odometry: salient-point extraction from polar scans and point-to-point
// ICP between consecutive scans.

#include <filesystem>
#include <span>
#include <vector>

#include "radloc/bev.hpp"
#include "radloc/se2.hpp"

namespace radloc {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct PointSet2 {
  std::vector<Point2> points;  // robot frame, meters
  std::vector<double> intensities;

  std::size_t size() const { return points.size(); }
};

struct IcpConfig {
  double threshold = 0.7;
  double trim_fraction = 0.8;
  int max_iterations = 50;
  double tolerance = 1e-4;  // meters, and radians for the rotation update

  void validate() const;
};

struct IcpResult {
  Offset u;  // dst = R(u.dtheta) (src + (u.dx, u.dy))
  bool converged = false;
  double rmse = 0.0;
  int iterations = 0;
};

/// Cells with intensity > threshold, azimuth-major order.
PointSet2 extract_salient_points(const PolarScan& scan, double threshold);

/// Aligns src onto dst. The returned u is the pose of the src frame in the dst
/// frame, i.e. pose_dst [+] u == pose_src. Fewer than 3 points or a collinear
/// set yields converged == false and the identity.
IcpResult icp_align(const PointSet2& src, const PointSet2& dst, const Offset& init, const IcpConfig& cfg);

/// result[t-1] aligns scan t onto scan t-1, so pose_t = pose_{t-1} [+] u.
/// Serial runs warm-start each pair with the previous estimate; with more
/// than one worker thread pairs run independently from the identity.
std::vector<IcpResult> odometry_chain(std::span<const PolarScan> scans, const IcpConfig& cfg);

/// CSV: t,dx,dy,dtheta,converged,rmse
void write_controls_csv(std::span<const IcpResult> controls, std::span<const double> timestamps,
                        const std::filesystem::path& path);
struct ControlRow {
  double t = 0.0;
  Offset u;
  bool converged = true;
  double rmse = 0.0;
};
std::vector<ControlRow> read_controls_csv(const std::filesystem::path& path);

}  // namespace radloc
