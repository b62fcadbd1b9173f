#pragma once

// Kalman filter over SE(2) poses: odometry prediction, map-measurement update
// and sequence tracking. The tensor variants keep the whole recursion
// differentiable with respect to the measurement-model parameters.

#include <filesystem>
#include <span>
#include <vector>

#include "radloc/autodiff.hpp"
#include "radloc/bev.hpp"
#include "radloc/measnet.hpp"
#include "radloc/se2.hpp"

namespace radloc {

struct FilterState {
  Pose2 pose;
  Covariance3 cov = Covariance3::Identity();
  double t = 0.0;
};

struct NoiseConfig {
  Covariance3 sigma_m = Covariance3::Identity();      // odometry noise per step
  Covariance3 initial_cov = Covariance3::Identity();

  /// Throws ConfigError unless both are PSD with positive diagonals.
  void validate() const;
  /// 0.2 m / 0.5 deg per step; initial spread of a +-3 m / +-3 deg uniform.
  static NoiseConfig tracking_default();
};

FilterState predict(const FilterState& state, const Offset& u, const NoiseConfig& noise);
/// Additive correction with H = I; throws NumericalError when the innovation
/// covariance is singular.
FilterState update(const FilterState& pred, const Measurement& meas);

// ----------------------------------------------------------- tensor variant

struct StateVar {
  ad::Tensor pose;  // [3]: x, y, theta
  ad::Tensor cov;   // [3, 3]
};

StateVar make_state(const FilterState& s);
FilterState to_state(const StateVar& s, double t);
ad::Tensor boxplus(const ad::Tensor& pose, const ad::Tensor& dx, const ad::Tensor& dy, const ad::Tensor& dtheta);

/// Controls are constants; gradients flow through the previous state.
StateVar predict_var(const StateVar& s, const Offset& u, const Covariance3& sigma_m);
StateVar update_var(const StateVar& pred, const ad::Tensor& z, const ad::Tensor& sigma_o);

struct MeasurementVar {
  ad::Tensor z;        // [3]
  ad::Tensor sigma_o;  // [3, 3]
  ad::Tensor volume;   // [1, n]
  Offset offset;
};

/// measure() with gradients to the parameters and to the predicted pose. The
/// crop location itself is taken from the pose values (not differentiated).
MeasurementVar measure_var(const ModelParams& p, const BevImage& radar, const GridMap& map, const StateVar& pred,
                           const MeasurementSetup& setup, ForwardMode mode);

struct TrajectoryStep {
  double t = 0.0;
  FilterState predicted;
  FilterState estimate;
  bool measured = false;  // false for the initial row and dead-reckoning steps
  Pose2 z;
  Covariance3 sigma_o = Covariance3::Zero();
  CostVolume volume;
};

/// steps[0] holds the initial state.
struct Trajectory {
  std::vector<TrajectoryStep> steps;
};

/// Differentiable unroll; poses/covs exclude the initial state.
struct Unroll {
  std::vector<ad::Tensor> poses;
  std::vector<ad::Tensor> covs;
  std::vector<bool> measured;
  Trajectory trajectory;
};

Unroll track_unroll(const ModelParams& p, const FilterState& init, std::span<const Offset> controls,
                    std::span<const BevImage> scans, const GridMap& map, const MeasurementSetup& setup,
                    const NoiseConfig& noise, ForwardMode mode, std::span<const double> timestamps = {});

/// Inference-only tracking. timestamps (optional) has one entry per scan.
Trajectory track_sequence(const ModelParams& p, const FilterState& init, std::span<const Offset> controls,
                          std::span<const BevImage> scans, const GridMap& map, const MeasurementSetup& setup,
                          const NoiseConfig& noise, std::span<const double> timestamps = {});

/// Odometry-only propagation of init through controls.
Trajectory dead_reckon(const FilterState& init, std::span<const Offset> controls, const NoiseConfig& noise,
                       std::span<const double> timestamps = {});

/// CSV: t,x,y,theta,cov00..cov22,pred_x,pred_y,pred_theta,z_x,z_y,z_theta
/// (z fields are nan on steps without a measurement).
void write_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path);

struct StampedPose {
  double t = 0.0;
  Pose2 pose;
};

/// Reads the leading t,x,y,theta columns of a trajectory or poses CSV.
std::vector<StampedPose> read_pose_csv(const std::filesystem::path& path);
std::vector<StampedPose> trajectory_poses(const Trajectory& traj);

}  // namespace radloc
