#pragma once

// Dataset ingestion, two-stage training and trajectory evaluation metrics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "radloc/bev.hpp"
#include "radloc/filter.hpp"
#include "radloc/losses.hpp"
#include "radloc/measnet.hpp"
#include "radloc/se2.hpp"

namespace radloc {

// ------------------------------------------------------------------ datasets

struct DatasetRecord {
  double t = 0.0;
  std::filesystem::path scan_stem;  // <stem>.bin + <stem>.json polar scan
  Pose2 gt;
  std::string split = "train";
};

/// One recorded sequence on one map, in the directory layout written by
/// write_dataset: map.{bin,json}, poses.csv, scans/NNNNNN.{bin,json} and an
/// optional splits.csv (index,split).
struct DatasetIndex {
  std::filesystem::path root;
  std::filesystem::path map_stem;
  std::vector<DatasetRecord> records;

  /// Throws IoError on missing files, ConfigError on non-increasing timestamps.
  static DatasetIndex load(const std::filesystem::path& dir);

  std::vector<std::size_t> indices_of(const std::string& split) const;
  GridMap load_map() const;
  PolarScan load_scan(std::size_t i) const;
  std::vector<Pose2> gt_poses() const;
  std::vector<double> timestamps() const;
};

/// A dataset held in memory: map plus Cartesian radar images.
struct LoadedSequence {
  std::string name;
  GridMap map;
  std::vector<BevImage> radar;  // rows x cols at the measurement resolution
  std::vector<PolarScan> polar;
  std::vector<Pose2> gt;
  std::vector<double> timestamps;
};

LoadedSequence load_sequence(const DatasetIndex& index, const MeasConfig& meas);
LoadedSequence make_sequence(std::string name, GridMap map, std::vector<PolarScan> scans, std::vector<Pose2> gt,
                             std::vector<double> timestamps, const MeasConfig& meas);

// ------------------------------------------------------------------ training

struct TrainConfig {
  MeasConfig meas;
  ArchProfile profile = ArchProfile::kTiny;
  LossWeights weights;
  int k_seq = 8;  // stage-2 window length
  double learning_rate = 0.003;
  double momentum = 0.9;
  double grad_clip = 10.0;  // global L2 norm; 0 disables
  int batch_size = 4;
  int epochs = 4;
  /// Optimizer steps per epoch; 0 means one pass over the training samples.
  int steps_per_epoch = 0;
  /// Offsets are drawn uniformly inside these limits (at most the grid limits).
  GridLimits perturbation{6.0, 6.0, deg2rad(6.0)};
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;
  NoiseConfig noise = NoiseConfig::tracking_default();  // stage-2 filter noise
  /// Directory for checkpoints and train_log.jsonl; empty disables output.
  std::filesystem::path out_dir;

  /// Throws ConfigError on any non-positive knob or limits outside the grid.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct PerturbedPose {
  Pose2 predicted;  // x-bar
  Offset target;    // predicted [+] target == gt
};

/// Uniform per-axis offset inside limits; predicted [+] target reproduces gt.
PerturbedPose sample_perturbations(const Pose2& gt, const GridLimits& limits, std::mt19937_64& rng);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::array<double, 3> val_abs_error{};  // mean |error| per axis, meters / meters / radians
};

struct TrainResult {
  ModelParams params;  // best on validation
  std::vector<EpochStats> epochs;
  int best_epoch = 0;  // 0: the initial parameters
};

/// Called after every optimizer step with the JSON log line.
using TrainObserver = std::function<void(const nlohmann::json&)>;

/// L1 + L2 on perturbed single samples. init supplies starting parameters;
/// otherwise they are initialized from cfg.seed.
TrainResult train_stage1(std::span<const LoadedSequence> data, const TrainConfig& cfg,
                         const ModelParams* init = nullptr, const TrainObserver& observer = {});

/// L3 through k_seq-step filter unrolls over the sequences, starting from
/// stage-1 parameters. Controls per sequence (one fewer than poses).
TrainResult train_stage2(const ModelParams& stage1, std::span<const LoadedSequence> data,
                         std::span<const std::vector<Offset>> controls, const TrainConfig& cfg,
                         const TrainObserver& observer = {});

struct OffsetEvaluation {
  std::array<double, 3> mean_abs_error{};  // meters, meters, radians
  double loss = 0.0;                        // mean L1 + L2
  std::size_t samples = 0;
};

/// Fixed perturbations (drawn from seed) for every listed sample, eval mode.
OffsetEvaluation evaluate_offsets(const ModelParams& p, std::span<const LoadedSequence> data,
                                  const TrainConfig& cfg, std::uint64_t seed, std::size_t max_samples = 0);

// ------------------------------------------------------------------- metrics

struct AbsoluteErrors {
  double rmse_trans = 0.0;    // m
  double rmse_rot = 0.0;      // deg
  double median_trans = 0.0;  // m
  double median_rot = 0.0;    // deg
};

/// Throws ConfigError on length or timestamp mismatch.
AbsoluteErrors absolute_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt);

struct DriftErrors {
  double drift_trans = 0.0;  // percent
  double drift_rot = 0.0;    // deg / m
  bool partial = false;      // some standard lengths exceeded the travelled distance
  std::vector<double> lengths_used;
};

/// Sub-sequences of 100..800 m. Throws RangeError when gt travels less than
/// the shortest length.
DriftErrors kitti_relative_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt);

struct DistanceBin {
  double distance = 0.0;  // m
  double trans = 0.0;     // percent of distance
  double rot = 0.0;       // deg
  std::size_t count = 0;
};

std::vector<DistanceBin> relative_pose_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt,
                                              std::span<const double> distances);

nlohmann::json metrics_json(std::span<const StampedPose> traj, std::span<const StampedPose> gt);

}  // namespace radloc
