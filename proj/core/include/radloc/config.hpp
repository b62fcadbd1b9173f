#pragma once

// One JSON document configuring every command. Unknown keys are rejected;
// missing keys keep their defaults. Each run directory stores the resolved
// document as config.json.

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "radloc/odom.hpp"
#include "radloc/pipeline.hpp"
#include "radloc/se2.hpp"
#include "radloc/synth.hpp"

namespace radloc {

struct SynthSection {
  SceneSpec scene;
  RadarNoiseModel noise;
  RadarConfig radar;
  MotionProfile motion;
  int steps = 200;
};

/// Stage-2 overrides on top of the train section.
struct Stage2Section {
  int epochs = 1;
  int steps_per_epoch = 24;
  int batch_size = 2;
  double learning_rate = 0.001;
};

struct CoarseSection {
  GridLimits limits{18.0, 18.0, deg2rad(18.0)};
  int samples = 100;  // planted-offset trials per dataset
};

struct RunConfig {
  /// Master seed. Scene, trajectory and training seeds derive from it and
  /// override the nested values.
  std::uint64_t seed = 1;
  int threads = 1;
  SynthSection synth;
  TrainConfig train;
  Stage2Section stage2;
  IcpConfig icp;
  CoarseSection coarse;

  /// Applies the master seed to the nested seeds.
  void resolve();
  /// Throws ConfigError.
  void validate() const;
  /// The stage-2 view of the train section.
  TrainConfig stage2_train() const;
};

nlohmann::json to_json(const RunConfig& c);
nlohmann::json to_json(const IcpConfig& c);
IcpConfig icp_config_from_json(const nlohmann::json& j);
/// Strict: unknown keys at any level throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
/// Throws IoError when unreadable, ConfigError when malformed.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace radloc
