#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "radloc/config.hpp"

namespace radloc::tools {

/// Flags shared by every subcommand. Unset optionals keep the file value.
struct Common {
  std::filesystem::path config_file;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::filesystem::path out;
};

struct SynthArgs {
  std::optional<int> steps;
};

struct TrainArgs {
  std::vector<std::filesystem::path> data;
  std::filesystem::path checkpoint;  // stage 2 only
  std::optional<int> epochs;
  std::optional<int> steps_per_epoch;
  std::optional<int> batch_size;
  std::optional<double> learning_rate;
  std::string profile;
};

struct DataArgs {
  std::filesystem::path data;
  std::filesystem::path checkpoint;
  std::filesystem::path controls;
  std::vector<double> limits;  // coarse: x m, y m, theta deg
  std::optional<int> samples;
};

struct EvalArgs {
  std::filesystem::path traj;
  std::filesystem::path gt;
};

int cmd_synth(const Common& c, const SynthArgs& a);
int cmd_train1(const Common& c, const TrainArgs& a);
int cmd_train2(const Common& c, const TrainArgs& a);
int cmd_odom(const Common& c, const DataArgs& a);
int cmd_track(const Common& c, const DataArgs& a);
int cmd_coarse(const Common& c, const DataArgs& a);
int cmd_eval(const Common& c, const EvalArgs& a);

}  // namespace radloc::tools
