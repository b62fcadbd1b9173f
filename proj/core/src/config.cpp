#include "radloc/config.hpp"

#include <string>

#include "radloc/error.hpp"
#include "radloc/io.hpp"

namespace radloc {

using json = nlohmann::json;

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::resolve() {
  synth.scene.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (synth.steps < 1) throw ConfigError("synth.steps must be >= 1");
  synth.scene.validate();
  synth.noise.validate();
  synth.radar.validate();
  train.validate();
  stage2_train().validate();
  icp.validate();
  if (!(coarse.limits.x > 0 && coarse.limits.y > 0 && coarse.limits.theta > 0))
    throw ConfigError("coarse.limits must be positive");
  if (coarse.samples < 1) throw ConfigError("coarse.samples must be >= 1");
}

TrainConfig RunConfig::stage2_train() const {
  TrainConfig t = train;
  t.epochs = stage2.epochs;
  t.steps_per_epoch = stage2.steps_per_epoch;
  t.batch_size = stage2.batch_size;
  t.learning_rate = stage2.learning_rate;
  return t;
}

json to_json(const IcpConfig& c) {
  return {{"threshold", c.threshold},
          {"trim_fraction", c.trim_fraction},
          {"max_iterations", c.max_iterations},
          {"tolerance", c.tolerance}};
}

IcpConfig icp_config_from_json(const json& j) {
  io::require_known_keys(j, {"threshold", "trim_fraction", "max_iterations", "tolerance"}, "icp");
  IcpConfig c;
  try {
    read_opt(j, "threshold", c.threshold);
    read_opt(j, "trim_fraction", c.trim_fraction);
    read_opt(j, "max_iterations", c.max_iterations);
    read_opt(j, "tolerance", c.tolerance);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("icp: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"synth",
       {{"scene", to_json(c.synth.scene)},
        {"noise", to_json(c.synth.noise)},
        {"radar", to_json(c.synth.radar)},
        {"motion", to_json(c.synth.motion)},
        {"steps", c.synth.steps}}},
      {"train", to_json(c.train)},
      {"stage2",
       {{"epochs", c.stage2.epochs},
        {"steps_per_epoch", c.stage2.steps_per_epoch},
        {"batch_size", c.stage2.batch_size},
        {"learning_rate", c.stage2.learning_rate}}},
      {"icp", to_json(c.icp)},
      {"coarse",
       {{"limit_x_m", c.coarse.limits.x},
        {"limit_y_m", c.coarse.limits.y},
        {"limit_theta_deg", rad2deg(c.coarse.limits.theta)},
        {"samples", c.coarse.samples}}},
  };
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  io::require_known_keys(j, {"seed", "threads", "synth", "train", "stage2", "icp", "coarse"}, "config");
  RunConfig c;
  try {
    read_opt(j, "seed", c.seed);
    read_opt(j, "threads", c.threads);
    if (j.contains("synth")) {
      const json& s = j.at("synth");
      io::require_known_keys(s, {"scene", "noise", "radar", "motion", "steps"}, "synth");
      if (s.contains("scene")) c.synth.scene = scene_spec_from_json(s.at("scene"));
      if (s.contains("noise")) c.synth.noise = noise_from_json(s.at("noise"));
      if (s.contains("radar")) c.synth.radar = radar_from_json(s.at("radar"));
      if (s.contains("motion")) c.synth.motion = motion_from_json(s.at("motion"));
      read_opt(s, "steps", c.synth.steps);
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("stage2")) {
      const json& s = j.at("stage2");
      io::require_known_keys(s, {"epochs", "steps_per_epoch", "batch_size", "learning_rate"}, "stage2");
      read_opt(s, "epochs", c.stage2.epochs);
      read_opt(s, "steps_per_epoch", c.stage2.steps_per_epoch);
      read_opt(s, "batch_size", c.stage2.batch_size);
      read_opt(s, "learning_rate", c.stage2.learning_rate);
    }
    if (j.contains("icp")) c.icp = icp_config_from_json(j.at("icp"));
    if (j.contains("coarse")) {
      const json& s = j.at("coarse");
      io::require_known_keys(s, {"limit_x_m", "limit_y_m", "limit_theta_deg", "samples"}, "coarse");
      read_opt(s, "limit_x_m", c.coarse.limits.x);
      read_opt(s, "limit_y_m", c.coarse.limits.y);
      if (s.contains("limit_theta_deg")) c.coarse.limits.theta = deg2rad(s.at("limit_theta_deg").get<double>());
      read_opt(s, "samples", c.coarse.samples);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const std::string text = io::read_text(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace radloc
