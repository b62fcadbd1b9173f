#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <sstream>

#include "plot.hpp"
#include "radloc/error.hpp"
#include "radloc/filter.hpp"
#include "radloc/io.hpp"
#include "radloc/measnet.hpp"
#include "radloc/odom.hpp"
#include "radloc/parallel.hpp"
#include "radloc/pipeline.hpp"
#include "radloc/synth.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace radloc::tools {

namespace {

fs::path run_root() {
  const char* env = std::getenv("RADLOC_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

/// Relative --out paths land under RADLOC_RUN_ROOT when it is set.
fs::path run_dir(const Common& c, const std::string& fallback) {
  if (c.out.empty()) return run_root() / fallback;
  if (c.out.is_absolute() || !std::getenv("RADLOC_RUN_ROOT")) return c.out;
  return run_root() / c.out;
}

/// file < environment < flags
RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_file.empty() ? RunConfig{} : load_run_config(c.config_file);
  if (const char* env = std::getenv("RADLOC_THREADS"); env && *env) {
    try {
      cfg.threads = std::stoi(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("RADLOC_THREADS is not an integer: ") + env);
    }
  }
  if (c.threads) cfg.threads = *c.threads;
  if (c.seed) cfg.seed = *c.seed;
  cfg.resolve();
  cfg.validate();
  set_thread_count(cfg.threads);
  return cfg;
}

void prepare(const fs::path& dir, const RunConfig& cfg, const json& inputs) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  io::write_json(dir / "config.json", to_json(cfg));
  if (!inputs.is_null()) io::write_json(dir / "inputs.json", inputs);
}

std::string str(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

void summary(const json& j) {
  std::printf("%s\n", j.dump().c_str());
  std::fflush(stdout);
}

std::vector<Offset> controls_for(const LoadedSequence& s, const fs::path& csv, const IcpConfig& icp) {
  std::vector<Offset> u;
  if (!csv.empty()) {
    for (const ControlRow& r : read_controls_csv(csv)) u.push_back(r.u);
  } else {
    for (const IcpResult& r : odometry_chain(s.polar, icp)) u.push_back(r.u);
  }
  if (u.size() + 1 != s.gt.size())
    throw ConfigError("expected " + std::to_string(s.gt.size() - 1) + " controls, got " + std::to_string(u.size()));
  return u;
}

std::vector<StampedPose> stamped(const LoadedSequence& s) {
  std::vector<StampedPose> out;
  for (std::size_t i = 0; i < s.gt.size(); ++i) out.push_back({s.timestamps[i], s.gt[i]});
  return out;
}

LoadedCheckpoint checkpoint_or_throw(const fs::path& p) {
  if (p.empty()) throw ConfigError("--checkpoint is required");
  return load_checkpoint(p);
}

void apply_train_flags(TrainConfig& t, const TrainArgs& a) {
  if (a.epochs) t.epochs = *a.epochs;
  if (a.steps_per_epoch) t.steps_per_epoch = *a.steps_per_epoch;
  if (a.batch_size) t.batch_size = *a.batch_size;
  if (a.learning_rate) t.learning_rate = *a.learning_rate;
  if (!a.profile.empty()) t.profile = parse_profile(a.profile);
}

json path_list(const std::vector<fs::path>& v) {
  json j = json::array();
  for (const fs::path& p : v) j.push_back(str(p));
  return j;
}

}  // namespace

int cmd_synth(const Common& c, const SynthArgs& a) {
  RunConfig cfg = resolve_config(c);
  if (a.steps) cfg.synth.steps = *a.steps;
  cfg.validate();
  const fs::path dir = run_dir(c, "synth-" + std::to_string(cfg.seed));
  prepare(dir, cfg, json());
  const Scene scene = generate_scene(cfg.synth.scene);
  const std::uint64_t run_seed = derive_seed(cfg.seed, 1);
  const SimulatedRun run =
      simulate_trajectory(scene, cfg.synth.steps, cfg.synth.motion, cfg.synth.noise, cfg.synth.radar, run_seed);
  write_dataset(dir, scene, run, cfg.synth.noise, cfg.synth.radar, cfg.synth.motion, cfg.synth.steps, run_seed);
  summary({{"command", "synth"}, {"dataset", str(dir)}, {"poses", run.poses.size()}});
  return 0;
}

int cmd_train1(const Common& c, const TrainArgs& a) {
  RunConfig cfg = resolve_config(c);
  apply_train_flags(cfg.train, a);
  cfg.validate();
  if (a.data.empty()) throw ConfigError("--data needs at least one dataset directory");
  const fs::path dir = run_dir(c, "train1-" + std::to_string(cfg.seed));
  prepare(dir, cfg, {{"command", "train1"}, {"data", path_list(a.data)}});
  std::vector<LoadedSequence> seqs;
  for (const fs::path& d : a.data) seqs.push_back(load_sequence(DatasetIndex::load(d), cfg.train.meas));
  TrainConfig t = cfg.train;
  t.out_dir = dir;
  const TrainResult r = train_stage1(seqs, t);
  json epochs = json::array();
  for (const EpochStats& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"val_loss", e.val_loss}, {"val_err_x_m", e.val_abs_error[0]},
                      {"val_err_y_m", e.val_abs_error[1]}, {"val_err_theta_deg", rad2deg(e.val_abs_error[2])}});
  summary({{"command", "train1"}, {"checkpoint", str(dir / "best")}, {"best_epoch", r.best_epoch}, {"epochs", epochs}});
  return 0;
}

int cmd_train2(const Common& c, const TrainArgs& a) {
  RunConfig cfg = resolve_config(c);
  if (a.epochs) cfg.stage2.epochs = *a.epochs;
  if (a.steps_per_epoch) cfg.stage2.steps_per_epoch = *a.steps_per_epoch;
  if (a.batch_size) cfg.stage2.batch_size = *a.batch_size;
  if (a.learning_rate) cfg.stage2.learning_rate = *a.learning_rate;
  const LoadedCheckpoint ck = checkpoint_or_throw(a.checkpoint);
  cfg.train.meas = ck.config;
  cfg.train.profile = ck.params.arch().profile;
  cfg.validate();
  if (a.data.empty()) throw ConfigError("--data needs at least one dataset directory");
  const fs::path dir = run_dir(c, "train2-" + std::to_string(cfg.seed));
  prepare(dir, cfg, {{"command", "train2"}, {"checkpoint", str(a.checkpoint)}, {"data", path_list(a.data)}});
  std::vector<LoadedSequence> seqs;
  std::vector<std::vector<Offset>> controls;
  for (const fs::path& d : a.data) {
    seqs.push_back(load_sequence(DatasetIndex::load(d), cfg.train.meas));
    controls.push_back(controls_for(seqs.back(), {}, cfg.icp));
  }
  TrainConfig t = cfg.stage2_train();
  t.out_dir = dir;
  const TrainResult r = train_stage2(ck.params, seqs, controls, t);
  summary({{"command", "train2"}, {"checkpoint", str(dir / "best")}, {"best_epoch", r.best_epoch}});
  return 0;
}

int cmd_odom(const Common& c, const DataArgs& a) {
  const RunConfig cfg = resolve_config(c);
  if (a.data.empty()) throw ConfigError("--data is required");
  const fs::path dir = run_dir(c, "odom-" + std::to_string(cfg.seed));
  prepare(dir, cfg, {{"command", "odom"}, {"data", str(a.data)}});
  const DatasetIndex idx = DatasetIndex::load(a.data);
  std::vector<PolarScan> scans;
  for (std::size_t i = 0; i < idx.records.size(); ++i) scans.push_back(idx.load_scan(i));
  const std::vector<IcpResult> u = odometry_chain(scans, cfg.icp);
  const std::vector<double> ts = idx.timestamps();
  write_controls_csv(u, std::span<const double>(ts.data() + 1, ts.size() - 1), dir / "controls.csv");
  std::vector<Offset> offs;
  std::size_t failed = 0;
  for (const IcpResult& r : u) {
    offs.push_back(r.u);
    if (!r.converged) ++failed;
  }
  const std::vector<Pose2> gt = idx.gt_poses();
  const FilterState init{gt.front(), cfg.train.noise.initial_cov, ts.front()};
  const Trajectory dr = dead_reckon(init, offs, cfg.train.noise, std::span<const double>(ts.data() + 1, ts.size() - 1));
  write_trajectory_csv(dr, dir / "odometry.csv");
  summary({{"command", "odom"}, {"controls", str(dir / "controls.csv")}, {"unconverged", failed}});
  return 0;
}

int cmd_track(const Common& c, const DataArgs& a) {
  RunConfig cfg = resolve_config(c);
  const LoadedCheckpoint ck = checkpoint_or_throw(a.checkpoint);
  cfg.train.meas = ck.config;
  if (a.data.empty()) throw ConfigError("--data is required");
  const fs::path dir = run_dir(c, "track-" + std::to_string(cfg.seed));
  prepare(dir, cfg, {{"command", "track"}, {"checkpoint", str(a.checkpoint)}, {"data", str(a.data)},
                     {"controls", a.controls.empty() ? json("icp") : json(str(a.controls))}});
  const LoadedSequence s = load_sequence(DatasetIndex::load(a.data), ck.config);
  const std::vector<Offset> u = controls_for(s, a.controls, cfg.icp);
  const MeasurementSetup setup(ck.config);
  const FilterState init{s.gt.front(), cfg.train.noise.initial_cov, s.timestamps.front()};
  const std::span<const BevImage> scans(s.radar.data() + 1, s.radar.size() - 1);
  const std::span<const double> ts(s.timestamps.data() + 1, s.timestamps.size() - 1);
  const Trajectory tr = track_sequence(ck.params, init, u, scans, s.map, setup, cfg.train.noise, ts);
  const Trajectory dr = dead_reckon(init, u, cfg.train.noise, ts);
  write_trajectory_csv(tr, dir / "trajectory.csv");
  write_trajectory_csv(dr, dir / "odometry.csv");
  const std::vector<StampedPose> gt = stamped(s);
  const json m = {{"tracking", metrics_json(trajectory_poses(tr), gt)},
                  {"odometry", metrics_json(trajectory_poses(dr), gt)}};
  io::write_json(dir / "metrics.json", m);
  summary({{"command", "track"}, {"trajectory", str(dir / "trajectory.csv")}, {"metrics", m}});
  return 0;
}

int cmd_coarse(const Common& c, const DataArgs& a) {
  RunConfig cfg = resolve_config(c);
  if (!a.limits.empty()) {
    if (a.limits.size() != 3) throw ConfigError("--limits takes x_m,y_m,theta_deg");
    cfg.coarse.limits = {a.limits[0], a.limits[1], deg2rad(a.limits[2])};
  }
  if (a.samples) cfg.coarse.samples = *a.samples;
  const LoadedCheckpoint ck = checkpoint_or_throw(a.checkpoint);
  cfg.train.meas = ck.config;
  cfg.validate();
  if (a.data.empty()) throw ConfigError("--data is required");
  const fs::path dir = run_dir(c, "coarse-" + std::to_string(cfg.seed));
  prepare(dir, cfg, {{"command", "coarse"}, {"checkpoint", str(a.checkpoint)}, {"data", str(a.data)}});
  const LoadedSequence s = load_sequence(DatasetIndex::load(a.data), ck.config);
  const MeasurementSetup setup(ck.config);
  const GridResolution& gr = ck.config.grid_resolution;
  std::mt19937_64 rng(derive_seed(cfg.seed, 8));
  std::uniform_int_distribution<std::size_t> pick(0, s.gt.size() - 1);
  std::ostringstream csv;
  csv << "index,t,planted_dx,planted_dy,planted_dtheta,est_dx,est_dy,est_dtheta,best_tile,within_grid_step\n";
  int ok = 0, done = 0, tries = 0;
  while (done < cfg.coarse.samples) {
    if (++tries > 100 * cfg.coarse.samples) throw RangeError("could not place samples inside the map");
    const std::size_t i = pick(rng);
    const PerturbedPose pp = sample_perturbations(s.gt[i], cfg.coarse.limits, rng);
    if (!s.map.contains(pp.predicted.x, pp.predicted.y)) continue;
    const CoarseResult r = coarse_localize(ck.params, s.radar[i], s.map, pp.predicted, cfg.coarse.limits, setup);
    const bool hit = std::abs(r.offset.dx - pp.target.dx) <= gr.x && std::abs(r.offset.dy - pp.target.dy) <= gr.y &&
                     std::abs(wrap_angle(r.offset.dtheta - pp.target.dtheta)) <= gr.theta;
    ok += hit;
    ++done;
    csv << i << ',' << io::fmt_double(s.timestamps[i]) << ',' << io::fmt_double(pp.target.dx) << ','
        << io::fmt_double(pp.target.dy) << ',' << io::fmt_double(pp.target.dtheta) << ',' << io::fmt_double(r.offset.dx)
        << ',' << io::fmt_double(r.offset.dy) << ',' << io::fmt_double(r.offset.dtheta) << ',' << r.best_tile << ','
        << (hit ? 1 : 0) << '\n';
  }
  io::write_text(dir / "coarse.csv", csv.str());
  summary({{"command", "coarse"}, {"estimates", str(dir / "coarse.csv")}, {"samples", done},
           {"within_grid_step", ok}});
  return 0;
}

int cmd_eval(const Common& c, const EvalArgs& a) {
  const RunConfig cfg = resolve_config(c);
  const fs::path dir = run_dir(c, "eval");
  prepare(dir, cfg, {{"command", "eval"}, {"traj", str(a.traj)}, {"gt", str(a.gt)}});
  const std::vector<StampedPose> traj = read_pose_csv(a.traj), gt = read_pose_csv(a.gt);
  const json m = metrics_json(traj, gt);
  io::write_json(dir / "metrics.json", m);
  plot_trajectories(traj, gt, dir / "trajectory.svg");
  plot_errors(traj, gt, dir / "errors.svg");
  summary({{"command", "eval"}, {"metrics", m}});
  return 0;
}

}  // namespace radloc::tools
