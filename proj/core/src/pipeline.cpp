#include "radloc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "radloc/error.hpp"
#include "radloc/io.hpp"
#include "radloc/parallel.hpp"

namespace radloc {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ad::Tensor;

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double parse_double(const std::string& s, const fs::path& file, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError(file.string() + ":" + std::to_string(line) + ": not a number: '" + s + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

// ------------------------------------------------------------------ datasets

DatasetIndex DatasetIndex::load(const fs::path& dir) {
  DatasetIndex d;
  d.root = dir;
  d.map_stem = dir / "map";
  if (!fs::exists(dir / "map.bin") || !fs::exists(dir / "map.json"))
    throw IoError("dataset " + dir.string() + ": map.bin/map.json missing");
  const auto poses = read_pose_csv(dir / "poses.csv");
  if (poses.empty()) throw IoError("dataset " + dir.string() + ": poses.csv has no rows");
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (i > 0 && !(poses[i].t > poses[i - 1].t))
      throw ConfigError("dataset " + dir.string() + ": timestamps not strictly increasing at row " +
                        std::to_string(i + 1));
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i;
    DatasetRecord r;
    r.t = poses[i].t;
    r.gt = poses[i].pose;
    r.scan_stem = dir / "scans" / name.str();
    if (!fs::exists(r.scan_stem.string() + ".bin") || !fs::exists(r.scan_stem.string() + ".json"))
      throw IoError("dataset " + dir.string() + ": scan " + r.scan_stem.string() + " missing");
    d.records.push_back(std::move(r));
  }
  const fs::path splits = dir / "splits.csv";
  if (fs::exists(splits)) {
    std::istringstream in(io::read_text(splits));
    std::string line;
    std::size_t ln = 0;
    while (std::getline(in, line)) {
      ++ln;
      if (line.empty() || (ln == 1 && line.rfind("index", 0) == 0)) continue;
      const auto f = io::split_csv(line);
      if (f.size() != 2) throw IoError(splits.string() + ":" + std::to_string(ln) + ": expected index,split");
      const double idx = parse_double(f[0], splits, ln);
      if (idx < 0 || idx >= static_cast<double>(d.records.size()) || idx != std::floor(idx))
        throw IoError(splits.string() + ":" + std::to_string(ln) + ": index out of range");
      d.records[static_cast<std::size_t>(idx)].split = f[1];
    }
  }
  return d;
}

std::vector<std::size_t> DatasetIndex::indices_of(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

GridMap DatasetIndex::load_map() const { return load_grid_map(map_stem); }

PolarScan DatasetIndex::load_scan(std::size_t i) const { return load_polar(records.at(i).scan_stem); }

std::vector<Pose2> DatasetIndex::gt_poses() const {
  std::vector<Pose2> out;
  for (const auto& r : records) out.push_back(r.gt);
  return out;
}

std::vector<double> DatasetIndex::timestamps() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.t);
  return out;
}

LoadedSequence load_sequence(const DatasetIndex& index, const MeasConfig& meas) {
  LoadedSequence s;
  s.name = index.root.filename().string();
  s.map = index.load_map();
  s.polar.resize(index.records.size());
  s.radar.resize(index.records.size());
  parallel_for(index.records.size(), [&](std::size_t i) {
    s.polar[i] = index.load_scan(i);
    s.radar[i] = polar_to_cartesian(s.polar[i], meas.resolution, meas.rows, meas.cols);
  });
  s.gt = index.gt_poses();
  s.timestamps = index.timestamps();
  return s;
}

LoadedSequence make_sequence(std::string name, GridMap map, std::vector<PolarScan> scans, std::vector<Pose2> gt,
                             std::vector<double> timestamps, const MeasConfig& meas) {
  if (scans.size() != gt.size() || timestamps.size() != gt.size())
    throw ConfigError("sequence " + name + ": scans, poses and timestamps differ in length");
  LoadedSequence s;
  s.name = std::move(name);
  s.map = std::move(map);
  s.polar = std::move(scans);
  s.radar.resize(s.polar.size());
  parallel_for(s.polar.size(), [&](std::size_t i) {
    s.radar[i] = polar_to_cartesian(s.polar[i], meas.resolution, meas.rows, meas.cols);
  });
  s.gt = std::move(gt);
  s.timestamps = std::move(timestamps);
  return s;
}

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
  MeasurementSetup check(meas);
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("train.") + what + " must be positive");
  };
  positive(learning_rate, "learning_rate");
  positive(batch_size, "batch_size");
  positive(k_seq, "k_seq");
  positive(weights.alpha, "alpha");
  if (!(weights.beta >= 0.0)) throw ConfigError("train.beta must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
  if (epochs < 0 || steps_per_epoch < 0) throw ConfigError("train.epochs and steps_per_epoch must be >= 0");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw ConfigError("train.validation_fraction must lie in [0, 1)");
  const GridLimits& g = meas.limits;
  const GridLimits& p = perturbation;
  if (p.x < 0 || p.y < 0 || p.theta < 0 || p.x > g.x + 1e-12 || p.y > g.y + 1e-12 || p.theta > g.theta + 1e-12)
    throw ConfigError("train.perturbation limits must lie within the grid limits");
  noise.validate();
}

namespace {

json cov_json(const Covariance3& c) {
  return json::array({json::array({c(0, 0), c(0, 1), c(0, 2)}), json::array({c(1, 0), c(1, 1), c(1, 2)}),
                      json::array({c(2, 0), c(2, 1), c(2, 2)})});
}

Covariance3 cov_from_json(const json& j, const char* what) {
  Covariance3 c;
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.size() != 3) throw ConfigError(std::string(what) + " must be a 3x3 matrix");
  for (int r = 0; r < 3; ++r) {
    if (rows[r].size() != 3) throw ConfigError(std::string(what) + " must be a 3x3 matrix");
    for (int k = 0; k < 3; ++k) c(r, k) = rows[r][k];
  }
  return c;
}

}  // namespace

json to_json(const TrainConfig& c) {
  const MeasConfig& m = c.meas;
  return {
      {"profile", profile_name(c.profile)},
      {"image", {{"rows", m.rows}, {"cols", m.cols}, {"resolution_m_per_px", m.resolution}, {"patches", m.patches},
                 {"temperature", m.temperature}}},
      {"grid", {{"limit_x_m", m.limits.x}, {"limit_y_m", m.limits.y}, {"limit_theta_deg", rad2deg(m.limits.theta)},
                {"res_x_m", m.grid_resolution.x}, {"res_y_m", m.grid_resolution.y},
                {"res_theta_deg", rad2deg(m.grid_resolution.theta)}}},
      {"perturbation", {{"x_m", c.perturbation.x}, {"y_m", c.perturbation.y},
                        {"theta_deg", rad2deg(c.perturbation.theta)}}},
      {"alpha", c.weights.alpha},
      {"beta", c.weights.beta},
      {"k_seq", c.k_seq},
      {"learning_rate", c.learning_rate},
      {"momentum", c.momentum},
      {"grad_clip", c.grad_clip},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"steps_per_epoch", c.steps_per_epoch},
      {"validation_fraction", c.validation_fraction},
      {"seed", c.seed},
      {"noise", {{"sigma_m", cov_json(c.noise.sigma_m)}, {"initial_cov", cov_json(c.noise.initial_cov)}}},
  };
}

TrainConfig train_config_from_json(const json& j) {
  io::require_known_keys(j,
                         {"profile", "image", "grid", "perturbation", "alpha", "beta", "k_seq", "learning_rate",
                          "momentum", "grad_clip", "batch_size", "epochs", "steps_per_epoch", "validation_fraction",
                          "seed", "noise"},
                         "train");
  TrainConfig c;
  try {
    if (j.contains("profile")) c.profile = parse_profile(j.at("profile").get<std::string>());
    if (j.contains("image")) {
      const json& im = j.at("image");
      io::require_known_keys(im, {"rows", "cols", "resolution_m_per_px", "patches", "temperature"}, "train.image");
      read_opt(im, "rows", c.meas.rows);
      read_opt(im, "cols", c.meas.cols);
      read_opt(im, "resolution_m_per_px", c.meas.resolution);
      read_opt(im, "patches", c.meas.patches);
      read_opt(im, "temperature", c.meas.temperature);
    }
    if (j.contains("grid")) {
      const json& g = j.at("grid");
      io::require_known_keys(g, {"limit_x_m", "limit_y_m", "limit_theta_deg", "res_x_m", "res_y_m", "res_theta_deg"},
                             "train.grid");
      read_opt(g, "limit_x_m", c.meas.limits.x);
      read_opt(g, "limit_y_m", c.meas.limits.y);
      if (g.contains("limit_theta_deg")) c.meas.limits.theta = deg2rad(g.at("limit_theta_deg").get<double>());
      read_opt(g, "res_x_m", c.meas.grid_resolution.x);
      read_opt(g, "res_y_m", c.meas.grid_resolution.y);
      if (g.contains("res_theta_deg")) c.meas.grid_resolution.theta = deg2rad(g.at("res_theta_deg").get<double>());
    }
    c.perturbation = c.meas.limits;
    if (j.contains("perturbation")) {
      const json& p = j.at("perturbation");
      io::require_known_keys(p, {"x_m", "y_m", "theta_deg"}, "train.perturbation");
      read_opt(p, "x_m", c.perturbation.x);
      read_opt(p, "y_m", c.perturbation.y);
      if (p.contains("theta_deg")) c.perturbation.theta = deg2rad(p.at("theta_deg").get<double>());
    }
    read_opt(j, "alpha", c.weights.alpha);
    read_opt(j, "beta", c.weights.beta);
    read_opt(j, "k_seq", c.k_seq);
    read_opt(j, "learning_rate", c.learning_rate);
    read_opt(j, "momentum", c.momentum);
    read_opt(j, "grad_clip", c.grad_clip);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "steps_per_epoch", c.steps_per_epoch);
    read_opt(j, "validation_fraction", c.validation_fraction);
    read_opt(j, "seed", c.seed);
    if (j.contains("noise")) {
      const json& n = j.at("noise");
      io::require_known_keys(n, {"sigma_m", "initial_cov"}, "train.noise");
      if (n.contains("sigma_m")) c.noise.sigma_m = cov_from_json(n.at("sigma_m"), "train.noise.sigma_m");
      if (n.contains("initial_cov")) c.noise.initial_cov = cov_from_json(n.at("initial_cov"), "train.noise.initial_cov");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------------ training

PerturbedPose sample_perturbations(const Pose2& gt, const GridLimits& limits, std::mt19937_64& rng) {
  const Offset o{(2.0 * uniform01(rng) - 1.0) * limits.x, (2.0 * uniform01(rng) - 1.0) * limits.y,
                 (2.0 * uniform01(rng) - 1.0) * limits.theta};
  // predicted [+] o == gt  <=>  theta = gt.theta - dtheta, p = gt.p - R(gt.theta) d
  const double c = std::cos(gt.theta), s = std::sin(gt.theta);
  PerturbedPose out;
  out.predicted = {gt.x - (c * o.dx - s * o.dy), gt.y - (s * o.dx + c * o.dy), wrap_angle(gt.theta - o.dtheta)};
  out.target = boxminus(gt, out.predicted);
  return out;
}

namespace {

struct SampleRef {
  std::size_t seq = 0;
  std::size_t frame = 0;
};

struct Batch {
  Tensor radar;
  Tensor map;
  std::vector<Offset> targets;
  std::vector<OneHotTargets> onehot;
};

Batch make_batch(std::span<const LoadedSequence> data, std::span<const SampleRef> refs,
                 std::span<const PerturbedPose> perturbed, const MeasurementSetup& setup) {
  const MeasConfig& m = setup.config();
  const std::size_t plane = static_cast<std::size_t>(m.rows) * m.cols;
  const int b = static_cast<int>(refs.size());
  std::vector<double> r(plane * b), c(plane * b);
  Batch out;
  out.targets.resize(b);
  out.onehot.resize(b);
  parallel_for(refs.size(), [&](std::size_t i) {
    const LoadedSequence& s = data[refs[i].seq];
    const auto& rad = s.radar[refs[i].frame].image.px;
    std::copy(rad.begin(), rad.end(), r.begin() + static_cast<std::ptrdiff_t>(i * plane));
    const BevImage crop = crop_at(s.map, perturbed[i].predicted, m.rows, m.cols, m.resolution);
    std::copy(crop.image.px.begin(), crop.image.px.end(), c.begin() + static_cast<std::ptrdiff_t>(i * plane));
    out.targets[i] = perturbed[i].target;
    out.onehot[i] = one_hot_targets(setup.grid(), perturbed[i].target);
  });
  out.radar = Tensor::from({b, 1, m.rows, m.cols}, std::move(r));
  out.map = Tensor::from({b, 1, m.rows, m.cols}, std::move(c));
  return out;
}

struct StepLoss {
  Tensor total;
  double l1 = 0.0;
  double l2 = 0.0;
  OffsetPosterior post;
};

StepLoss single_step_loss(const ModelParams& p, const Batch& batch, const MeasurementSetup& setup,
                          const TrainConfig& cfg, ForwardMode mode) {
  StepLoss s;
  s.post = infer_offsets(p, batch.radar, batch.map, setup, mode);
  Tensor l1 = classification_loss(s.post.px, s.post.py, s.post.pt, batch.onehot);
  Tensor l2 = regression_loss(s.post.mean_x, s.post.mean_y, s.post.mean_t, batch.targets, cfg.weights.alpha);
  s.l1 = l1.item();
  s.l2 = l2.item();
  s.total = l1 + l2;
  return s;
}

/// SGD with momentum (v = mu v + g; w -= lr v), cosine-decayed learning rate.
class Sgd {
 public:
  Sgd(const ModelParams& p, const TrainConfig& cfg, long total_steps)
      : cfg_(cfg), total_(std::max(1L, total_steps)), velocity_(p.parameter_count(), 0.0) {}

  double lr(long step) const {
    return cfg_.learning_rate * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(step) / static_cast<double>(total_)));
  }

  /// Returns the pre-clip gradient norm; throws NumericalError on a non-finite gradient.
  double step(ModelParams& p, long step_index, double grad_scale = 1.0) {
    std::vector<double> g = p.flat_grads();
    double norm2 = 0.0;
    for (double& v : g) {
      v *= grad_scale;
      norm2 += v * v;
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient at step " + std::to_string(step_index));
    const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    std::vector<double> w = p.flat_values();
    const double rate = lr(step_index);
    for (std::size_t i = 0; i < w.size(); ++i) {
      velocity_[i] = cfg_.momentum * velocity_[i] + clip * g[i];
      w[i] -= rate * velocity_[i];
    }
    p.set_flat_values(w);
    return norm;
  }

 private:
  const TrainConfig& cfg_;
  long total_;
  std::vector<double> velocity_;
};

class RunOutput {
 public:
  explicit RunOutput(const fs::path& dir) : dir_(dir) {
    if (dir_.empty()) return;
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
    log_.open(dir_ / "train_log.jsonl", std::ios::app);
    if (!log_) throw IoError("cannot open " + (dir_ / "train_log.jsonl").string());
  }

  void log(const json& line) {
    if (log_.is_open()) log_ << line.dump() << '\n' << std::flush;
  }

  void checkpoint(const ModelParams& p, const MeasConfig& m, const std::string& name) {
    if (!dir_.empty()) save_checkpoint(p, m, dir_ / name);
  }

  /// Persists the parameters and throws NumericalError.
  [[noreturn]] void abort(const ModelParams& last_good, const MeasConfig& m, const std::string& why) {
    std::string where;
    if (!dir_.empty()) {
      save_checkpoint(last_good, m, dir_ / "last_good");
      where = "; last good parameters in " + (dir_ / "last_good").string();
    }
    log({{"event", "abort"}, {"reason", why}});
    throw NumericalError("training diverged: " + why + where);
  }

 private:
  fs::path dir_;
  std::ofstream log_;
};

/// Deterministic split of all frames into training and validation samples.
void split_samples(std::span<const LoadedSequence> data, double val_fraction, std::uint64_t seed,
                   std::vector<SampleRef>& train, std::vector<SampleRef>& val) {
  std::vector<SampleRef> all;
  for (std::size_t s = 0; s < data.size(); ++s)
    for (std::size_t f = 0; f < data[s].radar.size(); ++f)
      if (data[s].map.contains(data[s].gt[f].x, data[s].gt[f].y)) all.push_back({s, f});
  std::mt19937_64 rng(seed ^ 0x5851f42d4c957f2dULL);
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng() % i]);
  const std::size_t nval = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(all.size())));
  val.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(nval));
  train.assign(all.begin() + static_cast<std::ptrdiff_t>(nval), all.end());
  auto order = [](const SampleRef& a, const SampleRef& b) { return a.seq != b.seq ? a.seq < b.seq : a.frame < b.frame; };
  std::sort(val.begin(), val.end(), order);
}

OffsetEvaluation evaluate_refs(const ModelParams& p, std::span<const LoadedSequence> data,
                               std::span<const SampleRef> refs, const MeasurementSetup& setup, const TrainConfig& cfg,
                               std::uint64_t seed) {
  ad::NoGradGuard ng;
  OffsetEvaluation ev;
  const std::size_t bs = 8;
  for (std::size_t b0 = 0; b0 < refs.size(); b0 += bs) {
    const std::size_t b1 = std::min(refs.size(), b0 + bs);
    std::vector<PerturbedPose> pert;
    for (std::size_t i = b0; i < b1; ++i) {
      std::mt19937_64 rng(seed + 0x9e3779b97f4a7c15ULL * (i + 1));
      pert.push_back(sample_perturbations(data[refs[i].seq].gt[refs[i].frame], cfg.perturbation, rng));
    }
    const Batch batch = make_batch(data, refs.subspan(b0, b1 - b0), pert, setup);
    const StepLoss s = single_step_loss(p, batch, setup, cfg, ForwardMode{});
    for (std::size_t i = 0; i < b1 - b0; ++i) {
      const Offset& t = batch.targets[i];
      ev.mean_abs_error[0] += std::abs(s.post.mean_x.at(i) - t.dx);
      ev.mean_abs_error[1] += std::abs(s.post.mean_y.at(i) - t.dy);
      ev.mean_abs_error[2] += std::abs(wrap_angle(s.post.mean_t.at(i) - t.dtheta));
    }
    ev.loss += (s.l1 + s.l2) * static_cast<double>(b1 - b0);
  }
  ev.samples = refs.size();
  if (ev.samples > 0) {
    for (double& e : ev.mean_abs_error) e /= static_cast<double>(ev.samples);
    ev.loss /= static_cast<double>(ev.samples);
  }
  return ev;
}

}  // namespace

OffsetEvaluation evaluate_offsets(const ModelParams& p, std::span<const LoadedSequence> data, const TrainConfig& cfg,
                                  std::uint64_t seed, std::size_t max_samples) {
  const MeasurementSetup setup(cfg.meas);
  std::vector<SampleRef> refs;
  for (std::size_t s = 0; s < data.size(); ++s)
    for (std::size_t f = 0; f < data[s].radar.size(); ++f)
      if (data[s].map.contains(data[s].gt[f].x, data[s].gt[f].y)) refs.push_back({s, f});
  if (max_samples > 0 && refs.size() > max_samples) {
    std::vector<SampleRef> thin;
    for (std::size_t i = 0; i < max_samples; ++i) thin.push_back(refs[i * refs.size() / max_samples]);
    refs = std::move(thin);
  }
  return evaluate_refs(p, data, refs, setup, cfg, seed);
}

TrainResult train_stage1(std::span<const LoadedSequence> data, const TrainConfig& cfg, const ModelParams* init,
                         const TrainObserver& observer) {
  cfg.validate();
  const MeasurementSetup setup(cfg.meas);
  const ArchConfig arch = cfg.profile == ArchProfile::kTiny ? ArchConfig::tiny() : ArchConfig::paper();
  ModelParams p = init ? init->clone() : ModelParams::init(arch, static_cast<int>(setup.grid().size()), cfg.seed);
  if (p.n_candidates() != static_cast<int>(setup.grid().size()))
    throw ConfigError("initial parameters expect " + std::to_string(p.n_candidates()) + " candidates, grid has " +
                      std::to_string(setup.grid().size()));

  std::vector<SampleRef> train, val;
  split_samples(data, cfg.validation_fraction, cfg.seed, train, val);
  if (train.empty() && cfg.epochs > 0) throw ConfigError("stage 1: no training samples inside the maps");
  const long per_epoch = cfg.steps_per_epoch > 0
                             ? cfg.steps_per_epoch
                             : static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.epochs;

  RunOutput out(cfg.out_dir);
  TrainResult result;
  const std::uint64_t val_seed = cfg.seed + 17;
  auto validate_now = [&](const ModelParams& q) {
    return val.empty() ? OffsetEvaluation{} : evaluate_refs(q, data, val, setup, cfg, val_seed);
  };
  OffsetEvaluation best = validate_now(p);
  result.params = p.clone();
  result.best_epoch = 0;
  out.log({{"stage", 1}, {"event", "start"}, {"train_samples", train.size()}, {"val_samples", val.size()},
           {"steps", total}, {"val_loss", best.loss}});

  Sgd opt(p, cfg, total);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (long s = 0; s < per_epoch; ++s, ++step) {
      std::vector<SampleRef> refs;
      std::vector<PerturbedPose> pert;
      for (int i = 0; i < cfg.batch_size; ++i) {
        if (cursor >= order.size()) {
          for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng() % k]);
          cursor = 0;
        }
        refs.push_back(train[order[cursor++]]);
        pert.push_back(sample_perturbations(data[refs.back().seq].gt[refs.back().frame], cfg.perturbation, rng));
      }
      const Batch batch = make_batch(data, refs, pert, setup);
      p.zero_grad();
      StepLoss sl;
      try {
        sl = single_step_loss(p, batch, setup, cfg, ForwardMode{true, true});
      } catch (const NumericalError& e) {
        out.abort(p, cfg.meas, e.what());
      }
      const double loss = sl.total.item();
      if (!std::isfinite(loss)) out.abort(p, cfg.meas, "non-finite loss at step " + std::to_string(step));
      sl.total.backward();
      double gnorm = 0.0;
      const ModelParams before = p.clone();
      try {
        gnorm = opt.step(p, step);
      } catch (const NumericalError& e) {
        out.abort(before, cfg.meas, e.what());
      }
      if (!p.all_finite()) out.abort(before, cfg.meas, "non-finite parameters after step " + std::to_string(step));
      epoch_loss += loss;
      json line = {{"stage", 1}, {"epoch", epoch}, {"step", step},     {"lr", opt.lr(step)},
                   {"L1", sl.l1},  {"L2", sl.l2},   {"loss", loss},    {"grad_norm", gnorm}};
      out.log(line);
      if (observer) observer(line);
    }
    const OffsetEvaluation ev = validate_now(p);
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = per_epoch > 0 ? epoch_loss / static_cast<double>(per_epoch) : 0.0;
    st.val_loss = ev.loss;
    st.val_abs_error = ev.mean_abs_error;
    result.epochs.push_back(st);
    out.checkpoint(p, cfg.meas, "epoch_" + std::to_string(epoch));
    const bool improved = val.empty() || ev.loss <= best.loss;
    if (improved) {
      best = ev;
      result.params = p.clone();
      result.best_epoch = epoch;
    }
    json line = {{"stage", 1},
                 {"event", "epoch"},
                 {"epoch", epoch},
                 {"train_loss", st.train_loss},
                 {"val_loss", ev.loss},
                 {"val_err_x_m", ev.mean_abs_error[0]},
                 {"val_err_y_m", ev.mean_abs_error[1]},
                 {"val_err_theta_deg", rad2deg(ev.mean_abs_error[2])},
                 {"best_epoch", result.best_epoch}};
    out.log(line);
    if (observer) observer(line);
  }
  out.checkpoint(result.params, cfg.meas, "best");
  return result;
}

namespace {

struct Window {
  std::size_t seq = 0;
  std::size_t start = 0;  // index of the initial pose
};

struct WindowLoss {
  Tensor loss;
  double abs_err[3] = {0, 0, 0};
  bool ok = false;
  std::string why;
};

WindowLoss window_loss(const ModelParams& p, std::span<const LoadedSequence> data,
                       std::span<const std::vector<Offset>> controls, const Window& w, const MeasurementSetup& setup,
                       const TrainConfig& cfg, std::mt19937_64& rng) {
  const LoadedSequence& s = data[w.seq];
  const std::size_t k = static_cast<std::size_t>(cfg.k_seq);
  FilterState init;
  const GridLimits half{cfg.perturbation.x / 2, cfg.perturbation.y / 2, cfg.perturbation.theta / 2};
  init.pose = sample_perturbations(s.gt[w.start], half, rng).predicted;
  init.cov = cfg.noise.initial_cov;
  init.t = s.timestamps[w.start];
  std::span<const Offset> u(controls[w.seq].data() + w.start, k);
  std::span<const BevImage> scans(s.radar.data() + w.start + 1, k);
  std::vector<Pose2> gt(s.gt.begin() + static_cast<std::ptrdiff_t>(w.start + 1),
                        s.gt.begin() + static_cast<std::ptrdiff_t>(w.start + 1 + k));
  WindowLoss out;
  try {
    Unroll un = track_unroll(p, init, u, scans, s.map, setup, cfg.noise, ForwardMode{});
    out.loss = sequential_loss(un.poses, un.covs, gt, cfg.weights.beta);
    if (!std::isfinite(out.loss.item())) throw NumericalError("non-finite sequential loss");
    for (std::size_t t = 0; t < k; ++t) {
      out.abs_err[0] += std::abs(un.poses[t].at(0) - gt[t].x) / k;
      out.abs_err[1] += std::abs(un.poses[t].at(1) - gt[t].y) / k;
      out.abs_err[2] += std::abs(wrap_angle(un.poses[t].at(2) - gt[t].theta)) / k;
    }
    out.ok = true;
  } catch (const NumericalError& e) {
    out.why = e.what();
  }
  return out;
}

}  // namespace

TrainResult train_stage2(const ModelParams& stage1, std::span<const LoadedSequence> data,
                         std::span<const std::vector<Offset>> controls, const TrainConfig& cfg,
                         const TrainObserver& observer) {
  cfg.validate();
  const MeasurementSetup setup(cfg.meas);
  if (stage1.n_candidates() != static_cast<int>(setup.grid().size()))
    throw ConfigError("stage-1 parameters do not match the grid");
  if (controls.size() != data.size()) throw ConfigError("stage 2 needs one control list per sequence");
  const std::size_t k = static_cast<std::size_t>(cfg.k_seq);
  std::vector<Window> windows;
  for (std::size_t s = 0; s < data.size(); ++s) {
    if (controls[s].size() + 1 != data[s].gt.size())
      throw ConfigError("sequence " + data[s].name + ": controls must number one fewer than poses");
    for (std::size_t t = 0; t + k < data[s].gt.size(); t += k) windows.push_back({s, t});
  }
  std::mt19937_64 split_rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
  for (std::size_t i = windows.size(); i > 1; --i) std::swap(windows[i - 1], windows[split_rng() % i]);
  const std::size_t nval =
      static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(windows.size())));
  const std::vector<Window> val(windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(nval));
  std::vector<Window> train(windows.begin() + static_cast<std::ptrdiff_t>(nval), windows.end());
  if (train.empty() && cfg.epochs > 0) throw ConfigError("stage 2: no training windows");

  ModelParams p = stage1.clone();
  RunOutput out(cfg.out_dir);
  auto validate_now = [&](const ModelParams& q) {
    ad::NoGradGuard ng;
    OffsetEvaluation ev;
    for (std::size_t i = 0; i < val.size(); ++i) {
      std::mt19937_64 rng(cfg.seed + 31 + 0x9e3779b97f4a7c15ULL * (i + 1));
      const WindowLoss wl = window_loss(q, data, controls, val[i], setup, cfg, rng);
      if (!wl.ok) continue;
      ev.loss += wl.loss.item();
      for (int a = 0; a < 3; ++a) ev.mean_abs_error[a] += wl.abs_err[a];
      ++ev.samples;
    }
    if (ev.samples > 0) {
      ev.loss /= static_cast<double>(ev.samples);
      for (double& e : ev.mean_abs_error) e /= static_cast<double>(ev.samples);
    }
    return ev;
  };

  const long per_epoch = cfg.steps_per_epoch > 0
                             ? cfg.steps_per_epoch
                             : static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.epochs;
  TrainResult result;
  OffsetEvaluation best = validate_now(p);
  result.params = p.clone();
  out.log({{"stage", 2}, {"event", "start"}, {"train_windows", train.size()}, {"val_windows", val.size()},
           {"steps", total}, {"val_loss", best.loss}});

  Sgd opt(p, cfg, total);
  std::mt19937_64 rng(cfg.seed + 2);
  std::size_t cursor = train.size();
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (long s = 0; s < per_epoch; ++s, ++step) {
      p.zero_grad();
      double loss = 0.0;
      int used = 0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        if (cursor >= train.size()) {
          for (std::size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[rng() % i]);
          cursor = 0;
        }
        const Window w = train[cursor++];
        WindowLoss wl = window_loss(p, data, controls, w, setup, cfg, rng);
        if (!wl.ok) {
          out.log({{"stage", 2}, {"event", "skip_window"}, {"sequence", data[w.seq].name}, {"start", w.start},
                   {"reason", wl.why}});
          continue;
        }
        wl.loss.backward();
        loss += wl.loss.item();
        ++used;
      }
      if (used == 0) continue;
      loss /= used;
      const ModelParams before = p.clone();
      double gnorm = 0.0;
      try {
        gnorm = opt.step(p, step, 1.0 / used);
      } catch (const NumericalError& e) {
        out.abort(before, cfg.meas, e.what());
      }
      if (!p.all_finite()) out.abort(before, cfg.meas, "non-finite parameters after step " + std::to_string(step));
      epoch_loss += loss;
      json line = {{"stage", 2}, {"epoch", epoch}, {"step", step}, {"lr", opt.lr(step)},
                   {"L3", loss},  {"loss", loss},   {"windows", used}, {"grad_norm", gnorm}};
      out.log(line);
      if (observer) observer(line);
    }
    const OffsetEvaluation ev = validate_now(p);
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = per_epoch > 0 ? epoch_loss / static_cast<double>(per_epoch) : 0.0;
    st.val_loss = ev.loss;
    st.val_abs_error = ev.mean_abs_error;
    result.epochs.push_back(st);
    out.checkpoint(p, cfg.meas, "epoch_" + std::to_string(epoch));
    if (val.empty() || ev.loss <= best.loss) {
      best = ev;
      result.params = p.clone();
      result.best_epoch = epoch;
    }
    json line = {{"stage", 2},         {"event", "epoch"},  {"epoch", epoch},
                 {"train_loss", st.train_loss}, {"val_loss", ev.loss}, {"best_epoch", result.best_epoch}};
    out.log(line);
    if (observer) observer(line);
  }
  out.checkpoint(result.params, cfg.meas, "best");
  return result;
}

// ------------------------------------------------------------------- metrics

namespace {

void check_pair(std::span<const StampedPose> traj, std::span<const StampedPose> gt) {
  if (traj.size() != gt.size())
    throw ConfigError("trajectory has " + std::to_string(traj.size()) + " poses, ground truth " +
                      std::to_string(gt.size()));
  if (traj.empty()) throw ConfigError("empty trajectory");
  for (std::size_t i = 0; i < traj.size(); ++i)
    if (std::abs(traj[i].t - gt[i].t) > 1e-6 * std::max(1.0, std::abs(gt[i].t)))
      throw ConfigError("timestamp mismatch at row " + std::to_string(i) + ": " + io::fmt_double(traj[i].t) +
                        " vs " + io::fmt_double(gt[i].t));
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// T_a^-1 T_b
Pose2 relative(const Pose2& a, const Pose2& b) {
  const double c = std::cos(a.theta), s = std::sin(a.theta);
  const double dx = b.x - a.x, dy = b.y - a.y;
  return {c * dx + s * dy, -s * dx + c * dy, wrap_angle(b.theta - a.theta)};
}

std::vector<double> travelled(std::span<const StampedPose> gt) {
  std::vector<double> d(gt.size(), 0.0);
  for (std::size_t i = 1; i < gt.size(); ++i)
    d[i] = d[i - 1] + std::hypot(gt[i].pose.x - gt[i - 1].pose.x, gt[i].pose.y - gt[i - 1].pose.y);
  return d;
}

struct SegmentError {
  double trans = 0.0;  // m
  double rot = 0.0;    // rad
};

// Errors of every sub-sequence of (at least) length len starting at each frame.
std::vector<SegmentError> segment_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt,
                                         const std::vector<double>& dist, double len) {
  std::vector<SegmentError> out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    j = std::max(j, i);
    while (j < gt.size() && dist[j] - dist[i] < len) ++j;
    if (j >= gt.size()) break;
    const Pose2 rg = relative(gt[i].pose, gt[j].pose);
    const Pose2 re = relative(traj[i].pose, traj[j].pose);
    out.push_back({std::hypot(re.x - rg.x, re.y - rg.y), std::abs(wrap_angle(re.theta - rg.theta))});
  }
  return out;
}

}  // namespace

AbsoluteErrors absolute_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt) {
  check_pair(traj, gt);
  std::vector<double> et, er;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    et.push_back(std::hypot(traj[i].pose.x - gt[i].pose.x, traj[i].pose.y - gt[i].pose.y));
    er.push_back(rad2deg(std::abs(wrap_angle(traj[i].pose.theta - gt[i].pose.theta))));
  }
  auto rms = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s / static_cast<double>(v.size()));
  };
  return {rms(et), rms(er), median(et), median(er)};
}

DriftErrors kitti_relative_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt) {
  check_pair(traj, gt);
  const std::vector<double> dist = travelled(gt);
  DriftErrors out;
  double st = 0.0, sr = 0.0;
  std::size_t n = 0;
  for (int k = 1; k <= 8; ++k) {
    const double len = 100.0 * k;
    const auto errs = segment_errors(traj, gt, dist, len);
    if (errs.empty()) {
      out.partial = true;
      continue;
    }
    out.lengths_used.push_back(len);
    for (const auto& e : errs) {
      st += e.trans / len;
      sr += rad2deg(e.rot) / len;
      ++n;
    }
  }
  if (n == 0)
    throw RangeError("ground truth travels " + io::fmt_double(dist.back()) + " m, less than the 100 m minimum");
  out.drift_trans = 100.0 * st / static_cast<double>(n);
  out.drift_rot = sr / static_cast<double>(n);
  return out;
}

std::vector<DistanceBin> relative_pose_errors(std::span<const StampedPose> traj, std::span<const StampedPose> gt,
                                              std::span<const double> distances) {
  check_pair(traj, gt);
  const std::vector<double> dist = travelled(gt);
  std::vector<DistanceBin> out;
  for (double len : distances) {
    if (!(len > 0.0)) throw ConfigError("relative error distances must be positive");
    DistanceBin b;
    b.distance = len;
    for (const auto& e : segment_errors(traj, gt, dist, len)) {
      b.trans += 100.0 * e.trans / len;
      b.rot += rad2deg(e.rot);
      ++b.count;
    }
    if (b.count > 0) {
      b.trans /= static_cast<double>(b.count);
      b.rot /= static_cast<double>(b.count);
    }
    out.push_back(b);
  }
  return out;
}

json metrics_json(std::span<const StampedPose> traj, std::span<const StampedPose> gt) {
  const AbsoluteErrors a = absolute_errors(traj, gt);
  json j = {{"poses", traj.size()},
            {"absolute", {{"rmse_trans_m", a.rmse_trans}, {"rmse_rot_deg", a.rmse_rot},
                          {"median_trans_m", a.median_trans}, {"median_rot_deg", a.median_rot}}}};
  const std::vector<double> dist = travelled(gt);
  j["travelled_m"] = dist.back();
  try {
    const DriftErrors d = kitti_relative_errors(traj, gt);
    j["drift"] = {{"trans_percent", d.drift_trans}, {"rot_deg_per_m", d.drift_rot}, {"partial", d.partial},
                  {"lengths_m", d.lengths_used}};
  } catch (const RangeError&) {
    j["drift"] = nullptr;
  }
  std::vector<double> bins;
  for (double d = 10.0; d <= std::min(100.0, dist.back()); d += 10.0) bins.push_back(d);
  json rel = json::array();
  for (const auto& b : relative_pose_errors(traj, gt, bins))
    rel.push_back({{"distance_m", b.distance}, {"trans_percent", b.trans}, {"rot_deg", b.rot}, {"count", b.count}});
  j["relative"] = rel;
  return j;
}

}  // namespace radloc
