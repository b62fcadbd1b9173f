#include "radloc/filter.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "radloc/error.hpp"
#include "radloc/io.hpp"
#include "radloc/losses.hpp"

namespace radloc {

using ad::Tensor;

NoiseConfig NoiseConfig::tracking_default() {
  NoiseConfig n;
  const double r = deg2rad(0.5), r0 = deg2rad(3.0);
  n.sigma_m = Eigen::Vector3d(0.04, 0.04, r * r).asDiagonal();
  n.initial_cov = Eigen::Vector3d(3.0, 3.0, r0 * r0 / 3.0).asDiagonal();
  return n;
}

void NoiseConfig::validate() const {
  for (const auto* m : {&sigma_m, &initial_cov}) {
    if (!is_valid_covariance(*m)) throw ConfigError("noise covariance must be symmetric positive semi-definite");
    if (!(m->diagonal().array() > 0.0).all()) throw ConfigError("noise covariance needs a positive diagonal");
  }
}

namespace {

Tensor mat_tensor(const Covariance3& m, bool requires_grad = false) {
  std::vector<double> v(9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(r) * 3 + c] = m(r, c);
  return Tensor::from({3, 3}, std::move(v), requires_grad);
}

Covariance3 tensor_mat(const Tensor& t) {
  Covariance3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = t.at(static_cast<std::size_t>(r) * 3 + c);
  return m;
}

Tensor sym(const Tensor& m) { return ad::scale(m + ad::transpose(m), 0.5); }

Tensor image_tensor(const Image& im) { return Tensor::from({1, 1, im.rows, im.cols}, im.px); }

}  // namespace

StateVar make_state(const FilterState& s) {
  return {Tensor::from({3}, {s.pose.x, s.pose.y, s.pose.theta}), mat_tensor(s.cov)};
}

FilterState to_state(const StateVar& s, double t) {
  return {{s.pose.at(0), s.pose.at(1), s.pose.at(2)}, tensor_mat(s.cov), t};
}

Tensor boxplus(const Tensor& pose, const Tensor& dx, const Tensor& dy, const Tensor& dtheta) {
  Tensor th = ad::index(pose, 2) + dtheta;
  Tensor c = ad::cos(th), s = ad::sin(th);
  return ad::stack({ad::index(pose, 0) + c * dx - s * dy, ad::index(pose, 1) + s * dx + c * dy, ad::wrap_angle(th)},
                   {3});
}

StateVar predict_var(const StateVar& s, const Offset& u, const Covariance3& sigma_m) {
  StateVar out;
  out.pose = boxplus(s.pose, Tensor::scalar(u.dx), Tensor::scalar(u.dy), Tensor::scalar(u.dtheta));
  Tensor th = ad::index(s.pose, 2) + u.dtheta;
  Tensor c = ad::cos(th), sn = ad::sin(th);
  Tensor a = ad::scale(sn, -u.dx) - ad::scale(c, u.dy);
  Tensor b = ad::scale(c, u.dx) - ad::scale(sn, u.dy);
  Tensor one = Tensor::scalar(1.0), zero = Tensor::scalar(0.0);
  Tensor f = ad::stack({one, zero, a, zero, one, b, zero, zero, one}, {3, 3});
  out.cov = sym(ad::matmul(ad::matmul(f, s.cov), ad::transpose(f)) + mat_tensor(sigma_m));
  return out;
}

StateVar update_var(const StateVar& pred, const Tensor& z, const Tensor& sigma_o) {
  Tensor s = pred.cov + sigma_o;
  const Covariance3 sv = tensor_mat(s);
  const Eigen::SelfAdjointEigenSolver<Covariance3> es(symmetrized(sv), Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  if (!sv.allFinite() || !(lo > 0.0) || hi / lo > kMaxConditionNumber) {
    std::ostringstream os;
    os << "innovation covariance is singular: eigenvalues [" << es.eigenvalues().transpose() << "], diagonal ["
       << sv.diagonal().transpose() << "]";
    throw NumericalError(os.str());
  }
  Tensor k = ad::matmul(pred.cov, ad::inverse(s));
  Tensor r = ad::stack({ad::index(z, 0) - ad::index(pred.pose, 0), ad::index(z, 1) - ad::index(pred.pose, 1),
                        ad::wrap_angle(ad::index(z, 2) - ad::index(pred.pose, 2))},
                       {3, 1});
  Tensor corr = ad::reshape(ad::matmul(k, r), {3});
  Tensor x = pred.pose + corr;
  StateVar out;
  out.pose = ad::stack({ad::index(x, 0), ad::index(x, 1), ad::wrap_angle(ad::index(x, 2))}, {3});
  Tensor eye = mat_tensor(Covariance3::Identity());
  out.cov = sym(ad::matmul(eye - k, pred.cov));
  return out;
}

FilterState predict(const FilterState& state, const Offset& u, const NoiseConfig& noise) {
  ad::NoGradGuard ng;
  return to_state(predict_var(make_state(state), u, noise.sigma_m), state.t);
}

FilterState update(const FilterState& pred, const Measurement& meas) {
  ad::NoGradGuard ng;
  const Tensor z = Tensor::from({3}, {meas.z.x, meas.z.y, meas.z.theta});
  return to_state(update_var(make_state(pred), z, mat_tensor(meas.sigma_o)), pred.t);
}

MeasurementVar measure_var(const ModelParams& p, const BevImage& radar, const GridMap& map, const StateVar& pred,
                           const MeasurementSetup& setup, ForwardMode mode) {
  const MeasConfig& cfg = setup.config();
  if (radar.image.rows != cfg.rows || radar.image.cols != cfg.cols)
    throw ConfigError("radar raster does not match the configured image size");
  const Tensor crop = crop_at_var(map, pred.pose, cfg.rows, cfg.cols, cfg.resolution);
  const OffsetPosterior o = infer_offsets(p, image_tensor(radar.image), crop, setup, mode);
  MeasurementVar m;
  m.offset = {o.mean_x.item(), o.mean_y.item(), o.mean_t.item()};
  m.z = boxplus(pred.pose, o.mean_x, o.mean_y, o.mean_t);
  m.sigma_o = world_covariance(o.var_x, o.var_y, o.var_t, ad::index(pred.pose, 2));
  m.volume = o.volume;
  return m;
}

namespace {

double stamp(std::span<const double> ts, const FilterState& init, std::size_t step) {
  return ts.empty() ? init.t + static_cast<double>(step) : ts[step - 1];
}

void check_lengths(std::span<const Offset> controls, std::size_t scans, std::span<const double> ts) {
  if (controls.size() != scans) throw ConfigError("tracking needs one control per scan");
  if (!ts.empty() && ts.size() != controls.size()) throw ConfigError("tracking needs one timestamp per scan");
}

}  // namespace

Unroll track_unroll(const ModelParams& p, const FilterState& init, std::span<const Offset> controls,
                    std::span<const BevImage> scans, const GridMap& map, const MeasurementSetup& setup,
                    const NoiseConfig& noise, ForwardMode mode, std::span<const double> timestamps) {
  check_lengths(controls, scans.size(), timestamps);
  Unroll out;
  TrajectoryStep first;
  first.t = init.t;
  first.predicted = init;
  first.estimate = init;
  out.trajectory.steps.push_back(first);
  StateVar s = make_state(init);
  for (std::size_t i = 0; i < controls.size(); ++i) {
    const double t = stamp(timestamps, init, i + 1);
    StateVar pred = predict_var(s, controls[i], noise.sigma_m);
    TrajectoryStep st;
    st.t = t;
    st.predicted = to_state(pred, t);
    const bool inside = map.contains(st.predicted.pose.x, st.predicted.pose.y);
    ad::record_branch(inside ? 1 : 0);
    if (inside) {
      MeasurementVar m = measure_var(p, scans[i], map, pred, setup, mode);
      s = update_var(pred, m.z, m.sigma_o);
      st.measured = true;
      st.z = {m.z.at(0), m.z.at(1), m.z.at(2)};
      st.sigma_o = tensor_mat(m.sigma_o);
      st.volume = {{m.volume.data().begin(), m.volume.data().end()}, setup.grid().counts()};
    } else {
      s = pred;
    }
    st.estimate = to_state(s, t);
    out.poses.push_back(s.pose);
    out.covs.push_back(s.cov);
    out.measured.push_back(st.measured);
    out.trajectory.steps.push_back(std::move(st));
  }
  return out;
}

Trajectory track_sequence(const ModelParams& p, const FilterState& init, std::span<const Offset> controls,
                          std::span<const BevImage> scans, const GridMap& map, const MeasurementSetup& setup,
                          const NoiseConfig& noise, std::span<const double> timestamps) {
  ad::NoGradGuard ng;
  return std::move(track_unroll(p, init, controls, scans, map, setup, noise, ForwardMode{}, timestamps).trajectory);
}

Trajectory dead_reckon(const FilterState& init, std::span<const Offset> controls, const NoiseConfig& noise,
                       std::span<const double> timestamps) {
  check_lengths(controls, controls.size(), timestamps);
  Trajectory out;
  TrajectoryStep first;
  first.t = init.t;
  first.predicted = init;
  first.estimate = init;
  out.steps.push_back(first);
  FilterState s = init;
  for (std::size_t i = 0; i < controls.size(); ++i) {
    s = predict(s, controls[i], noise);
    s.t = stamp(timestamps, init, i + 1);
    TrajectoryStep st;
    st.t = s.t;
    st.predicted = s;
    st.estimate = s;
    out.steps.push_back(std::move(st));
  }
  return out;
}

void write_trajectory_csv(const Trajectory& traj, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "t,x,y,theta,cov00,cov01,cov02,cov10,cov11,cov12,cov20,cov21,cov22,pred_x,pred_y,pred_theta,z_x,z_y,z_theta\n";
  auto f = [](double v) { return io::fmt_double(v); };
  for (const TrajectoryStep& s : traj.steps) {
    const Pose2& e = s.estimate.pose;
    os << f(s.t) << ',' << f(e.x) << ',' << f(e.y) << ',' << f(e.theta);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) os << ',' << f(s.estimate.cov(r, c));
    const Pose2& p = s.predicted.pose;
    os << ',' << f(p.x) << ',' << f(p.y) << ',' << f(p.theta);
    if (s.measured)
      os << ',' << f(s.z.x) << ',' << f(s.z.y) << ',' << f(s.z.theta) << '\n';
    else
      os << ",nan,nan,nan\n";
  }
  io::write_text(path, os.str());
}

std::vector<StampedPose> read_pose_csv(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
  const auto header = io::split_csv(line);
  if (header.size() < 4 || (header[0] != "t" && header[0] != "timestamp") || header[1] != "x" || header[2] != "y" ||
      header[3] != "theta")
    throw IoError(path.string() + ": expected a header starting with t,x,y,theta or timestamp,x,y,theta");
  std::vector<StampedPose> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = io::split_csv(line);
    if (f.size() < 4) throw IoError(path.string() + ":" + std::to_string(lineno) + ": too few fields");
    try {
      out.push_back({std::stod(f[0]), {std::stod(f[1]), std::stod(f[2]), std::stod(f[3])}});
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

std::vector<StampedPose> trajectory_poses(const Trajectory& traj) {
  std::vector<StampedPose> out;
  for (const auto& s : traj.steps) out.push_back({s.t, s.estimate.pose});
  return out;
}

}  // namespace radloc
