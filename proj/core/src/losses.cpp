#include "radloc/losses.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>

#include "radloc/error.hpp"
#include "radloc/io.hpp"

namespace radloc {

using ad::Tensor;

void require_well_conditioned(const Covariance3& cov, const char* what) {
  if (!cov.allFinite()) throw NumericalError(std::string(what) + ": covariance has non-finite entries");
  const Eigen::SelfAdjointEigenSolver<Covariance3> es(symmetrized(cov), Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxConditionNumber)
    throw NumericalError(std::string(what) + ": covariance is singular (eigenvalues " + io::fmt_double(lo) + ", " +
                         io::fmt_double(hi) + ")");
}

namespace {

double cross_entropy(const std::vector<double>& p, const std::vector<double>& c) {
  if (p.size() != c.size()) throw ConfigError("cross entropy: marginal and target lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (c[i] != 0.0) s -= c[i] * std::log(std::max(p[i], kLogFloor));
  return s;
}

Covariance3 to_matrix(const Tensor& t) {
  Covariance3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = t.at(static_cast<std::size_t>(r) * 3 + c);
  return m;
}

}  // namespace

LossValue loss_classification(const Marginals& m, const OneHotTargets& t) {
  LossValue v;
  v.breakdown["x"] = cross_entropy(m.px, t.cx);
  v.breakdown["y"] = cross_entropy(m.py, t.cy);
  v.breakdown["theta"] = cross_entropy(m.ptheta, t.ctheta);
  v.value = v.breakdown["x"] + v.breakdown["y"] + v.breakdown["theta"];
  return v;
}

LossValue loss_regression(const Offset& est, const Offset& gt, double alpha) {
  LossValue v;
  const double ex = est.dx - gt.dx, ey = est.dy - gt.dy, et = rad2deg(wrap_angle(est.dtheta - gt.dtheta));
  v.breakdown["x"] = ex * ex;
  v.breakdown["y"] = ey * ey;
  v.breakdown["theta"] = alpha * et * et;
  v.value = v.breakdown["x"] + v.breakdown["y"] + v.breakdown["theta"];
  return v;
}

LossValue loss_sequential(const std::vector<Pose2>& est, const std::vector<Covariance3>& cov,
                          const std::vector<Pose2>& gt, double beta) {
  if (est.empty() || est.size() != cov.size() || est.size() != gt.size())
    throw ConfigError("sequential loss needs equally long, non-empty sequences");
  double maha = 0.0, dets = 0.0;
  for (std::size_t t = 0; t < est.size(); ++t) {
    require_well_conditioned(cov[t], "sequential loss");
    const Eigen::Vector3d e(est[t].x - gt[t].x, est[t].y - gt[t].y, wrap_angle(est[t].theta - gt[t].theta));
    maha += e.dot(cov[t].ldlt().solve(e));
    dets += cov[t].determinant();
  }
  const double k = static_cast<double>(est.size());
  LossValue v;
  v.breakdown["mahalanobis"] = maha / k;
  v.breakdown["det"] = beta * dets / k;
  v.value = v.breakdown["mahalanobis"] + v.breakdown["det"];
  return v;
}

Tensor classification_loss(const Tensor& px, const Tensor& py, const Tensor& pt,
                           const std::vector<OneHotTargets>& targets) {
  const int b = px.dim(0);
  if (static_cast<int>(targets.size()) != b) throw ConfigError("classification loss: one target per row required");
  auto axis = [&](const Tensor& p, auto member) {
    const int n = p.dim(1);
    std::vector<double> w(static_cast<std::size_t>(b) * n);
    for (int r = 0; r < b; ++r) {
      const std::vector<double>& c = targets[static_cast<std::size_t>(r)].*member;
      if (static_cast<int>(c.size()) != n) throw ConfigError("classification loss: target length mismatch");
      std::copy(c.begin(), c.end(), w.begin() + static_cast<std::ptrdiff_t>(r) * n);
    }
    return ad::sum(ad::mul(ad::log_clamped(p, kLogFloor), Tensor::from(p.shape(), std::move(w))));
  };
  Tensor s = axis(px, &OneHotTargets::cx) + axis(py, &OneHotTargets::cy) + axis(pt, &OneHotTargets::ctheta);
  return ad::scale(s, -1.0 / b);
}

Tensor regression_loss(const Tensor& mean_x, const Tensor& mean_y, const Tensor& mean_t,
                       const std::vector<Offset>& gt, double alpha) {
  const int b = mean_x.dim(0);
  if (static_cast<int>(gt.size()) != b) throw ConfigError("regression loss: one target per row required");
  std::vector<double> gx(b), gy(b), gt_(b);
  for (int r = 0; r < b; ++r) {
    gx[r] = gt[r].dx;
    gy[r] = gt[r].dy;
    gt_[r] = gt[r].dtheta;
  }
  Tensor ex = mean_x - Tensor::from({b}, gx);
  Tensor ey = mean_y - Tensor::from({b}, gy);
  Tensor et = ad::scale(ad::wrap_angle(mean_t - Tensor::from({b}, gt_)), rad2deg(1.0));
  Tensor s = ad::sum(ad::square(ex)) + ad::sum(ad::square(ey)) + ad::scale(ad::sum(ad::square(et)), alpha);
  return ad::scale(s, 1.0 / b);
}

Tensor sequential_loss(const std::vector<Tensor>& poses, const std::vector<Tensor>& covs, const std::vector<Pose2>& gt,
                       double beta) {
  if (poses.empty() || poses.size() != covs.size() || poses.size() != gt.size())
    throw ConfigError("sequential loss needs equally long, non-empty sequences");
  Tensor total;
  for (std::size_t t = 0; t < poses.size(); ++t) {
    require_well_conditioned(to_matrix(covs[t]), "sequential loss");
    Tensor e = ad::stack({ad::index(poses[t], 0) - gt[t].x, ad::index(poses[t], 1) - gt[t].y,
                          ad::wrap_angle(ad::index(poses[t], 2) - gt[t].theta)},
                         {3, 1});
    Tensor maha = ad::reshape(ad::matmul(ad::transpose(e), ad::matmul(ad::inverse(covs[t]), e)), {1});
    Tensor term = maha + ad::scale(ad::reshape(ad::det(covs[t]), {1}), beta);
    total = total.defined() ? total + term : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(poses.size()));
}

}  // namespace radloc
