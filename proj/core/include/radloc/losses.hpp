#pragma once

// Training objectives: per-step classification and regression on the offset
// distribution, and the sequential negative log-likelihood of filter output.

#include <map>
#include <string>
#include <vector>

#include "radloc/autodiff.hpp"
#include "radloc/measnet.hpp"
#include "radloc/se2.hpp"

namespace radloc {

struct LossValue {
  double value = 0.0;
  std::map<std::string, double> breakdown;
};

struct LossWeights {
  double alpha = 1.0;  // angle weight of the regression loss, angle in degrees
  double beta = 0.01;  // determinant weight of the sequential loss
};

/// Covariances whose condition number exceeds this are treated as singular.
inline constexpr double kMaxConditionNumber = 1e12;
/// Probability floor inside the cross-entropy log.
inline constexpr double kLogFloor = 1e-12;

LossValue loss_classification(const Marginals& m, const OneHotTargets& targets);
LossValue loss_regression(const Offset& est, const Offset& gt, double alpha);
/// (1/k) sum_t [ e^T S^-1 e + beta det S ],  e = (x - gx, y - gy, wrap(theta - gtheta)).
LossValue loss_sequential(const std::vector<Pose2>& est, const std::vector<Covariance3>& cov,
                          const std::vector<Pose2>& gt, double beta);

// Differentiable counterparts; batch losses are averaged over rows.

/// px, py, pt: [B, n_axis]
ad::Tensor classification_loss(const ad::Tensor& px, const ad::Tensor& py, const ad::Tensor& pt,
                               const std::vector<OneHotTargets>& targets);
/// mean_*: [B]
ad::Tensor regression_loss(const ad::Tensor& mean_x, const ad::Tensor& mean_y, const ad::Tensor& mean_t,
                           const std::vector<Offset>& gt, double alpha);
/// poses: [3] tensors, covs: [3, 3] tensors. Throws NumericalError on a
/// near-singular covariance.
ad::Tensor sequential_loss(const std::vector<ad::Tensor>& poses, const std::vector<ad::Tensor>& covs,
                           const std::vector<Pose2>& gt, double beta);

/// Throws NumericalError unless cov is symmetric positive definite with
/// condition number <= kMaxConditionNumber.
void require_well_conditioned(const Covariance3& cov, const char* what);

}  // namespace radloc
