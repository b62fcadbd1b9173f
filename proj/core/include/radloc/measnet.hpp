#pragma once

// Learnable cross-modal measurement model: radar masking, radar/map embedding,
// candidate warping, patch-based difference scoring and softmin normalization
// into a cost volume over the offset grid.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "radloc/autodiff.hpp"
#include "radloc/bev.hpp"
#include "radloc/se2.hpp"

namespace radloc {

enum class ArchProfile { kTiny, kPaper };

const char* profile_name(ArchProfile p);
ArchProfile parse_profile(const std::string& name);

struct ArchConfig {
  ArchProfile profile = ArchProfile::kTiny;
  /// U-Net encoder channel plan; one entry per pooling level.
  std::vector<int> widths;
  /// Strided Conv(., ., 4, 2, 1) + BN + ReLU blocks in the patch network.
  int patch_blocks = 2;
  /// Closing Conv(n, n, 4, 1, 0) + BN + ReLU (paper profile), otherwise the
  /// final map is averaged spatially.
  bool patch_valid_conv = false;
  /// When positive, the strided blocks run on each candidate slice separately
  /// with this many channels and share weights across candidates; a linear
  /// n x n layer then mixes the per-candidate scores. Zero means the blocks
  /// convolve all n candidate channels jointly.
  int patch_shared_channels = 0;

  static ArchConfig tiny();
  static ArchConfig paper();
  /// Side length the patch network accepts; 0 when any multiple of 4 works.
  int required_patch_size() const;
};

/// Image and grid knobs shared by every measurement.
struct MeasConfig {
  int rows = 64;
  int cols = 64;
  double resolution = 1.0;  // meters per pixel
  int patches = 2;          // k: the difference tensor is split into k x k patches
  double temperature = 1.0;
  GridLimits limits{6.0, 6.0, deg2rad(6.0)};
  GridResolution grid_resolution{2.0, 2.0, deg2rad(2.0)};
};

/// Grid, configuration and the cached warp taps for one MeasConfig.
class MeasurementSetup {
 public:
  explicit MeasurementSetup(const MeasConfig& cfg);

  const MeasConfig& config() const { return cfg_; }
  const OffsetGrid& grid() const { return grid_; }
  const std::shared_ptr<const ad::ResamplePlan>& warp_plan() const { return plan_; }

 private:
  MeasConfig cfg_;
  OffsetGrid grid_;
  std::shared_ptr<const ad::ResamplePlan> plan_;
};

/// All learnable tensors of the masking (m), radar (r), map (l) and patch (p)
/// networks plus batch-norm running statistics.
class ModelParams {
 public:
  ModelParams() = default;

  /// Fan-in scaled uniform initialization, deterministic in seed.
  static ModelParams init(const ArchConfig& arch, int n_candidates, std::uint64_t seed);

  const ArchConfig& arch() const { return arch_; }
  int n_candidates() const { return n_candidates_; }

  const ad::Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, ad::Tensor>>& params() const { return params_; }
  std::size_t parameter_count() const;

  /// Batch-norm running statistics; training-mode forward passes update them.
  ad::BatchNormStats& bn_stats(const std::string& layer) const;
  const std::map<std::string, ad::BatchNormStats>& all_bn_stats() const { return bn_; }

  void zero_grad() const;
  bool all_finite() const;
  /// Deep copy; the copy's tensors are independent leaves.
  ModelParams clone() const;

  /// Flat views used by optimizers and finite-difference checks.
  std::vector<double> flat_values() const;
  std::vector<double> flat_grads() const;
  void set_flat_values(const std::vector<double>& v);

  void add_param(const std::string& name, ad::Tensor t);
  void add_bn(const std::string& layer, int channels);

 private:
  ArchConfig arch_;
  int n_candidates_ = 0;
  std::vector<std::pair<std::string, ad::Tensor>> params_;
  std::map<std::string, std::size_t> index_;
  mutable std::map<std::string, ad::BatchNormStats> bn_;
};

/// Controls batch-norm behaviour of a forward pass.
struct ForwardMode {
  bool train_bn = false;       // batch statistics instead of running statistics
  bool update_bn_stats = false;  // update running statistics (training only)
};

// ---------------------------------------------------------- tensor-level API
// Inputs are [B, 1, H, W].

ad::Tensor mask_forward(const ModelParams& p, const ad::Tensor& radar);
ad::Tensor embed_radar_forward(const ModelParams& p, const ad::Tensor& masked_radar);
ad::Tensor embed_map_forward(const ModelParams& p, const ad::Tensor& map_crop);
/// delta[B, n, H, W] -> per-candidate difference scores [B, n].
ad::Tensor patch_scores_forward(const ModelParams& p, const ad::Tensor& delta, int k, ForwardMode mode);

/// Per-row results of the offset regression.
struct OffsetPosterior {
  ad::Tensor scores;  // [B, n]
  ad::Tensor volume;  // [B, n], grid enumeration order
  ad::Tensor px, py, pt;  // marginals [B, n_axis]
  ad::Tensor mean_x, mean_y, mean_t;  // expected offset [B]
  ad::Tensor var_x, var_y, var_t;  // floored variances about the means [B]
  ad::Tensor radar_embedding;  // [B, 1, H, W]
  ad::Tensor map_embedding;  // [B, 1, H, W], unwarped
};

/// Full differentiable pipeline from raw rasters to the offset distribution.
OffsetPosterior infer_offsets(const ModelParams& p, const ad::Tensor& radar, const ad::Tensor& map_crop,
                              const MeasurementSetup& setup, ForwardMode mode);

/// Robot-frame variances rotated into the world frame by heading:
/// [[R diag(vx, vy) R^T, 0], [0, vtheta]] as a [3, 3] tensor.
ad::Tensor world_covariance(const ad::Tensor& var_x, const ad::Tensor& var_y, const ad::Tensor& var_t,
                            const ad::Tensor& heading);

/// Per-axis variance floor (resolution / 4)^2.
std::array<double, 3> variance_floor(const OffsetGrid& grid);

// ----------------------------------------------------------- value-level API

struct CostVolume {
  std::vector<double> values;  // n_x * n_y * n_theta, grid enumeration order
  std::array<int, 3> counts{};

  double at(int i, int j, int k) const {
    return values[(static_cast<std::size_t>(i) * counts[1] + j) * counts[2] + k];
  }
};

struct Marginals {
  std::vector<double> px;
  std::vector<double> py;
  std::vector<double> ptheta;
};

struct Measurement {
  Pose2 z;
  Covariance3 sigma_o = Covariance3::Identity();
  CostVolume volume;
  Offset offset;  // the regressed robot-frame offset
};

BevImage mask_radar(const ModelParams& p, const BevImage& radar);
Image embed_radar(const ModelParams& p, const Image& masked_radar);
Image embed_map(const ModelParams& p, const Image& map_crop);
/// delta[m] = radar_embedding - warped[m]
std::vector<Image> difference_tensor(const Image& radar_embedding, const std::vector<Image>& warped);
std::vector<double> patch_scores(const ModelParams& p, const std::vector<Image>& delta, int k);
CostVolume softmin_normalize(const std::vector<double>& scores, double temperature, const OffsetGrid& grid);
Marginals marginals(const CostVolume& v);
Offset expected_offset(const Marginals& m, const OffsetGrid& grid);
Covariance3 measurement_covariance(const Marginals& m, const OffsetGrid& grid, double heading);

/// crop -> mask -> embed -> warp -> difference -> patch scores -> softmin ->
/// marginals -> expected offset, then z = predicted [+] offset.
Measurement measure(const ModelParams& p, const BevImage& radar, const GridMap& map, const Pose2& predicted,
                    const MeasurementSetup& setup);

struct CoarseResult {
  Offset offset;
  std::size_t best_tile = 0;
  std::vector<Offset> tile_centers;
  std::vector<Offset> candidates;  // tile center [+] sub-space estimate
  std::vector<double> similarity;  // mean |E_r - warped E_l|, lower is better
};

/// Large-offset search: tiles the big space with sub-spaces the size of the
/// measurement grid, regresses an offset inside each and keeps the candidate
/// whose warped map embedding is closest to the radar embedding. Throws
/// ConfigError unless big_limits is an odd multiple of the grid limits.
CoarseResult coarse_localize(const ModelParams& p, const BevImage& radar, const GridMap& map, const Pose2& predicted,
                             const GridLimits& big_limits, const MeasurementSetup& setup);

/// Tile centers for coarse_localize, in (x, y, theta) row-major order.
std::vector<Offset> coarse_tile_centers(const GridLimits& big_limits, const GridLimits& sub_limits);

// ------------------------------------------------------------- checkpoints
// <dir>/manifest.json + <dir>/tensors.bin (float32).

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const ModelParams& p, const MeasConfig& cfg, const std::filesystem::path& dir);

struct LoadedCheckpoint {
  ModelParams params;
  MeasConfig config;
};

/// Rejects unknown format versions and tensors whose shapes disagree with the
/// manifest's architecture. When expected_profile is set it must match too.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, const ArchProfile* expected_profile = nullptr);

}  // namespace radloc
