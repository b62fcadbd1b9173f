#include "radloc/measnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "radloc/error.hpp"
#include "radloc/io.hpp"

namespace radloc {

namespace fs = std::filesystem;
using ad::Tensor;

const char* profile_name(ArchProfile p) { return p == ArchProfile::kPaper ? "paper" : "tiny"; }

ArchProfile parse_profile(const std::string& name) {
  if (name == "tiny") return ArchProfile::kTiny;
  if (name == "paper" || name == "paper-arch") return ArchProfile::kPaper;
  throw ConfigError("unknown architecture profile '" + name + "' (expected tiny or paper)");
}

ArchConfig ArchConfig::tiny() {
  ArchConfig a;
  a.profile = ArchProfile::kTiny;
  a.widths = {4, 8};
  a.patch_blocks = 2;
  a.patch_valid_conv = false;
  a.patch_shared_channels = 8;
  return a;
}

ArchConfig ArchConfig::paper() {
  ArchConfig a;
  a.profile = ArchProfile::kPaper;
  a.widths = {8, 16, 32, 64};
  a.patch_blocks = 3;
  a.patch_valid_conv = true;
  a.patch_shared_channels = 0;
  return a;
}

int ArchConfig::required_patch_size() const { return patch_valid_conv ? (4 << patch_blocks) : 0; }

static bool same_arch(const ArchConfig& a, const ArchConfig& b) {
  return a.profile == b.profile && a.widths == b.widths && a.patch_blocks == b.patch_blocks &&
         a.patch_valid_conv == b.patch_valid_conv && a.patch_shared_channels == b.patch_shared_channels;
}

static ArchConfig canonical(ArchProfile p) { return p == ArchProfile::kPaper ? ArchConfig::paper() : ArchConfig::tiny(); }

MeasurementSetup::MeasurementSetup(const MeasConfig& cfg)
    : cfg_(cfg), grid_(OffsetGrid::build(cfg.limits, cfg.grid_resolution)) {
  if (cfg.rows <= 0 || cfg.cols <= 0 || cfg.rows % 2 || cfg.cols % 2)
    throw ConfigError("image size must be positive and even");
  if (!(cfg.resolution > 0.0)) throw ConfigError("image resolution must be positive");
  if (cfg.patches <= 0 || cfg.rows % cfg.patches || cfg.cols % cfg.patches)
    throw ConfigError("image size must be divisible by the patch count k");
  if (!(cfg.temperature > 0.0)) throw ConfigError("softmin temperature must be positive");
  plan_ = make_warp_plan(cfg.rows, cfg.cols, grid_.candidates(), cfg.resolution);
}

// ------------------------------------------------------------------ params

namespace {

class Init {
 public:
  explicit Init(std::uint64_t seed) : gen_(seed) {}
  // 53-bit uniform in [-b, b); independent of the standard library's distributions.
  double uniform(double b) { return (2.0 * static_cast<double>(gen_() >> 11) * 0x1.0p-53 - 1.0) * b; }

 private:
  std::mt19937_64 gen_;
};

void add_conv(ModelParams& p, Init& rng, const std::string& name, int cout, int cin, int k) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  std::vector<double> w(static_cast<std::size_t>(cout) * cin * k * k), b(static_cast<std::size_t>(cout));
  for (double& v : w) v = rng.uniform(bound);
  for (double& v : b) v = rng.uniform(bound);
  p.add_param(name + ".w", Tensor::from({cout, cin, k, k}, std::move(w), true));
  p.add_param(name + ".b", Tensor::from({cout}, std::move(b), true));
}

void add_bn_layer(ModelParams& p, const std::string& name, int c) {
  p.add_param(name + ".gamma", Tensor::full({c}, 1.0, true));
  p.add_param(name + ".beta", Tensor::zeros({c}, true));
  p.add_bn(name, c);
}

void add_dnet(ModelParams& p, Init& rng, const std::string& name, int cin, int cmid, int cout) {
  add_conv(p, rng, name + ".c1", cmid, cin, 3);
  add_conv(p, rng, name + ".c2", cout, cmid, 3);
}

void add_unet(ModelParams& p, Init& rng, const std::string& net, const std::vector<int>& w) {
  const int levels = static_cast<int>(w.size());
  int in = 1;
  for (int l = 0; l < levels; ++l) {
    add_dnet(p, rng, net + ".enc" + std::to_string(l), in, w[l], w[l]);
    in = w[l];
  }
  add_dnet(p, rng, net + ".mid", in, in, in);
  int prev = in;
  for (int l = levels - 1; l >= 0; --l) {
    const int out = l > 0 ? w[l - 1] : w[0];
    add_dnet(p, rng, net + ".dec" + std::to_string(l), prev + w[l], w[l], out);
    prev = out;
  }
}

void require_finite(const Tensor& t, const std::string& layer) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericalError("non-finite activation in layer " + layer);
}

Tensor conv(const ModelParams& p, const Tensor& x, const std::string& name, int stride, int pad) {
  Tensor y = ad::conv2d(x, p.param(name + ".w"), p.param(name + ".b"), stride, pad);
  require_finite(y, name);
  return y;
}

Tensor bn(const ModelParams& p, const Tensor& x, const std::string& name, ForwardMode mode) {
  ad::BatchNormStats* stats = (!mode.train_bn || mode.update_bn_stats) ? &p.bn_stats(name) : nullptr;
  Tensor y = ad::batch_norm(x, p.param(name + ".gamma"), p.param(name + ".beta"), stats, mode.train_bn);
  require_finite(y, name);
  return y;
}

Tensor in_relu(const Tensor& x) { return ad::relu(ad::instance_norm(x)); }

Tensor dnet(const ModelParams& p, const Tensor& x, const std::string& name) {
  Tensor h = in_relu(conv(p, x, name + ".c1", 1, 1));
  return in_relu(conv(p, h, name + ".c2", 1, 1));
}

Tensor unet(const ModelParams& p, const Tensor& x, const std::string& net) {
  const auto& w = p.arch().widths;
  const int levels = static_cast<int>(w.size());
  const int div = 1 << levels;
  if (x.dim(2) % div || x.dim(3) % div)
    throw ConfigError("input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                      " is not divisible by " + std::to_string(div) + " as the U-Net depth requires");
  std::vector<Tensor> skips;
  Tensor h = x;
  for (int l = 0; l < levels; ++l) {
    h = dnet(p, h, net + ".enc" + std::to_string(l));
    skips.push_back(h);
    h = ad::max_pool2x2(h);
  }
  h = dnet(p, h, net + ".mid");
  for (int l = levels - 1; l >= 0; --l) {
    h = ad::concat_channels(ad::upsample_nearest2x(h), skips[static_cast<std::size_t>(l)]);
    h = dnet(p, h, net + ".dec" + std::to_string(l));
  }
  return h;
}

Tensor image_tensor(const Image& im) { return Tensor::from({1, 1, im.rows, im.cols}, im.px); }

Image tensor_image(const Tensor& t, int channel = 0) {
  const int rows = t.dim(2), cols = t.dim(3);
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  Image out = Image::zeros(rows, cols);
  std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(channel * plane), plane, out.px.begin());
  return out;
}

}  // namespace

ModelParams ModelParams::init(const ArchConfig& arch, int n_candidates, std::uint64_t seed) {
  if (arch.widths.empty()) throw ConfigError("architecture needs at least one U-Net level");
  if (n_candidates <= 0) throw ConfigError("candidate count must be positive");
  if (arch.patch_blocks < 1) throw ConfigError("patch network needs at least one strided block");
  ModelParams p;
  p.arch_ = arch;
  p.n_candidates_ = n_candidates;
  Init rng(seed);
  const int w0 = arch.widths.front();
  for (const char* net : {"m", "r", "l"}) add_unet(p, rng, net, arch.widths);
  add_conv(p, rng, "m.head", 1, w0, 1);
  add_conv(p, rng, "r.head", 1, w0, 3);
  add_conv(p, rng, "l.head", 1, w0, 3);

  const int n = n_candidates;
  if (arch.patch_shared_channels > 0) {
    const int c = arch.patch_shared_channels;
    for (int b = 0; b < arch.patch_blocks; ++b) {
      const std::string name = "p.block" + std::to_string(b);
      add_conv(p, rng, name + ".conv", c, b == 0 ? 1 : c, 4);
      add_bn_layer(p, name + ".bn", c);
    }
    add_conv(p, rng, "p.head", 1, c, 1);
    // Mixing starts at the identity so each score initially reads its own slice.
    std::vector<double> mix(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) mix[static_cast<std::size_t>(i) * n + i] = 1.0;
    p.add_param("p.mix.w", Tensor::from({n, n}, std::move(mix), true));
    p.add_param("p.mix.b", Tensor::zeros({1, n}, true));
  } else {
    for (int b = 0; b < arch.patch_blocks; ++b) {
      const std::string name = "p.block" + std::to_string(b);
      add_conv(p, rng, name + ".conv", n, n, 4);
      add_bn_layer(p, name + ".bn", n);
    }
    if (arch.patch_valid_conv) {
      add_conv(p, rng, "p.final.conv", n, n, 4);
      add_bn_layer(p, "p.final.bn", n);
    }
  }
  return p;
}

void ModelParams::add_param(const std::string& name, Tensor t) {
  if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
  index_[name] = params_.size();
  params_.emplace_back(name, std::move(t));
}

void ModelParams::add_bn(const std::string& layer, int channels) {
  bn_[layer] = ad::BatchNormStats{std::vector<double>(static_cast<std::size_t>(channels), 0.0),
                                  std::vector<double>(static_cast<std::size_t>(channels), 1.0)};
}

const Tensor& ModelParams::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return params_[it->second].second;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

ad::BatchNormStats& ModelParams::bn_stats(const std::string& layer) const {
  auto it = bn_.find(layer);
  if (it == bn_.end()) throw ConfigError("unknown batch-norm layer " + layer);
  return it->second;
}

void ModelParams::zero_grad() const {
  for (const auto& [_, t] : params_) t.zero_grad();
}

bool ModelParams::all_finite() const {
  for (const auto& [_, t] : params_)
    for (double v : t.data())
      if (!std::isfinite(v)) return false;
  for (const auto& [_, s] : bn_) {
    for (double v : s.mean)
      if (!std::isfinite(v)) return false;
    for (double v : s.var)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

ModelParams ModelParams::clone() const {
  ModelParams c;
  c.arch_ = arch_;
  c.n_candidates_ = n_candidates_;
  for (const auto& [name, t] : params_)
    c.add_param(name, Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true));
  c.bn_ = bn_;
  return c;
}

std::vector<double> ModelParams::flat_values() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& [_, t] : params_) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

std::vector<double> ModelParams::flat_grads() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& [_, t] : params_) {
    const auto g = t.grad();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

void ModelParams::set_flat_values(const std::vector<double>& v) {
  if (v.size() != parameter_count()) throw ConfigError("flat parameter vector has the wrong length");
  std::size_t off = 0;
  for (auto& [_, t] : params_) {
    auto d = t.mutable_data();
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(off), d.size(), d.begin());
    off += d.size();
  }
}

// ------------------------------------------------------------ tensor level

Tensor mask_forward(const ModelParams& p, const Tensor& radar) {
  Tensor mask = ad::sigmoid(conv(p, unet(p, radar, "m"), "m.head", 1, 0));
  Tensor out = ad::mul(radar, mask);
  require_finite(out, "m.gate");
  return out;
}

static Tensor embed(const ModelParams& p, const Tensor& x, const std::string& net) {
  Tensor out = in_relu(conv(p, unet(p, x, net), net + ".head", 1, 1));
  require_finite(out, net + ".head");
  return out;
}

Tensor embed_radar_forward(const ModelParams& p, const Tensor& masked_radar) { return embed(p, masked_radar, "r"); }
Tensor embed_map_forward(const ModelParams& p, const Tensor& map_crop) { return embed(p, map_crop, "l"); }

Tensor patch_scores_forward(const ModelParams& p, const Tensor& delta, int k, ForwardMode mode) {
  if (delta.rank() != 4) throw ConfigError("difference tensor must be [B, n, H, W]");
  const int b = delta.dim(0), n = delta.dim(1), h = delta.dim(2), w = delta.dim(3);
  if (n != p.n_candidates())
    throw ConfigError("difference tensor has " + std::to_string(n) + " candidates, model expects " +
                      std::to_string(p.n_candidates()));
  if (k <= 0 || h % k || w % k)
    throw ConfigError("field " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible into " +
                      std::to_string(k) + "x" + std::to_string(k) + " patches");
  const int side = h / k;
  const ArchConfig& arch = p.arch();
  const int need = arch.required_patch_size();
  if (h / k != w / k) throw ConfigError("patches must be square");
  if (need > 0 && side != need)
    throw ConfigError("patch side " + std::to_string(side) + " must equal " + std::to_string(need) +
                      " for the " + profile_name(arch.profile) + " profile");
  if (side % (1 << arch.patch_blocks))
    throw ConfigError("patch side " + std::to_string(side) + " must be divisible by " +
                      std::to_string(1 << arch.patch_blocks));

  Tensor x = ad::patchify(delta, k);  // [B k^2, n, s, s]
  const int np = b * k * k;
  if (arch.patch_shared_channels > 0) {
    x = ad::reshape(x, {np * n, 1, side, side});
    for (int i = 0; i < arch.patch_blocks; ++i) {
      const std::string name = "p.block" + std::to_string(i);
      x = ad::relu(bn(p, conv(p, x, name + ".conv", 2, 1), name + ".bn", mode));
    }
    x = conv(p, x, "p.head", 1, 0);
    x = ad::reshape(ad::mean_spatial(x), {np, n});
    Tensor ones = Tensor::full({np, 1}, 1.0);
    x = ad::matmul(x, ad::transpose(p.param("p.mix.w"))) + ad::matmul(ones, p.param("p.mix.b"));
  } else {
    for (int i = 0; i < arch.patch_blocks; ++i) {
      const std::string name = "p.block" + std::to_string(i);
      x = ad::relu(bn(p, conv(p, x, name + ".conv", 2, 1), name + ".bn", mode));
    }
    if (arch.patch_valid_conv) x = ad::relu(bn(p, conv(p, x, "p.final.conv", 1, 0), "p.final.bn", mode));
    x = ad::mean_spatial(x);
  }
  require_finite(x, "p.out");
  return ad::group_mean(x, k * k);
}

std::array<double, 3> variance_floor(const OffsetGrid& grid) {
  const auto& r = grid.resolution();
  return {r.x * r.x / 16.0, r.y * r.y / 16.0, r.theta * r.theta / 16.0};
}

OffsetPosterior infer_offsets(const ModelParams& p, const Tensor& radar, const Tensor& map_crop,
                              const MeasurementSetup& setup, ForwardMode mode) {
  const MeasConfig& cfg = setup.config();
  const OffsetGrid& grid = setup.grid();
  if (radar.rank() != 4 || radar.dim(1) != 1 || radar.dim(2) != cfg.rows || radar.dim(3) != cfg.cols ||
      map_crop.shape() != radar.shape())
    throw ConfigError("radar " + ad::shape_str(radar.shape()) + " and map " + ad::shape_str(map_crop.shape()) +
                      " must both be [B, 1, " + std::to_string(cfg.rows) + ", " + std::to_string(cfg.cols) + "]");
  OffsetPosterior o;
  o.radar_embedding = embed_radar_forward(p, mask_forward(p, radar));
  o.map_embedding = embed_map_forward(p, map_crop);
  Tensor warped = ad::resample(o.map_embedding, setup.warp_plan());
  Tensor delta = ad::sub_broadcast_channels(o.radar_embedding, warped);
  o.scores = patch_scores_forward(p, delta, cfg.patches, mode);
  o.volume = ad::softmin_rows(o.scores, cfg.temperature);
  const auto [nx, ny, nt] = grid.counts();
  o.px = ad::axis_marginal(o.volume, nx, ny, nt, 0);
  o.py = ad::axis_marginal(o.volume, nx, ny, nt, 1);
  o.pt = ad::axis_marginal(o.volume, nx, ny, nt, 2);
  const auto floor = variance_floor(grid);
  auto moments = [&](const Tensor& m, Axis a, double fl, Tensor& mean_out, Tensor& var_out) {
    const auto& vals = grid.axis_values(a);
    std::vector<double> sq(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) sq[i] = vals[i] * vals[i];
    mean_out = ad::row_dot(m, vals);
    var_out = ad::clamp_min(ad::row_dot(m, sq) - ad::square(mean_out), fl);
  };
  moments(o.px, Axis::kX, floor[0], o.mean_x, o.var_x);
  moments(o.py, Axis::kY, floor[1], o.mean_y, o.var_y);
  moments(o.pt, Axis::kTheta, floor[2], o.mean_t, o.var_t);
  return o;
}

Tensor world_covariance(const Tensor& var_x, const Tensor& var_y, const Tensor& var_t, const Tensor& heading) {
  Tensor c = ad::cos(heading), s = ad::sin(heading);
  Tensor cc = c * c, ss = s * s;
  Tensor cxx = cc * var_x + ss * var_y;
  Tensor cyy = ss * var_x + cc * var_y;
  Tensor cxy = c * s * (var_x - var_y);
  Tensor zero = Tensor::scalar(0.0);
  return ad::stack({cxx, cxy, zero, cxy, cyy, zero, zero, zero, var_t}, {3, 3});
}

// ------------------------------------------------------------- value level

BevImage mask_radar(const ModelParams& p, const BevImage& radar) {
  ad::NoGradGuard ng;
  return {tensor_image(mask_forward(p, image_tensor(radar.image))), radar.resolution, radar.center};
}

Image embed_radar(const ModelParams& p, const Image& masked_radar) {
  ad::NoGradGuard ng;
  return tensor_image(embed_radar_forward(p, image_tensor(masked_radar)));
}

Image embed_map(const ModelParams& p, const Image& map_crop) {
  ad::NoGradGuard ng;
  return tensor_image(embed_map_forward(p, image_tensor(map_crop)));
}

std::vector<Image> difference_tensor(const Image& radar_embedding, const std::vector<Image>& warped) {
  std::vector<Image> out;
  out.reserve(warped.size());
  for (std::size_t m = 0; m < warped.size(); ++m) {
    const Image& w = warped[m];
    if (w.rows != radar_embedding.rows || w.cols != radar_embedding.cols)
      throw ConfigError("difference_tensor: slice " + std::to_string(m) + " has a different shape");
    Image d = Image::zeros(w.rows, w.cols);
    for (std::size_t i = 0; i < d.px.size(); ++i) d.px[i] = radar_embedding.px[i] - w.px[i];
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<double> patch_scores(const ModelParams& p, const std::vector<Image>& delta, int k) {
  if (delta.empty()) throw ConfigError("patch_scores: empty difference tensor");
  const int rows = delta[0].rows, cols = delta[0].cols;
  const int n = static_cast<int>(delta.size());
  std::vector<double> buf;
  buf.reserve(static_cast<std::size_t>(n) * rows * cols);
  for (const Image& d : delta) {
    if (d.rows != rows || d.cols != cols) throw ConfigError("patch_scores: slices differ in shape");
    buf.insert(buf.end(), d.px.begin(), d.px.end());
  }
  ad::NoGradGuard ng;
  Tensor s = patch_scores_forward(p, Tensor::from({1, n, rows, cols}, std::move(buf)), k, ForwardMode{});
  return {s.data().begin(), s.data().end()};
}

CostVolume softmin_normalize(const std::vector<double>& scores, double temperature, const OffsetGrid& grid) {
  if (scores.size() != grid.size())
    throw ConfigError("softmin_normalize: " + std::to_string(scores.size()) + " scores for " +
                      std::to_string(grid.size()) + " candidates");
  for (double v : scores)
    if (!std::isfinite(v)) throw NumericalError("softmin_normalize: non-finite difference score");
  ad::NoGradGuard ng;
  Tensor v = ad::softmin_rows(Tensor::from({1, static_cast<int>(scores.size())}, scores), temperature);
  return {{v.data().begin(), v.data().end()}, grid.counts()};
}

Marginals marginals(const CostVolume& v) {
  const auto [nx, ny, nt] = v.counts;
  Marginals m{std::vector<double>(nx, 0.0), std::vector<double>(ny, 0.0), std::vector<double>(nt, 0.0)};
  std::size_t idx = 0;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j)
      for (int k = 0; k < nt; ++k, ++idx) {
        m.px[i] += v.values[idx];
        m.py[j] += v.values[idx];
        m.ptheta[k] += v.values[idx];
      }
  return m;
}

namespace {

double expectation(const std::vector<double>& p, const std::vector<double>& vals, bool square) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * (square ? vals[i] * vals[i] : vals[i]);
  return s;
}

void check_marginal(const std::vector<double>& p, const OffsetGrid& grid, Axis a) {
  if (static_cast<int>(p.size()) != grid.count(a)) throw ConfigError("marginal length does not match the grid");
}

}  // namespace

Offset expected_offset(const Marginals& m, const OffsetGrid& grid) {
  check_marginal(m.px, grid, Axis::kX);
  check_marginal(m.py, grid, Axis::kY);
  check_marginal(m.ptheta, grid, Axis::kTheta);
  return {expectation(m.px, grid.axis_values(Axis::kX), false), expectation(m.py, grid.axis_values(Axis::kY), false),
          expectation(m.ptheta, grid.axis_values(Axis::kTheta), false)};
}

Covariance3 measurement_covariance(const Marginals& m, const OffsetGrid& grid, double heading) {
  const Offset mu = expected_offset(m, grid);
  const auto floor = variance_floor(grid);
  const double vx = std::max(expectation(m.px, grid.axis_values(Axis::kX), true) - mu.dx * mu.dx, floor[0]);
  const double vy = std::max(expectation(m.py, grid.axis_values(Axis::kY), true) - mu.dy * mu.dy, floor[1]);
  const double vt = std::max(expectation(m.ptheta, grid.axis_values(Axis::kTheta), true) - mu.dtheta * mu.dtheta, floor[2]);
  const double c = std::cos(heading), s = std::sin(heading);
  Covariance3 cov = Covariance3::Zero();
  cov(0, 0) = c * c * vx + s * s * vy;
  cov(1, 1) = s * s * vx + c * c * vy;
  cov(0, 1) = cov(1, 0) = c * s * (vx - vy);
  cov(2, 2) = vt;
  return cov;
}

namespace {

void check_radar(const BevImage& radar, const MeasConfig& cfg) {
  if (radar.image.rows != cfg.rows || radar.image.cols != cfg.cols)
    throw ConfigError("radar raster is " + std::to_string(radar.image.rows) + "x" + std::to_string(radar.image.cols) +
                      ", configuration expects " + std::to_string(cfg.rows) + "x" + std::to_string(cfg.cols));
}

}  // namespace

Measurement measure(const ModelParams& p, const BevImage& radar, const GridMap& map, const Pose2& predicted,
                    const MeasurementSetup& setup) {
  const MeasConfig& cfg = setup.config();
  check_radar(radar, cfg);
  if (!map.contains(predicted.x, predicted.y))
    throw RangeError("predicted pose (" + io::fmt_double(predicted.x) + ", " + io::fmt_double(predicted.y) +
                     ") is outside the map");
  const BevImage crop = crop_at(map, predicted, cfg.rows, cfg.cols, cfg.resolution);
  ad::NoGradGuard ng;
  const OffsetPosterior o = infer_offsets(p, image_tensor(radar.image), image_tensor(crop.image), setup, ForwardMode{});
  Measurement m;
  m.volume = {{o.volume.data().begin(), o.volume.data().end()}, setup.grid().counts()};
  m.offset = {o.mean_x.item(), o.mean_y.item(), o.mean_t.item()};
  m.z = boxplus(predicted, m.offset);
  Tensor cov = world_covariance(o.var_x, o.var_y, o.var_t, Tensor::scalar(predicted.theta));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m.sigma_o(r, c) = cov.at(static_cast<std::size_t>(r) * 3 + c);
  return m;
}

std::vector<Offset> coarse_tile_centers(const GridLimits& big, const GridLimits& sub) {
  auto tiles = [](double b, double s, const char* axis) {
    const double ratio = b / s;
    const double r = std::round(ratio);
    if (!(s > 0.0) || r < 1.0 || std::abs(ratio - r) > 1e-9 * r || static_cast<long>(r) % 2 == 0)
      throw ConfigError(std::string("coarse search: ") + axis + " limit " + io::fmt_double(b) +
                        " is not an odd multiple of the sub-space limit " + io::fmt_double(s));
    std::vector<double> c;
    const int half = static_cast<int>(r) / 2;
    for (int i = -half; i <= half; ++i) c.push_back(2.0 * s * i);
    return c;
  };
  const auto cx = tiles(big.x, sub.x, "x"), cy = tiles(big.y, sub.y, "y"), ct = tiles(big.theta, sub.theta, "theta");
  std::vector<Offset> out;
  for (double x : cx)
    for (double y : cy)
      for (double t : ct) out.push_back({x, y, t});
  return out;
}

CoarseResult coarse_localize(const ModelParams& p, const BevImage& radar, const GridMap& map, const Pose2& predicted,
                             const GridLimits& big_limits, const MeasurementSetup& setup) {
  const MeasConfig& cfg = setup.config();
  check_radar(radar, cfg);
  CoarseResult res;
  res.tile_centers = coarse_tile_centers(big_limits, cfg.limits);
  const std::size_t nt = res.tile_centers.size();
  res.candidates.resize(nt);
  res.similarity.resize(nt);

  ad::NoGradGuard ng;
  const Tensor radar_t = image_tensor(radar.image);
  const Tensor er = embed_radar_forward(p, mask_forward(p, radar_t));
  for (std::size_t t = 0; t < nt; ++t) {
    const Offset& c = res.tile_centers[t];
    const BevImage crop = crop_at(map, boxplus(predicted, c), cfg.rows, cfg.cols, cfg.resolution);
    const OffsetPosterior o = infer_offsets(p, radar_t, image_tensor(crop.image), setup, ForwardMode{});
    const Offset local{o.mean_x.item(), o.mean_y.item(), o.mean_t.item()};
    res.candidates[t] = compose(c, local);
    // the map embedding as seen from the candidate; re-cropping instead of
    // warping avoids the empty border a warp leaves, which grows with |local|
    const BevImage at = crop_at(map, boxplus(predicted, res.candidates[t]), cfg.rows, cfg.cols, cfg.resolution);
    const Tensor el = embed_map_forward(p, image_tensor(at.image));
    double s = 0.0;
    for (std::size_t i = 0; i < el.numel(); ++i) s += std::abs(er.at(i) - el.at(i));
    res.similarity[t] = s / static_cast<double>(el.numel());
  }
  res.best_tile = static_cast<std::size_t>(
      std::min_element(res.similarity.begin(), res.similarity.end()) - res.similarity.begin());
  res.offset = res.candidates[res.best_tile];
  return res;
}

// ------------------------------------------------------------- checkpoints

void save_checkpoint(const ModelParams& p, const MeasConfig& cfg, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  const ArchConfig& a = p.arch();
  io::json m;
  m["format_version"] = kCheckpointFormatVersion;
  m["profile"] = profile_name(a.profile);
  m["architecture"] = {{"widths", a.widths},
                       {"patch_blocks", a.patch_blocks},
                       {"patch_valid_conv", a.patch_valid_conv},
                       {"patch_shared_channels", a.patch_shared_channels},
                       {"n_candidates", p.n_candidates()}};
  m["grid"] = {{"limit_x_m", cfg.limits.x},
               {"limit_y_m", cfg.limits.y},
               {"limit_theta_rad", cfg.limits.theta},
               {"res_x_m", cfg.grid_resolution.x},
               {"res_y_m", cfg.grid_resolution.y},
               {"res_theta_rad", cfg.grid_resolution.theta}};
  m["image"] = {{"rows", cfg.rows},
                {"cols", cfg.cols},
                {"resolution_m_per_px", cfg.resolution},
                {"patches", cfg.patches},
                {"temperature", cfg.temperature}};
  std::vector<double> payload;
  io::json tensors = io::json::array();
  for (const auto& [name, t] : p.params()) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    payload.insert(payload.end(), t.data().begin(), t.data().end());
  }
  io::json bn = io::json::array();
  for (const auto& [name, s] : p.all_bn_stats()) {
    bn.push_back({{"name", name}, {"channels", s.mean.size()}, {"offset", payload.size()}});
    payload.insert(payload.end(), s.mean.begin(), s.mean.end());
    payload.insert(payload.end(), s.var.begin(), s.var.end());
  }
  m["tensors"] = tensors;
  m["batch_norm"] = bn;
  m["payload"] = {{"file", "tensors.bin"}, {"dtype", "float32"}, {"count", payload.size()}};
  io::write_f32(dir / "tensors.bin", payload);
  io::write_json(dir / "manifest.json", m);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir, const ArchProfile* expected_profile) {
  const io::json m = io::read_json(dir / "manifest.json");
  auto bad = [&](const std::string& msg) { return ConfigError("checkpoint " + dir.string() + ": " + msg); };
  try {
    const int version = m.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) throw bad("unsupported format_version " + std::to_string(version));
    const ArchProfile profile = parse_profile(m.at("profile").get<std::string>());
    if (expected_profile && *expected_profile != profile)
      throw bad(std::string("profile is ") + profile_name(profile) + ", expected " + profile_name(*expected_profile));
    const io::json& aj = m.at("architecture");
    ArchConfig arch;
    arch.profile = profile;
    arch.widths = aj.at("widths").get<std::vector<int>>();
    arch.patch_blocks = aj.at("patch_blocks").get<int>();
    arch.patch_valid_conv = aj.at("patch_valid_conv").get<bool>();
    arch.patch_shared_channels = aj.at("patch_shared_channels").get<int>();
    if (!same_arch(arch, canonical(profile)))
      throw bad(std::string("architecture does not match the ") + profile_name(profile) + " profile");

    LoadedCheckpoint out;
    const io::json& g = m.at("grid");
    out.config.limits = {g.at("limit_x_m").get<double>(), g.at("limit_y_m").get<double>(),
                         g.at("limit_theta_rad").get<double>()};
    out.config.grid_resolution = {g.at("res_x_m").get<double>(), g.at("res_y_m").get<double>(),
                                  g.at("res_theta_rad").get<double>()};
    const io::json& im = m.at("image");
    out.config.rows = im.at("rows").get<int>();
    out.config.cols = im.at("cols").get<int>();
    out.config.resolution = im.at("resolution_m_per_px").get<double>();
    out.config.patches = im.at("patches").get<int>();
    out.config.temperature = im.at("temperature").get<double>();

    const int n = aj.at("n_candidates").get<int>();
    const OffsetGrid grid = OffsetGrid::build(out.config.limits, out.config.grid_resolution);
    if (static_cast<std::size_t>(n) != grid.size())
      throw bad("model has " + std::to_string(n) + " candidates but the grid has " + std::to_string(grid.size()));

    out.params = ModelParams::init(arch, n, 0);
    const std::size_t count = m.at("payload").at("count").get<std::size_t>();
    const std::vector<double> payload = io::read_f32(dir / "tensors.bin", count);

    const io::json& tj = m.at("tensors");
    if (tj.size() != out.params.params().size()) throw bad("tensor count does not match the architecture");
    for (const io::json& e : tj) {
      const std::string name = e.at("name").get<std::string>();
      if (!out.params.has_param(name)) throw bad("unexpected tensor " + name);
      Tensor t = out.params.param(name);
      if (e.at("shape").get<ad::Shape>() != t.shape())
        throw bad("tensor " + name + " has shape " + e.at("shape").dump() + ", architecture needs " +
                  ad::shape_str(t.shape()));
      const std::size_t off = e.at("offset").get<std::size_t>();
      if (off + t.numel() > payload.size()) throw bad("tensor " + name + " runs past the payload");
      std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(off), t.numel(), t.mutable_data().begin());
    }
    const io::json& bj = m.at("batch_norm");
    if (bj.size() != out.params.all_bn_stats().size()) throw bad("batch-norm layer count does not match");
    for (const io::json& e : bj) {
      const std::string name = e.at("name").get<std::string>();
      if (!out.params.all_bn_stats().count(name)) throw bad("unexpected batch-norm layer " + name);
      ad::BatchNormStats& s = out.params.bn_stats(name);
      const std::size_t c = e.at("channels").get<std::size_t>();
      const std::size_t off = e.at("offset").get<std::size_t>();
      if (c != s.mean.size()) throw bad("batch-norm layer " + name + " has the wrong channel count");
      if (off + 2 * c > payload.size()) throw bad("batch-norm layer " + name + " runs past the payload");
      std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(off), c, s.mean.begin());
      std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(off + c), c, s.var.begin());
    }
    if (!out.params.all_finite()) throw NumericalError("checkpoint " + dir.string() + " holds non-finite values");
    return out;
  } catch (const io::json::exception& e) {
    throw bad(std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace radloc
