#include "radloc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "radloc/error.hpp"
#include "radloc/io.hpp"
#include "radloc/parallel.hpp"

namespace radloc {

namespace fs = std::filesystem;
using io::json;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

// Portable draws on top of mt19937_64 (the standard distributions are
// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : g_(seed) {}
  double uniform() { return static_cast<double>(g_() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  double normal() {
    const double u1 = 1.0 - uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }
  int poisson(double mean) {
    const double l = std::exp(-mean);
    int k = 0;
    double p = uniform();
    while (p > l) {
      ++k;
      p *= uniform();
    }
    return k;
  }
  int below(int n) { return std::min(n - 1, static_cast<int>(uniform() * n)); }

 private:
  std::mt19937_64 g_;
};

void rect_segments(const Rect& r, std::vector<Segment>& out) {
  const double c = std::cos(r.theta), s = std::sin(r.theta);
  const double hw = r.w / 2, hh = r.h / 2;
  const double px[4] = {-hw, hw, hw, -hw}, py[4] = {-hh, -hh, hh, hh};
  double wx[4], wy[4];
  for (int i = 0; i < 4; ++i) {
    wx[i] = r.cx + c * px[i] - s * py[i];
    wy[i] = r.cy + s * px[i] + c * py[i];
  }
  for (int i = 0; i < 4; ++i) out.push_back({wx[i], wy[i], wx[(i + 1) % 4], wy[(i + 1) % 4]});
}

struct Block {
  double x0, x1, y0, y1;
};

std::vector<Block> blocks_of(const SceneSpec& s) {
  const int k = static_cast<int>(std::ceil(s.extent / s.road_spacing - 1e-9));
  std::vector<Block> out;
  const double hw = s.road_width / 2;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      Block b{i * s.road_spacing + hw, std::min((i + 1) * s.road_spacing, s.extent) - hw, j * s.road_spacing + hw,
              std::min((j + 1) * s.road_spacing, s.extent) - hw};
      if (b.x1 - b.x0 > 0.0 && b.y1 - b.y0 > 0.0) out.push_back(b);
    }
  }
  return out;
}

int road_count(const SceneSpec& s) { return static_cast<int>(std::floor(s.extent / s.road_spacing + 1e-9)); }

}  // namespace

void SceneSpec::validate() const {
  if (!(extent > 0.0)) throw ConfigError("scene extent must be positive");
  if (!(map_resolution > 0.0)) throw ConfigError("map resolution must be positive");
  if (!(road_spacing > road_width) || !(road_width >= 0.0)) throw ConfigError("road spacing must exceed road width");
  if (buildings_per_block < 0 || dynamic_count < 0) throw ConfigError("object counts must be nonnegative");
  if (!(building_min > 0.0) || building_max < building_min) throw ConfigError("building size range is invalid");
  if (!(clutter_density >= 0.0) || !(pole_radius > 0.0)) throw ConfigError("clutter parameters are invalid");
  if (!(speed_min >= 0.0) || speed_max < speed_min) throw ConfigError("dynamic speed range is invalid");
}

RadarNoiseModel RadarNoiseModel::none() { return {0.0, 0.0, 0.0, 0.0, false}; }

void RadarNoiseModel::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(dropout_prob) || !prob(ghost_prob)) throw ConfigError("radar noise probabilities must lie in [0, 1]");
  if (!(speckle_sigma >= 0.0) || !(gain_jitter >= 0.0)) throw ConfigError("radar noise sigmas must be nonnegative");
}

void RadarConfig::validate() const {
  if (azimuths < 4 || range_bins < 2 || !(range_resolution > 0.0)) throw ConfigError("radar geometry is invalid");
}

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Scene sc;
  sc.spec = spec;
  Rng rng(derive_seed(spec.seed, 0));
  for (const Block& b : blocks_of(spec)) {
    const double bw = b.x1 - b.x0, bh = b.y1 - b.y0;
    for (int n = 0; n < spec.buildings_per_block; ++n) {
      Rect r;
      r.w = std::min(rng.uniform(spec.building_min, spec.building_max), bw);
      r.h = std::min(rng.uniform(spec.building_min, spec.building_max), bh);
      r.theta = rng.uniform(-spec.building_max_rotation, spec.building_max_rotation);
      const double ex = (std::abs(std::cos(r.theta)) * r.w + std::abs(std::sin(r.theta)) * r.h) / 2;
      const double ey = (std::abs(std::sin(r.theta)) * r.w + std::abs(std::cos(r.theta)) * r.h) / 2;
      const double ux = rng.uniform(), uy = rng.uniform();
      if (2 * ex > bw || 2 * ey > bh) continue;
      r.cx = b.x0 + ex + ux * (bw - 2 * ex);
      r.cy = b.y0 + ey + uy * (bh - 2 * ey);
      rect_segments(r, sc.segments);
    }
    const int poles = spec.clutter_density > 0.0 ? rng.poisson(spec.clutter_density * bw * bh) : 0;
    for (int n = 0; n < poles; ++n) sc.poles.push_back({rng.uniform(b.x0, b.x1), rng.uniform(b.y0, b.y1), spec.pole_radius});
  }
  for (const Rect& r : spec.buildings) rect_segments(r, sc.segments);
  for (const Segment& s : spec.walls) sc.segments.push_back(s);

  const int roads = road_count(spec);
  for (int n = 0; n < spec.dynamic_count && roads >= 1; ++n) {
    DynamicObject d;
    const bool along_x = rng.bernoulli(0.5);
    const double line = spec.road_spacing * (1 + rng.below(roads));
    const double along = rng.uniform(0.0, spec.extent);
    const bool forward = rng.bernoulli(0.5);
    const double lane = (forward ? -1.0 : 1.0) * spec.road_width / 4;
    d.speed = rng.uniform(spec.speed_min, spec.speed_max);
    if (along_x) {
      d.x = along;
      d.y = line + lane;
      d.heading = forward ? 0.0 : kPi;
    } else {
      d.x = line - lane;
      d.y = along;
      d.heading = forward ? kPi / 2 : -kPi / 2;
    }
    sc.dynamics.push_back(d);
  }

  const double res = spec.map_resolution;
  for (const Segment& s : sc.segments) {
    const double len = std::hypot(s.x1 - s.x0, s.y1 - s.y0);
    const int n = std::max(1, static_cast<int>(std::ceil(len / (res / 4))));
    for (int i = 0; i <= n; ++i) {
      const double f = static_cast<double>(i) / n;
      sc.structure.push_back({s.x0 + f * (s.x1 - s.x0), s.y0 + f * (s.y1 - s.y0), 1.0});
    }
  }
  for (const Pole& p : sc.poles) {
    sc.structure.push_back({p.x, p.y, 1.0});
    for (int i = 0; i < 8; ++i)
      sc.structure.push_back({p.x + p.r * std::cos(i * kPi / 4), p.y + p.r * std::sin(i * kPi / 4), 1.0});
  }

  const int cells = static_cast<int>(std::ceil(spec.extent / res - 1e-9));
  sc.map.cells = Image::zeros(cells, cells);
  sc.map.resolution = res;
  sc.map.origin_x = res / 2;
  sc.map.origin_y = res / 2;
  sc.map.theta = 0.0;
  for (const WeightedPoint& p : sc.structure) {
    const auto [a, b] = sc.map.to_cell(p.x, p.y);
    const int i = static_cast<int>(std::lround(a)), j = static_cast<int>(std::lround(b));
    if (sc.map.cells.inside(i, j)) sc.map.cells.at(i, j) = 1.0;
  }
  return sc;
}

double expected_occupancy(const SceneSpec& spec) {
  const double res = spec.map_resolution;
  double cells = 0.0;
  const double side = (spec.building_min + spec.building_max) / 2;
  for (const Block& b : blocks_of(spec)) {
    const double w = std::min(side, b.x1 - b.x0), h = std::min(side, b.y1 - b.y0);
    cells += spec.buildings_per_block * 2.0 * (w + h) / res;
    const double pole_cells = std::pow(2.0 * spec.pole_radius / res + 1.0, 2);
    cells += spec.clutter_density * (b.x1 - b.x0) * (b.y1 - b.y0) * pole_cells;
  }
  for (const Rect& r : spec.buildings) cells += 2.0 * (r.w + r.h) / res;
  for (const Segment& s : spec.walls) cells += std::hypot(s.x1 - s.x0, s.y1 - s.y0) / res;
  const double total = std::pow(std::ceil(spec.extent / res - 1e-9), 2);
  return cells / total;
}

namespace {

struct Hit {
  double range;
  double reflectivity;
};

// Distance along the unit ray (ox, oy) + r (dx, dy) to the segment, or -1.
double ray_segment(double ox, double oy, double dx, double dy, const Segment& s) {
  const double ex = s.x1 - s.x0, ey = s.y1 - s.y0;
  const double den = dx * ey - dy * ex;
  if (std::abs(den) < 1e-12) return -1.0;
  const double wx = s.x0 - ox, wy = s.y0 - oy;
  const double r = (wx * ey - wy * ex) / den;
  const double u = (wx * dy - wy * dx) / den;
  return (u >= 0.0 && u <= 1.0) ? r : -1.0;
}

double ray_circle(double ox, double oy, double dx, double dy, const Pole& p) {
  const double wx = p.x - ox, wy = p.y - oy;
  const double b = wx * dx + wy * dy;
  const double c = wx * wx + wy * wy - p.r * p.r;
  const double disc = b * b - c;
  if (disc < 0.0) return -1.0;
  return b - std::sqrt(disc);
}

double point_segment_distance(double px, double py, const Segment& s) {
  const double ex = s.x1 - s.x0, ey = s.y1 - s.y0;
  const double l2 = ex * ex + ey * ey;
  double f = l2 > 0 ? ((px - s.x0) * ex + (py - s.y0) * ey) / l2 : 0.0;
  f = std::clamp(f, 0.0, 1.0);
  return std::hypot(s.x0 + f * ex - px, s.y0 + f * ey - py);
}

constexpr double kWallReflectivity = 1.0;
constexpr double kPoleReflectivity = 0.85;
constexpr double kCarReflectivity = 0.9;

}  // namespace

PolarScan simulate_radar(const Scene& scene, const Pose2& pose, const RadarNoiseModel& noise, const RadarConfig& radar,
                         std::uint64_t noise_seed, double t) {
  noise.validate();
  radar.validate();
  const double max_r = (radar.range_bins - 1) * radar.range_resolution;
  const double min_r = radar.range_resolution;

  std::vector<std::pair<Segment, double>> segs;
  for (const Segment& s : scene.segments)
    if (point_segment_distance(pose.x, pose.y, s) <= max_r) segs.emplace_back(s, kWallReflectivity);
  const double ext = scene.spec.extent;
  for (const DynamicObject& d : scene.dynamics) {
    double x = d.x + d.speed * t * std::cos(d.heading), y = d.y + d.speed * t * std::sin(d.heading);
    x = x - ext * std::floor(x / ext);
    y = y - ext * std::floor(y / ext);
    if (std::hypot(x - pose.x, y - pose.y) < 4.0 || std::hypot(x - pose.x, y - pose.y) > max_r + d.length) continue;
    std::vector<Segment> car;
    rect_segments({x, y, d.length, d.width, d.heading}, car);
    for (const Segment& s : car) segs.emplace_back(s, kCarReflectivity);
  }
  std::vector<Pole> poles;
  for (const Pole& p : scene.poles)
    if (std::hypot(p.x - pose.x, p.y - pose.y) <= max_r + p.r) poles.push_back(p);

  PolarScan scan;
  scan.azimuths = radar.azimuths;
  scan.range_bins = radar.range_bins;
  scan.range_resolution = radar.range_resolution;
  scan.intensity.assign(static_cast<std::size_t>(radar.azimuths) * radar.range_bins, 0.0);
  Rng rng(noise_seed);
  std::vector<Hit> hits;
  std::vector<Hit> ray;
  constexpr int kSubRays = 3;  // across the beam width
  for (int a = 0; a < radar.azimuths; ++a) {
    hits.clear();
    for (int k = 0; k < kSubRays; ++k) {
      const double phi = pose.theta + 2.0 * kPi * (a + (k + 0.5) / kSubRays - 0.5) / radar.azimuths;
      const double dx = std::cos(phi), dy = std::sin(phi);
      ray.clear();
      for (const auto& [s, refl] : segs) {
        const double r = ray_segment(pose.x, pose.y, dx, dy, s);
        if (r >= min_r && r <= max_r) ray.push_back({r, refl});
      }
      for (const Pole& p : poles) {
        const double r = ray_circle(pose.x, pose.y, dx, dy, p);
        if (r >= min_r && r <= max_r) ray.push_back({r, kPoleReflectivity});
      }
      if (noise.occlusion && ray.size() > 1) {
        const auto first = *std::min_element(ray.begin(), ray.end(),
                                             [](const Hit& l, const Hit& r) { return l.range < r.range; });
        ray.assign(1, first);
      }
      hits.insert(hits.end(), ray.begin(), ray.end());
    }
    const double gain = std::max(0.0, 1.0 + noise.gain_jitter * rng.normal());
    auto put = [&](int b, double v) {
      if (b < 0 || b >= radar.range_bins) return;
      double& cell = scan.at(a, b);
      cell = std::max(cell, v);
    };
    for (const Hit& h : hits) {
      const double v = gain * h.reflectivity * (1.0 - 0.25 * h.range / max_r);
      const int b = static_cast<int>(std::lround(h.range / radar.range_resolution));
      // range footprint spans about three bins
      put(b, v);
      put(b - 1, 0.9 * v);
      put(b + 1, 0.9 * v);
      put(b - 2, 0.45 * v);
      put(b + 2, 0.45 * v);
    }
    const bool ghost = rng.bernoulli(noise.ghost_prob);
    const double ghost_r = rng.uniform(min_r, max_r), ghost_v = rng.uniform(0.6, 1.0);
    if (ghost) put(static_cast<int>(std::lround(ghost_r / radar.range_resolution)), ghost_v);
    for (int b = 0; b < radar.range_bins; ++b) {
      const double sp = noise.speckle_sigma > 0.0 ? noise.speckle_sigma * std::abs(rng.normal()) : 0.0;
      double& cell = scan.at(a, b);
      cell = std::clamp(cell + sp, 0.0, 1.0);
    }
    if (rng.bernoulli(noise.dropout_prob))
      for (int b = 0; b < radar.range_bins; ++b) scan.at(a, b) = 0.0;
  }
  return scan;
}

namespace {

struct Primitive {
  double x, y, heading, length, curvature;

  Pose2 at(double s) const {
    if (curvature == 0.0) return {x + s * std::cos(heading), y + s * std::sin(heading), wrap_angle(heading)};
    const double h = heading + curvature * s;
    return {x + (std::sin(h) - std::sin(heading)) / curvature, y - (std::cos(h) - std::cos(heading)) / curvature,
            wrap_angle(h)};
  }
};

std::vector<Primitive> road_path(const SceneSpec& spec, const MotionProfile& m, double needed, Rng& rng) {
  const int roads = road_count(spec);
  if (roads < 2) throw ConfigError("road trajectories need at least two roads per axis");
  const double sp = spec.road_spacing, rad = m.turn_radius;
  if (!(rad > 0.0) || rad > sp / 2) throw ConfigError("turn radius must lie in (0, road_spacing / 2]");
  const int dirs[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  auto valid = [&](int i, int j) { return i >= 1 && i <= roads && j >= 1 && j <= roads; };
  // Intersections strictly inside the world.
  auto inside = [&](int i, int j) { return valid(i, j) && i * sp < spec.extent && j * sp < spec.extent; };
  int ci = 0, cj = 0;
  do {
    ci = 1 + rng.below(roads);
    cj = 1 + rng.below(roads);
  } while (!inside(ci, cj));
  std::vector<int> options;
  for (int d = 0; d < 4; ++d)
    if (inside(ci + dirs[d][0], cj + dirs[d][1])) options.push_back(d);
  if (options.empty()) throw ConfigError("road network has no connected intersections");
  std::vector<int> legs{options[static_cast<std::size_t>(rng.below(static_cast<int>(options.size())))]};
  std::vector<std::pair<int, int>> nodes{{ci, cj}};
  double total = 0.0;
  while (total < needed + 2 * sp) {
    const int d = legs.back();
    const int ni = nodes.back().first + dirs[d][0], nj = nodes.back().second + dirs[d][1];
    nodes.push_back({ni, nj});
    total += sp;
    // straight 1/2, left 1/4, right 1/4 among the moves that stay inside
    std::vector<std::pair<int, double>> next;
    const int cand[3] = {d, (d + 1) % 4, (d + 3) % 4};
    const double w[3] = {0.5, 0.25, 0.25};
    double wsum = 0.0;
    for (int c = 0; c < 3; ++c)
      if (inside(ni + dirs[cand[c]][0], nj + dirs[cand[c]][1])) {
        next.push_back({cand[c], w[c]});
        wsum += w[c];
      }
    if (next.empty()) throw ConfigError("road network is too small for a trajectory");
    double u = rng.uniform() * wsum;
    int pick = next.back().first;
    for (const auto& [c, wc] : next) {
      if (u < wc) {
        pick = c;
        break;
      }
      u -= wc;
    }
    legs.push_back(pick);
  }
  std::vector<Primitive> prims;
  for (std::size_t l = 0; l + 1 < nodes.size(); ++l) {
    const int d = legs[l];
    const double h = std::atan2(dirs[d][1], dirs[d][0]);
    const bool turn_in = l > 0 && legs[l - 1] != d;
    const bool turn_out = legs[l + 1] != d;
    const double x0 = nodes[l].first * sp + (turn_in ? rad : 0.0) * dirs[d][0];
    const double y0 = nodes[l].second * sp + (turn_in ? rad : 0.0) * dirs[d][1];
    const double len = sp - (turn_in ? rad : 0.0) - (turn_out ? rad : 0.0);
    prims.push_back({x0, y0, h, len, 0.0});
    if (turn_out) {
      const int e = legs[l + 1];
      const double cross = dirs[d][0] * dirs[e][1] - dirs[d][1] * dirs[e][0];
      const Pose2 end = prims.back().at(len);
      prims.push_back({end.x, end.y, h, rad * kPi / 2, cross > 0 ? 1.0 / rad : -1.0 / rad});
    }
  }
  return prims;
}

}  // namespace

SimulatedRun simulate_trajectory(const Scene& scene, int steps, const MotionProfile& motion,
                                 const RadarNoiseModel& noise, const RadarConfig& radar, std::uint64_t seed) {
  if (steps < 0) throw ConfigError("trajectory length must be nonnegative");
  if (!(motion.step_length > 0.0) || !(motion.dt > 0.0)) throw ConfigError("step length and dt must be positive");
  SimulatedRun run;
  const double ext = scene.spec.extent;
  auto inside = [&](const Pose2& p) { return p.x >= 0.0 && p.y >= 0.0 && p.x <= ext && p.y <= ext; };
  if (motion.kind == MotionProfile::Kind::kStraight) {
    const Pose2& s0 = motion.start;
    for (int t = 0; t <= steps; ++t) {
      const double s = t * motion.step_length;
      const Pose2 p{s0.x + s * std::cos(s0.theta), s0.y + s * std::sin(s0.theta), wrap_angle(s0.theta)};
      if (!inside(p)) throw RangeError("trajectory leaves the scene at step " + std::to_string(t));
      run.poses.push_back(p);
    }
  } else {
    Rng rng(derive_seed(seed, 1));
    const auto prims = road_path(scene.spec, motion, steps * motion.step_length, rng);
    std::size_t k = 0;
    double base = 0.0;
    for (int t = 0; t <= steps; ++t) {
      const double s = t * motion.step_length;
      while (k + 1 < prims.size() && s > base + prims[k].length) {
        base += prims[k].length;
        ++k;
      }
      const Pose2 p = prims[k].at(s - base);
      if (!inside(p)) throw RangeError("trajectory leaves the scene at step " + std::to_string(t));
      run.poses.push_back(p);
    }
  }
  for (int t = 1; t <= steps; ++t) run.controls.push_back(boxminus(run.poses[t], run.poses[t - 1]));
  for (int t = 0; t <= steps; ++t) run.timestamps.push_back(t * motion.dt);
  run.scans.resize(run.poses.size());
  parallel_for(run.poses.size(), [&](std::size_t t) {
    run.scans[t] = simulate_radar(scene, run.poses[t], noise, radar, derive_seed(seed, 2 + t), run.timestamps[t]);
  });
  return run;
}

// ------------------------------------------------------------------- json

namespace {

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const SceneSpec& s) {
  json walls = json::array(), bld = json::array();
  for (const Segment& w : s.walls) walls.push_back({w.x0, w.y0, w.x1, w.y1});
  for (const Rect& r : s.buildings)
    bld.push_back({{"cx", r.cx}, {"cy", r.cy}, {"w", r.w}, {"h", r.h}, {"theta_deg", rad2deg(r.theta)}});
  return {{"seed", s.seed},
          {"extent_m", s.extent},
          {"map_resolution_m", s.map_resolution},
          {"road_spacing_m", s.road_spacing},
          {"road_width_m", s.road_width},
          {"buildings_per_block", s.buildings_per_block},
          {"building_min_m", s.building_min},
          {"building_max_m", s.building_max},
          {"building_max_rotation_deg", rad2deg(s.building_max_rotation)},
          {"clutter_density_per_m2", s.clutter_density},
          {"pole_radius_m", s.pole_radius},
          {"dynamic_count", s.dynamic_count},
          {"speed_min_mps", s.speed_min},
          {"speed_max_mps", s.speed_max},
          {"walls", walls},
          {"buildings", bld}};
}

SceneSpec scene_spec_from_json(const json& j) {
  io::require_known_keys(j,
                         {"seed", "extent_m", "map_resolution_m", "road_spacing_m", "road_width_m",
                          "buildings_per_block", "building_min_m", "building_max_m", "building_max_rotation_deg",
                          "clutter_density_per_m2", "pole_radius_m", "dynamic_count", "speed_min_mps",
                          "speed_max_mps", "walls", "buildings"},
                         "scene");
  SceneSpec s;
  try {
    read_opt(j, "seed", s.seed);
    read_opt(j, "extent_m", s.extent);
    read_opt(j, "map_resolution_m", s.map_resolution);
    read_opt(j, "road_spacing_m", s.road_spacing);
    read_opt(j, "road_width_m", s.road_width);
    read_opt(j, "buildings_per_block", s.buildings_per_block);
    read_opt(j, "building_min_m", s.building_min);
    read_opt(j, "building_max_m", s.building_max);
    if (j.contains("building_max_rotation_deg"))
      s.building_max_rotation = deg2rad(j.at("building_max_rotation_deg").get<double>());
    read_opt(j, "clutter_density_per_m2", s.clutter_density);
    read_opt(j, "pole_radius_m", s.pole_radius);
    read_opt(j, "dynamic_count", s.dynamic_count);
    read_opt(j, "speed_min_mps", s.speed_min);
    read_opt(j, "speed_max_mps", s.speed_max);
    if (j.contains("walls"))
      for (const json& w : j.at("walls")) {
        const auto v = w.get<std::vector<double>>();
        if (v.size() != 4) throw ConfigError("scene.walls: each wall is [x0, y0, x1, y1]");
        s.walls.push_back({v[0], v[1], v[2], v[3]});
      }
    if (j.contains("buildings"))
      for (const json& b : j.at("buildings")) {
        io::require_known_keys(b, {"cx", "cy", "w", "h", "theta_deg"}, "scene.buildings");
        s.buildings.push_back({b.at("cx").get<double>(), b.at("cy").get<double>(), b.at("w").get<double>(),
                               b.at("h").get<double>(), deg2rad(b.value("theta_deg", 0.0))});
      }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  s.validate();
  return s;
}

json to_json(const RadarNoiseModel& n) {
  return {{"speckle_sigma", n.speckle_sigma},
          {"gain_jitter", n.gain_jitter},
          {"dropout_prob", n.dropout_prob},
          {"ghost_prob", n.ghost_prob},
          {"occlusion", n.occlusion}};
}

RadarNoiseModel noise_from_json(const json& j) {
  io::require_known_keys(j, {"speckle_sigma", "gain_jitter", "dropout_prob", "ghost_prob", "occlusion"}, "noise");
  RadarNoiseModel n;
  try {
    read_opt(j, "speckle_sigma", n.speckle_sigma);
    read_opt(j, "gain_jitter", n.gain_jitter);
    read_opt(j, "dropout_prob", n.dropout_prob);
    read_opt(j, "ghost_prob", n.ghost_prob);
    read_opt(j, "occlusion", n.occlusion);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("noise: ") + e.what());
  }
  n.validate();
  return n;
}

json to_json(const RadarConfig& r) {
  return {{"azimuths", r.azimuths}, {"range_bins", r.range_bins}, {"range_resolution_m", r.range_resolution}};
}

RadarConfig radar_from_json(const json& j) {
  io::require_known_keys(j, {"azimuths", "range_bins", "range_resolution_m"}, "radar");
  RadarConfig r;
  try {
    read_opt(j, "azimuths", r.azimuths);
    read_opt(j, "range_bins", r.range_bins);
    read_opt(j, "range_resolution_m", r.range_resolution);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("radar: ") + e.what());
  }
  r.validate();
  return r;
}

json to_json(const MotionProfile& m) {
  return {{"kind", m.kind == MotionProfile::Kind::kRoads ? "roads" : "straight"},
          {"step_length_m", m.step_length},
          {"dt_s", m.dt},
          {"turn_radius_m", m.turn_radius},
          {"start", {{"x", m.start.x}, {"y", m.start.y}, {"theta_deg", rad2deg(m.start.theta)}}}};
}

MotionProfile motion_from_json(const json& j) {
  io::require_known_keys(j, {"kind", "step_length_m", "dt_s", "turn_radius_m", "start"}, "motion");
  MotionProfile m;
  try {
    if (j.contains("kind")) {
      const std::string k = j.at("kind").get<std::string>();
      if (k == "roads")
        m.kind = MotionProfile::Kind::kRoads;
      else if (k == "straight")
        m.kind = MotionProfile::Kind::kStraight;
      else
        throw ConfigError("motion.kind must be roads or straight");
    }
    read_opt(j, "step_length_m", m.step_length);
    read_opt(j, "dt_s", m.dt);
    read_opt(j, "turn_radius_m", m.turn_radius);
    if (j.contains("start")) {
      const json& s = j.at("start");
      io::require_known_keys(s, {"x", "y", "theta_deg"}, "motion.start");
      m.start = {s.value("x", 0.0), s.value("y", 0.0), deg2rad(s.value("theta_deg", 0.0))};
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("motion: ") + e.what());
  }
  return m;
}

void write_dataset(const fs::path& dir, const Scene& scene, const SimulatedRun& run, const RadarNoiseModel& noise,
                   const RadarConfig& radar, const MotionProfile& motion, int steps, std::uint64_t run_seed) {
  std::error_code ec;
  fs::create_directories(dir / "scans", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  save_grid_map(scene.map, dir / "map");
  std::ostringstream poses, controls;
  poses << "timestamp,x,y,theta\n";
  for (std::size_t t = 0; t < run.poses.size(); ++t)
    poses << io::fmt_double(run.timestamps[t]) << ',' << io::fmt_double(run.poses[t].x) << ','
          << io::fmt_double(run.poses[t].y) << ',' << io::fmt_double(run.poses[t].theta) << '\n';
  io::write_text(dir / "poses.csv", poses.str());
  controls << "t,dx,dy,dtheta,converged,rmse\n";
  for (std::size_t t = 0; t < run.controls.size(); ++t)
    controls << io::fmt_double(run.timestamps[t + 1]) << ',' << io::fmt_double(run.controls[t].dx) << ','
             << io::fmt_double(run.controls[t].dy) << ',' << io::fmt_double(run.controls[t].dtheta) << ",1,0\n";
  io::write_text(dir / "controls.csv", controls.str());
  for (std::size_t t = 0; t < run.scans.size(); ++t) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << t;
    save_polar(run.scans[t], dir / "scans" / name.str());
  }
  io::write_json(dir / "scene.json", {{"scene", to_json(scene.spec)},
                                      {"noise", to_json(noise)},
                                      {"radar", to_json(radar)},
                                      {"motion", to_json(motion)},
                                      {"steps", steps},
                                      {"run_seed", run_seed}});
}

}  // namespace radloc
