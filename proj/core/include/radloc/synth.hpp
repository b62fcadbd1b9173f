#pragma once

// Synthetic worlds for desk-scale experiments: a road grid lined with
// buildings and poles, lidar-style occupancy maps, scanning-radar sweeps with
// noise, occlusion and moving cars, and vehicle trajectories along the roads.

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "radloc/bev.hpp"
#include "radloc/se2.hpp"

namespace radloc {

struct Segment {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
};

/// Rectangle outline centered at (cx, cy) with sides w (along its heading) and h.
struct Rect {
  double cx = 0.0, cy = 0.0, w = 1.0, h = 1.0, theta = 0.0;
};

struct SceneSpec {
  std::uint64_t seed = 1;
  double extent = 240.0;  // the world is [0, extent]^2, meters
  double map_resolution = 1.0;
  double road_spacing = 48.0;  // roads run along x = k * spacing and y = k * spacing
  double road_width = 14.0;
  int buildings_per_block = 4;
  double building_min = 6.0;
  double building_max = 18.0;
  double building_max_rotation = deg2rad(25.0);
  double clutter_density = 0.002;  // poles per square meter of block area
  double pole_radius = 0.3;
  int dynamic_count = 12;
  double speed_min = 0.0;  // m/s
  double speed_max = 3.0;
  std::vector<Segment> walls;  // explicit extra structures
  std::vector<Rect> buildings;

  void validate() const;
};

struct RadarNoiseModel {
  double speckle_sigma = 0.08;
  double gain_jitter = 0.05;
  double dropout_prob = 0.02;  // per azimuth
  double ghost_prob = 0.03;    // per azimuth
  bool occlusion = true;       // first-return shadowing

  /// Noise-free and unoccluded: every structure crossing a ray returns.
  static RadarNoiseModel none();
  void validate() const;
};

struct RadarConfig {
  int azimuths = 400;
  int range_bins = 96;
  double range_resolution = 0.5;

  void validate() const;
};

struct Pole {
  double x = 0.0, y = 0.0, r = 0.3;
};

struct DynamicObject {
  double x = 0.0, y = 0.0, heading = 0.0, speed = 0.0;
  double length = 4.5, width = 1.8;
};

struct Scene {
  SceneSpec spec;
  std::vector<Segment> segments;  // static walls (map and radar)
  std::vector<Pole> poles;        // static clutter (map and radar)
  std::vector<DynamicObject> dynamics;  // radar only
  GridMap map;
  std::vector<WeightedPoint> structure;  // points sampled on the static structure
};

/// Deterministic in spec.seed.
Scene generate_scene(const SceneSpec& spec);

/// Analytic occupied-cell fraction implied by the spec's densities.
double expected_occupancy(const SceneSpec& spec);

/// One sweep from pose at time t (seconds; moves the dynamic objects).
PolarScan simulate_radar(const Scene& scene, const Pose2& pose, const RadarNoiseModel& noise, const RadarConfig& radar,
                         std::uint64_t noise_seed, double t = 0.0);

struct MotionProfile {
  enum class Kind { kRoads, kStraight };
  Kind kind = Kind::kRoads;
  double step_length = 2.0;  // meters per step
  double dt = 1.0;           // seconds per step
  double turn_radius = 10.0;
  /// Straight profile only: start pose.
  Pose2 start{};
};

struct SimulatedRun {
  std::vector<Pose2> poses;      // steps + 1
  std::vector<Offset> controls;  // steps; poses[t] = poses[t-1] [+] controls[t-1]
  std::vector<PolarScan> scans;  // steps + 1, scans[t] observed at poses[t]
  std::vector<double> timestamps;
};

/// Per-step radar noise draws from (seed, step) streams, so results do not
/// depend on the worker count.
SimulatedRun simulate_trajectory(const Scene& scene, int steps, const MotionProfile& motion,
                                 const RadarNoiseModel& noise, const RadarConfig& radar, std::uint64_t seed);

/// Stream seed for (seed, step).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

nlohmann::json to_json(const SceneSpec& s);
SceneSpec scene_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RadarNoiseModel& n);
RadarNoiseModel noise_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RadarConfig& r);
RadarConfig radar_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MotionProfile& m);
MotionProfile motion_from_json(const nlohmann::json& j);

/// Writes map.{bin,json}, poses.csv, controls.csv, scans/NNNNNN.{bin,json}
/// and scene.json into dir.
void write_dataset(const std::filesystem::path& dir, const Scene& scene, const SimulatedRun& run,
                   const RadarNoiseModel& noise, const RadarConfig& radar, const MotionProfile& motion, int steps,
                   std::uint64_t run_seed);

}  // namespace radloc
