#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "radloc/error.hpp"
#include "radloc/odom.hpp"
#include "radloc/parallel.hpp"
#include "radloc/synth.hpp"

using namespace radloc;

namespace {

// dst = R(u.dtheta) (src + d)
PointSet2 apply(const PointSet2& src, const Offset& u) {
  PointSet2 out = src;
  const double c = std::cos(u.dtheta), s = std::sin(u.dtheta);
  for (auto& p : out.points) {
    const double x = p.x + u.dx, y = p.y + u.dy;
    p = {c * x - s * y, s * x + c * y};
  }
  return out;
}

PointSet2 random_cloud(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(-40, 40);
  PointSet2 s;
  for (int i = 0; i < n; ++i) {
    s.points.push_back({u(rng), u(rng)});
    s.intensities.push_back(1.0);
  }
  return s;
}

}  // namespace

TEST(Odom, ExtractionCases) {
  PolarScan s{4, 20, 0.5, std::vector<double>(80, 0.5)};
  EXPECT_EQ(extract_salient_points(s, 1.0).size(), 0u);
  EXPECT_EQ(extract_salient_points(s, 0.0).size(), 80u);
  PolarScan h{4, 20, 0.5, std::vector<double>(80, 0.0)};
  h.at(0, 10) = 1.0;
  auto p = extract_salient_points(h, 0.7);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_NEAR(p.points[0].x, 5.0, 1e-12);
  EXPECT_NEAR(p.points[0].y, 0.0, 1e-12);
  auto a = extract_salient_points(s, 0.2), b = extract_salient_points(s, 0.2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.points[i].x, b.points[i].x);
  EXPECT_THROW(extract_salient_points(s, 1.5), ConfigError);
}

TEST(Odom, IdentityAlignment) {
  std::mt19937_64 rng(1);
  auto src = random_cloud(rng, 300);
  auto r = icp_align(src, src, {}, IcpConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.u.dx, 0, 1e-9);
  EXPECT_NEAR(r.u.dy, 0, 1e-9);
  EXPECT_NEAR(r.u.dtheta, 0, 1e-9);
  EXPECT_LT(r.rmse, 1e-9);
}

TEST(Odom, PlantedTransformNoiseless) {
  std::mt19937_64 rng(2);
  const Offset planted{1.5, -0.8, deg2rad(5)};
  auto src = random_cloud(rng, 500);
  auto r = icp_align(src, apply(src, planted), {}, IcpConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.u.dx, planted.dx, 1e-6);
  EXPECT_NEAR(r.u.dy, planted.dy, 1e-6);
  EXPECT_NEAR(r.u.dtheta, planted.dtheta, 1e-6);
}

TEST(Odom, PlantedTransformWithNoise) {
  const Offset planted{1.5, -0.8, deg2rad(5)};
  int ok = 0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    std::normal_distribution<double> g(0, 0.05);
    auto src = random_cloud(rng, 500);
    auto dst = apply(src, planted);
    for (auto& p : dst.points) {
      p.x += g(rng);
      p.y += g(rng);
    }
    auto r = icp_align(src, dst, {}, IcpConfig{});
    if (std::hypot(r.u.dx - planted.dx, r.u.dy - planted.dy) <= 0.05 &&
        std::abs(r.u.dtheta - planted.dtheta) <= deg2rad(0.5))
      ++ok;
  }
  EXPECT_GE(ok, 18);
}

TEST(Odom, DegenerateInputsFlagFailure) {
  PointSet2 two{{{0, 0}, {1, 0}}, {1, 1}};
  auto r = icp_align(two, two, {}, IcpConfig{});
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.u.dx, 0.0);
  PointSet2 line;
  for (int i = 0; i < 10; ++i) {
    line.points.push_back({static_cast<double>(i), 2.0 * i});
    line.intensities.push_back(1);
  }
  r = icp_align(line, line, {0.5, 0, 0}, IcpConfig{});
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.u.dx, 0.0);
}

TEST(Odom, ChainOnRepeatedScansIsZero) {
  PolarScan s{90, 40, 0.5, std::vector<double>(90 * 40, 0.0)};
  for (int a = 0; a < 90; ++a) s.at(a, 10 + (a % 7) * 3) = 1.0;
  std::vector<PolarScan> scans(4, s);
  auto u = odometry_chain(scans, IcpConfig{});
  ASSERT_EQ(u.size(), 3u);
  for (auto& r : u) {
    EXPECT_NEAR(r.u.dx, 0, 1e-9);
    EXPECT_NEAR(r.u.dtheta, 0, 1e-9);
  }
  EXPECT_THROW(odometry_chain(std::vector<PolarScan>{s}, IcpConfig{}), ConfigError);
}

TEST(Odom, ChainOnSimulatedTrajectory) {
  SceneSpec spec;
  spec.seed = 3;
  spec.dynamic_count = 0;
  Scene scene = generate_scene(spec);
  RadarNoiseModel noise = RadarNoiseModel::none();
  noise.occlusion = true;
  RadarConfig radar;
  auto run = simulate_trajectory(scene, 20, MotionProfile{}, noise, radar, 5);
  auto u = odometry_chain(run.scans, IcpConfig{});
  ASSERT_EQ(u.size(), run.controls.size());
  double worst_t = 0, worst_r = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    worst_t = std::max(worst_t, std::hypot(u[i].u.dx - run.controls[i].dx, u[i].u.dy - run.controls[i].dy));
    worst_r = std::max(worst_r, std::abs(wrap_angle(u[i].u.dtheta - run.controls[i].dtheta)));
  }
  // bounded by the polar discretization, far below the step length
  EXPECT_LT(worst_t, 0.5);
  EXPECT_LT(worst_r, deg2rad(2.0));
}

TEST(Odom, ControlsCsvRoundtrip) {
  auto path = std::filesystem::temp_directory_path() / "radloc_controls.csv";
  std::vector<IcpResult> c{{{1, 0.5, 0.01}, true, 0.1, 3}, {{2, -0.5, -0.02}, false, 0.4, 50}};
  std::vector<double> ts{1.0, 2.0};
  write_controls_csv(c, ts, path);
  auto back = read_controls_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_DOUBLE_EQ(back[1].u.dy, -0.5);
  EXPECT_FALSE(back[1].converged);
  EXPECT_DOUBLE_EQ(back[0].t, 1.0);
  std::filesystem::remove(path);
}

TEST(Odom, ConfigValidation) {
  IcpConfig c;
  c.trim_fraction = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}
