#include <random>

#include <benchmark/benchmark.h>

#include "radloc/bev.hpp"
#include "radloc/filter.hpp"
#include "radloc/losses.hpp"
#include "radloc/measnet.hpp"
#include "radloc/odom.hpp"
#include "radloc/synth.hpp"

using namespace radloc;

namespace {

struct Fixture {
  Scene scene;
  SimulatedRun run;
  MeasConfig cfg;
  MeasurementSetup setup{MeasConfig{}};
  ModelParams params;
  BevImage radar;

  Fixture() : scene(generate_scene(SceneSpec{})) {
    run = simulate_trajectory(scene, 4, MotionProfile{}, RadarNoiseModel{}, RadarConfig{}, 3);
    params = ModelParams::init(ArchConfig::tiny(), static_cast<int>(setup.grid().size()), 1);
    radar = polar_to_cartesian(run.scans[1], cfg.resolution, cfg.rows, cfg.cols);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_BatchWarp(benchmark::State& state) {
  Fixture& f = fixture();
  const BevImage crop = crop_at(f.scene.map, f.run.poses[1], f.cfg.rows, f.cfg.cols, f.cfg.resolution);
  for (auto _ : state) benchmark::DoNotOptimize(batch_warp(crop.image, f.setup.grid(), f.cfg.resolution));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(f.setup.grid().size()));
}
BENCHMARK(BM_BatchWarp)->Unit(benchmark::kMillisecond);

void BM_Measure(benchmark::State& state) {
  Fixture& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(measure(f.params, f.radar, f.scene.map, f.run.poses[1], f.setup));
}
BENCHMARK(BM_Measure)->Unit(benchmark::kMillisecond);

void BM_InferOffsetsTrainStep(benchmark::State& state) {
  Fixture& f = fixture();
  const BevImage crop = crop_at(f.scene.map, f.run.poses[1], f.cfg.rows, f.cfg.cols, f.cfg.resolution);
  const auto rt = ad::Tensor::from({1, 1, f.cfg.rows, f.cfg.cols}, f.radar.image.px);
  const auto ct = ad::Tensor::from({1, 1, f.cfg.rows, f.cfg.cols}, crop.image.px);
  const std::vector<Offset> gt{{1.0, -0.5, 0.01}};
  for (auto _ : state) {
    f.params.zero_grad();
    const OffsetPosterior o = infer_offsets(f.params, rt, ct, f.setup, ForwardMode{});
    ad::Tensor loss = classification_loss(o.px, o.py, o.pt, {one_hot_targets(f.setup.grid(), gt[0])}) +
                      regression_loss(o.mean_x, o.mean_y, o.mean_t, gt, 1.0);
    loss.backward();
  }
}
BENCHMARK(BM_InferOffsetsTrainStep)->Unit(benchmark::kMillisecond);

void BM_IcpAlign(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-40, 40);
  PointSet2 src, dst;
  const Offset planted{1.5, -0.8, deg2rad(5)};
  const double c = std::cos(planted.dtheta), s = std::sin(planted.dtheta);
  for (int i = 0; i < state.range(0); ++i) {
    const Point2 p{u(rng), u(rng)};
    src.points.push_back(p);
    src.intensities.push_back(1.0);
    const double x = p.x + planted.dx, y = p.y + planted.dy;
    dst.points.push_back({c * x - s * y, s * x + c * y});
    dst.intensities.push_back(1.0);
  }
  for (auto _ : state) benchmark::DoNotOptimize(icp_align(src, dst, {}, IcpConfig{}));
}
BENCHMARK(BM_IcpAlign)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

void BM_OdometryStep(benchmark::State& state) {
  Fixture& f = fixture();
  const std::vector<PolarScan> pair(f.run.scans.begin(), f.run.scans.begin() + 2);
  for (auto _ : state) benchmark::DoNotOptimize(odometry_chain(pair, IcpConfig{}));
}
BENCHMARK(BM_OdometryStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
