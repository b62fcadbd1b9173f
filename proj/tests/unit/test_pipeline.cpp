#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "radloc/error.hpp"
#include "radloc/io.hpp"
#include "radloc/pipeline.hpp"
#include "radloc/synth.hpp"

using namespace radloc;

namespace {

std::vector<StampedPose> stamped(const std::vector<Pose2>& p) {
  std::vector<StampedPose> out;
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back({static_cast<double>(i), p[i]});
  return out;
}

TrainConfig small_train_config() {
  TrainConfig c;
  c.meas.rows = c.meas.cols = 32;
  c.meas.limits = {2, 2, deg2rad(2)};
  c.meas.grid_resolution = {2, 2, deg2rad(2)};
  c.perturbation = c.meas.limits;
  c.batch_size = 2;
  c.epochs = 1;
  c.steps_per_epoch = 2;
  c.k_seq = 2;
  c.validation_fraction = 0.25;
  return c;
}

struct SmallData {
  std::vector<LoadedSequence> seqs;
  std::vector<std::vector<Offset>> controls;
};

SmallData small_data(const MeasConfig& meas) {
  SceneSpec spec;
  spec.seed = 31;
  Scene sc = generate_scene(spec);
  RadarConfig rc;
  rc.azimuths = 200;
  rc.range_bins = 48;
  auto run = simulate_trajectory(sc, 7, MotionProfile{}, RadarNoiseModel{}, rc, 4);
  SmallData d;
  d.controls.push_back(run.controls);
  d.seqs.push_back(make_sequence("s", sc.map, run.scans, run.poses, run.timestamps, meas));
  return d;
}

}  // namespace

TEST(Pipeline, PerturbationConsistency) {
  std::mt19937_64 rng(1);
  Pose2 gt{10, -4, 2.9};
  auto z = sample_perturbations(gt, {0, 0, 0}, rng);
  EXPECT_NEAR(z.predicted.x, gt.x, 1e-12);
  EXPECT_NEAR(z.target.dx, 0, 1e-12);
  for (int i = 0; i < 1000; ++i) {
    auto p = sample_perturbations(gt, {6, 6, deg2rad(6)}, rng);
    Pose2 r = boxplus(p.predicted, p.target);
    EXPECT_NEAR(r.x, gt.x, 1e-9);
    EXPECT_NEAR(r.y, gt.y, 1e-9);
    EXPECT_NEAR(wrap_angle(r.theta - gt.theta), 0, 1e-9);
    Offset back = boxminus(gt, p.predicted);
    EXPECT_NEAR(back.dx, p.target.dx, 1e-9);
  }
}

TEST(Pipeline, PerturbationMoments) {
  std::mt19937_64 rng(2);
  double sx = 0, sy = 0, st = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto p = sample_perturbations({5, 5, 0.4}, {6, 6, deg2rad(6)}, rng);
    EXPECT_LE(std::abs(p.target.dx), 6 + 1e-9);
    sx += std::abs(p.target.dx);
    sy += std::abs(p.target.dy);
    st += std::abs(rad2deg(p.target.dtheta));
  }
  EXPECT_NEAR(sx / n, 3.0, 0.15);
  EXPECT_NEAR(sy / n, 3.0, 0.15);
  EXPECT_NEAR(st / n, 3.0, 0.15);
}

TEST(Pipeline, AbsoluteErrorOracles) {
  std::vector<Pose2> gt{{0, 0, 0}, {1, 0, 0.1}, {2, 1, 0.2}};
  auto g = stamped(gt);
  auto z = absolute_errors(g, g);
  EXPECT_EQ(z.rmse_trans, 0.0);
  EXPECT_EQ(z.median_rot, 0.0);
  std::vector<Pose2> shifted = gt;
  for (auto& p : shifted) {
    p.x += 3;
    p.y += 4;
  }
  auto a = absolute_errors(stamped(shifted), g);
  EXPECT_NEAR(a.rmse_trans, 5, 1e-12);
  EXPECT_NEAR(a.median_trans, 5, 1e-12);
  auto one = absolute_errors(stamped({{1, 1, 0.5}}), stamped({{0, 0, 0.0}}));
  EXPECT_NEAR(one.rmse_trans, std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(one.median_rot, rad2deg(0.5), 1e-12);
  EXPECT_THROW(absolute_errors(g, stamped({{0, 0, 0}})), ConfigError);
  auto late = g;
  late[1].t = 7;
  EXPECT_THROW(absolute_errors(late, g), ConfigError);
}

TEST(Pipeline, DriftOracle) {
  std::vector<Pose2> gt, est;
  for (int i = 0; i <= 1000; ++i) {
    gt.push_back({static_cast<double>(i), 0, 0});
    est.push_back({static_cast<double>(i), 0.01 * i, 0});
  }
  auto g = stamped(gt), e = stamped(est);
  auto zero = kitti_relative_errors(g, g);
  EXPECT_EQ(zero.drift_trans, 0.0);
  EXPECT_EQ(zero.drift_rot, 0.0);
  EXPECT_FALSE(zero.partial);
  auto d = kitti_relative_errors(e, g);
  EXPECT_NEAR(d.drift_trans, 1.0, 0.1);
  EXPECT_EQ(d.lengths_used.size(), 8u);

  std::vector<double> bins{10, 50, 100};
  for (const auto& b : relative_pose_errors(e, g, bins)) {
    EXPECT_NEAR(b.trans, 1.0, 0.1);
    EXPECT_GT(b.count, 0u);
  }
  for (const auto& b : relative_pose_errors(g, g, bins)) EXPECT_EQ(b.trans, 0.0);

  std::vector<StampedPose> short_g(g.begin(), g.begin() + 300), short_e(e.begin(), e.begin() + 300);
  auto partial = kitti_relative_errors(short_e, short_g);
  EXPECT_TRUE(partial.partial);
  std::vector<StampedPose> tiny_g(g.begin(), g.begin() + 50);
  EXPECT_THROW(kitti_relative_errors(tiny_g, tiny_g), RangeError);
  auto j = metrics_json(tiny_g, tiny_g);
  EXPECT_TRUE(j["drift"].is_null());
  EXPECT_EQ(j["absolute"]["rmse_trans_m"], 0.0);
}

TEST(Pipeline, TrainConfigJson) {
  TrainConfig c = small_train_config();
  c.seed = 99;
  TrainConfig r = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(r), to_json(c));
  EXPECT_EQ(r.seed, 99u);
  auto j = to_json(c);
  j["grid"]["extra"] = 1;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["grid"]["limit_x_m"] = 5;  // not a multiple of 2
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["learning_rate"] = -1;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["perturbation"]["x_m"] = 4;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
}

TEST(Pipeline, DatasetIndexLoadsWrittenDataset) {
  SceneSpec spec;
  spec.seed = 5;
  Scene sc = generate_scene(spec);
  RadarConfig rc;
  rc.azimuths = 100;
  auto run = simulate_trajectory(sc, 4, MotionProfile{}, RadarNoiseModel{}, rc, 3);
  auto dir = std::filesystem::temp_directory_path() / "radloc_idx";
  std::filesystem::remove_all(dir);
  write_dataset(dir, sc, run, RadarNoiseModel{}, rc, MotionProfile{}, 4, 3);
  io::write_text(dir / "splits.csv", "index,split\n0,train\n3,test\n");
  DatasetIndex idx = DatasetIndex::load(dir);
  ASSERT_EQ(idx.records.size(), 5u);
  EXPECT_EQ(idx.indices_of("test"), std::vector<std::size_t>{3});
  EXPECT_EQ(idx.indices_of("train").size(), 4u);
  EXPECT_NEAR(idx.gt_poses()[2].x, run.poses[2].x, 1e-9);
  EXPECT_EQ(idx.load_scan(1).azimuths, 100);
  MeasConfig m;
  LoadedSequence s = load_sequence(idx, m);
  EXPECT_EQ(s.radar.size(), 5u);
  EXPECT_EQ(s.radar[0].image.rows, m.rows);

  std::filesystem::remove(dir / "scans" / "000002.bin");
  EXPECT_THROW(DatasetIndex::load(dir), IoError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(DatasetIndex::load(dir), IoError);
}

TEST(Pipeline, ZeroEpochsReturnsInitialParams) {
  TrainConfig c = small_train_config();
  c.epochs = 0;
  SmallData d = small_data(c.meas);
  auto init = ModelParams::init(ArchConfig::tiny(), 27, 3);
  TrainResult r = train_stage1(d.seqs, c, &init);
  EXPECT_EQ(r.params.flat_values(), init.flat_values());
  EXPECT_EQ(r.best_epoch, 0);
  EXPECT_TRUE(r.epochs.empty());
}

TEST(Pipeline, TrainingIsDeterministicAndWritesOutputs) {
  TrainConfig c = small_train_config();
  SmallData d = small_data(c.meas);
  auto dir = std::filesystem::temp_directory_path() / "radloc_train";
  std::filesystem::remove_all(dir);
  c.out_dir = dir;
  std::vector<double> losses_a, losses_b;
  TrainResult a = train_stage1(d.seqs, c, nullptr, [&](const nlohmann::json& j) {
    if (j.contains("loss")) losses_a.push_back(j["loss"].get<double>());
  });
  c.out_dir.clear();
  TrainResult b = train_stage1(d.seqs, c, nullptr, [&](const nlohmann::json& j) {
    if (j.contains("loss")) losses_b.push_back(j["loss"].get<double>());
  });
  ASSERT_EQ(losses_a.size(), 2u);
  EXPECT_EQ(losses_a, losses_b);
  EXPECT_EQ(a.params.flat_values(), b.params.flat_values());
  EXPECT_TRUE(std::filesystem::exists(dir / "train_log.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_1" / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "best" / "manifest.json"));

  TrainConfig c2 = c;
  c2.epochs = 1;
  c2.steps_per_epoch = 1;
  TrainResult s2 = train_stage2(a.params, d.seqs, d.controls, c2);
  EXPECT_EQ(s2.epochs.size(), 1u);
  EXPECT_TRUE(s2.params.all_finite());

  auto ev = evaluate_offsets(a.params, d.seqs, c, 7, 4);
  EXPECT_EQ(ev.samples, 4u);
  auto ev2 = evaluate_offsets(a.params, d.seqs, c, 7, 4);
  EXPECT_EQ(ev.loss, ev2.loss);
  std::filesystem::remove_all(dir);
}

TEST(Pipeline, DivergenceAbortsWithLastGoodCheckpoint) {
  TrainConfig c = small_train_config();
  c.learning_rate = 1e200;
  c.grad_clip = 0;
  c.steps_per_epoch = 4;
  SmallData d = small_data(c.meas);
  auto dir = std::filesystem::temp_directory_path() / "radloc_diverge";
  std::filesystem::remove_all(dir);
  c.out_dir = dir;
  EXPECT_THROW(train_stage1(d.seqs, c), NumericalError);
  EXPECT_TRUE(std::filesystem::exists(dir / "last_good" / "manifest.json"));
  std::filesystem::remove_all(dir);
}
