#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "radloc/error.hpp"

using namespace radloc;
using namespace radloc::tools;

namespace {

constexpr const char* kFooter = R"(Exit codes:
  0  success
  1  internal error
  2  invalid configuration or arguments
  3  missing or unreadable file
  4  numerical failure (divergence, singular covariance); last good checkpoint kept
  5  input outside the valid range (pose off the map, too little travel)
Failures print one JSON line on stderr: {"error": <kind>, "exit_code": <n>, "message": <text>}.

Environment:
  RADLOC_RUN_ROOT  base directory for run outputs; relative --out paths resolve under it (default ./runs)
  RADLOC_THREADS   worker threads (overrides the config file, overridden by --threads)

Every run directory receives config.json, the fully resolved configuration.)";

int fail(const char* kind, int code, const std::string& msg) {
  const nlohmann::json j = {{"error", kind}, {"exit_code", code}, {"message", msg}};
  std::fprintf(stderr, "%s\n", j.dump().c_str());
  return code;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_file, "JSON run configuration; unknown keys are rejected");
  sub->add_option("--seed", c.seed, "master seed; overrides the scene and training seeds");
  sub->add_option("--threads", c.threads, "worker threads (1 = serial, bit-reproducible)");
  sub->add_option("--out", c.out, "run directory (default $RADLOC_RUN_ROOT/<command>-<seed>)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radar localization on prior lidar maps: synthetic data, training, odometry, tracking, evaluation"};
  app.footer(kFooter);
  app.require_subcommand(1);

  Common common;
  SynthArgs synth;
  TrainArgs train;
  DataArgs data;
  EvalArgs eval;

  auto* s = app.add_subcommand("synth", "generate a synthetic scene, trajectory and radar scans as a dataset directory");
  s->alias("synth-gen");
  add_common(s, common);
  s->add_option("--steps", synth.steps, "trajectory steps (poses = steps + 1)");

  auto* t1 = app.add_subcommand("train1", "stage 1: train the measurement model on perturbed single frames");
  add_common(t1, common);
  t1->add_option("--data", train.data, "dataset directories (repeatable)")->required();
  t1->add_option("--epochs", train.epochs, "epochs");
  t1->add_option("--steps-per-epoch", train.steps_per_epoch, "optimizer steps per epoch (0 = one pass)");
  t1->add_option("--batch-size", train.batch_size, "samples per step");
  t1->add_option("--lr", train.learning_rate, "initial learning rate (cosine decay)");
  t1->add_option("--profile", train.profile, "architecture profile")->check(CLI::IsMember({"tiny", "paper"}));

  auto* t2 = app.add_subcommand("train2", "stage 2: fine-tune through the differentiable filter on k-step windows");
  add_common(t2, common);
  t2->add_option("--checkpoint", train.checkpoint, "stage-1 checkpoint directory")->required();
  t2->add_option("--data", train.data, "dataset directories (repeatable); controls come from ICP")
      ->required();
  t2->add_option("--epochs", train.epochs, "epochs");
  t2->add_option("--steps-per-epoch", train.steps_per_epoch, "optimizer steps per epoch");
  t2->add_option("--batch-size", train.batch_size, "windows per step");
  t2->add_option("--lr", train.learning_rate, "initial learning rate");

  auto* od = app.add_subcommand("odom", "radar odometry by ICP between consecutive scans");
  add_common(od, common);
  od->add_option("--data", data.data, "dataset directory")->required();

  auto* tr = app.add_subcommand("track", "Kalman tracking with the learned measurement model on a dataset");
  add_common(tr, common);
  tr->add_option("--checkpoint", data.checkpoint, "checkpoint directory")->required();
  tr->add_option("--data", data.data, "dataset directory")->required();
  tr->add_option("--controls", data.controls, "controls CSV from `odom` (default: run ICP now)");

  auto* co = app.add_subcommand("coarse", "coarse localization of planted large offsets by tiling the search space");
  add_common(co, common);
  co->add_option("--checkpoint", data.checkpoint, "checkpoint directory")->required();
  co->add_option("--data", data.data, "dataset directory")->required();
  co->add_option("--limits", data.limits, "search limits x_m,y_m,theta_deg")->delimiter(',')->expected(3);
  co->add_option("--samples", data.samples, "planted-offset trials");

  auto* ev = app.add_subcommand("eval", "trajectory metrics JSON and SVG plots");
  add_common(ev, common);
  ev->add_option("--traj", eval.traj, "estimated poses CSV (timestamp,x,y,theta)")->required();
  ev->add_option("--gt", eval.gt, "ground-truth poses CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("config", 2, e.what());
  }

  try {
    if (*s) return cmd_synth(common, synth);
    if (*t1) return cmd_train1(common, train);
    if (*t2) return cmd_train2(common, train);
    if (*od) return cmd_odom(common, data);
    if (*tr) return cmd_track(common, data);
    if (*co) return cmd_coarse(common, data);
    if (*ev) return cmd_eval(common, eval);
  } catch (const Error& e) {
    return fail(e.kind_name(), e.exit_code(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", 1, e.what());
  }
  return fail("internal", 1, "no command");
}
