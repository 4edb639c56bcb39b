// Command-line surface: equivariance audit, toy training, completion, and
// metric evaluation. Exit codes: 0 success, 1 check failure, 2 usage/IO error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "revnet/audit.hpp"
#include "revnet/io.hpp"

namespace fs = std::filesystem;
using namespace revnet;

namespace {

struct AuditArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  int trials = 20;
  double tol = 1e-6;
  bool quiet = false;
};

int run_audit(const AuditArgs& a) {
  ModelConfig cfg =
      a.config_path.empty() ? ModelConfig::tiny() : load_config_file(a.config_path);
  std::vector<AuditCheck> checks = layer_equivariance_suite(a.trials, a.seed);
  std::vector<AuditCheck> inv = invariance_suite(a.trials, a.seed + 1);
  checks.insert(checks.end(), inv.begin(), inv.end());
  checks.push_back(bias_equivariance_check(a.trials, a.seed + 2));
  checks.push_back(end_to_end_equivariance_check(
      cfg, 2 * cfg.stages.front().size, a.trials, a.seed + 3));

  bool ok = true;
  for (const AuditCheck& c : checks) {
    if (c.max_deviation > a.tol) ok = false;
    std::printf("%s=%.6e\n", c.name.c_str(), c.max_deviation);
  }
  std::printf("audit=%s\n", ok ? "pass" : "fail");
  if (!a.quiet && !ok)
    std::fprintf(stderr, "audit: at least one check exceeded tol %g\n", a.tol);
  return ok ? 0 : 1;
}

struct TrainArgs {
  std::string out_path;
  std::string curve_path;
  std::string config_path;
  std::string shape = "mixed";
  int epochs = 30;
  int steps = 60;
  int batch = 8;
  int heldout = 16;
  double lr = 5e-4;
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool quiet = false;
  bool verbose = false;
};

int run_train(const TrainArgs& a) {
  ModelConfig cfg =
      a.config_path.empty() ? ModelConfig::toy() : load_config_file(a.config_path);
  SyntheticShapeSpec data;
  data.family = shape_family_from_string(a.shape);
  REVNet model(cfg, a.seed);

  TrainOptions opt;
  opt.epochs = a.epochs;
  opt.steps_per_epoch = a.steps;
  opt.batch = a.batch;
  opt.seed = a.seed;
  opt.heldout_pairs = a.heldout;
  opt.opt.lr = a.lr;
  opt.threads = a.deterministic ? 1 : 0;
  opt.verbose = a.verbose && !a.quiet;

  TrainResult result = train(model, data, opt);
  save_checkpoint(a.out_path, make_checkpoint(model, a.seed));
  const std::string curve =
      a.curve_path.empty() ? a.out_path + ".curve.csv" : a.curve_path;
  write_curve_csv(curve, result.curve);
  if (!a.quiet)
    std::printf("train: heldout_cd %.6g -> %.6g (%d epochs), checkpoint %s\n",
                result.initial_heldout, result.final_heldout, a.epochs,
                a.out_path.c_str());
  return 0;
}

struct CompleteArgs {
  std::string ckpt_path;
  std::string in_path;
  std::string out_path;
  bool deterministic = false;
  bool quiet = false;
};

int run_complete(const CompleteArgs& a) {
  Checkpoint ckpt = load_checkpoint(a.ckpt_path);
  REVNet model = restore_model(ckpt);
  PointCloud cloud = read_cloud(a.in_path);
  if (cloud.valid_count < model.config().n_observed)
    throw std::runtime_error(
        "input cloud has " + std::to_string(cloud.valid_count) +
        " points but the model needs at least " +
        std::to_string(model.config().n_observed));
  auto [anchors, fine] = model.forward(cloud);
  write_cloud(a.out_path, fine);
  if (!a.quiet)
    std::printf("complete: %d -> %d points, wrote %s\n", cloud.valid_count,
                fine.valid_count, a.out_path.c_str());
  return 0;
}

struct EvalArgs {
  std::string pred_path;
  std::string gt_path;
  std::string partial_path;
  std::string refs_dir;
  std::string consistency_ckpt;
  int trials = 30;
  std::uint64_t seed = 0;
  bool verbose = false;
  bool quiet = false;
  bool deterministic = false;
};

int run_eval(const EvalArgs& a) {
  PointCloud pred = read_cloud(a.pred_path);
  PointCloud gt = read_cloud(a.gt_path);
  std::printf("cd_l1=%.6f\n", chamfer_l1(pred, gt));
  std::printf("cd_l2=%.6f\n", chamfer_l2(pred, gt));
  std::printf("fscore@1%%=%.2f\n", f_score(pred, gt, 0.01));
  std::printf("fscore@2%%=%.2f\n", f_score(pred, gt, 0.02));

  if (!a.partial_path.empty() && a.consistency_ckpt.empty() &&
      a.refs_dir.empty()) {
    PointCloud partial = read_cloud(a.partial_path);
    std::printf("fd=%.6g\n", chamfer_l2_one_directional(partial, pred));
  }
  if (!a.refs_dir.empty()) {
    REVNET_CHECK(!a.partial_path.empty(),
                 "eval: --refs requires --partial for the FD term");
    PointCloud partial = read_cloud(a.partial_path);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(a.refs_dir))
      if (entry.is_regular_file() && entry.path().extension() == ".xyz")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    REVNET_CHECK(!files.empty(),
                 "eval: no .xyz reference clouds in " + a.refs_dir);
    std::vector<PointCloud> refs;
    refs.reserve(files.size());
    for (const auto& f : files) refs.push_back(read_cloud(f.string()));
    auto [fd, mmd] = fidelity_mmd(pred, partial, refs);
    std::printf("fd=%.6g\n", fd);
    std::printf("mmd=%.6g\n", mmd);
  }
  if (!a.consistency_ckpt.empty()) {
    REVNET_CHECK(!a.partial_path.empty(),
                 "eval: --consistency requires --partial");
    PointCloud partial = read_cloud(a.partial_path);
    Checkpoint ckpt = load_checkpoint(a.consistency_ckpt);
    REVNet model = restore_model(ckpt);
    auto complete_fn = [&model](const PointCloud& c) {
      auto [anchors, fine] = model.forward(c);
      return fine;
    };
    std::vector<double> per_trial;
    const double cst = consistency_score(complete_fn, partial, gt, a.trials,
                                         a.seed, &per_trial);
    if (a.verbose)
      for (size_t i = 0; i < per_trial.size(); ++i)
        std::printf("cst_trial_%zu=%.9g\n", i, per_trial[i]);
    std::printf("cst=%.6g\n", cst);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rotation-equivariant point cloud completion"};
  app.require_subcommand(1);

  AuditArgs audit_args;
  CLI::App* audit = app.add_subcommand(
      "audit", "layer and end-to-end equivariance checks");
  audit->add_option("--config", audit_args.config_path,
                    "model config JSON (default: built-in tiny config)");
  audit->add_option("--seed", audit_args.seed, "rng seed");
  audit->add_option("--trials", audit_args.trials, "trials per check")
      ->check(CLI::PositiveNumber);
  audit->add_option("--tol", audit_args.tol, "pass/fail tolerance");
  audit->add_flag("--quiet", audit_args.quiet, "metric lines only");

  TrainArgs train_args;
  CLI::App* tr = app.add_subcommand("train", "train on synthetic shapes");
  tr->add_option("--out", train_args.out_path, "output checkpoint")->required();
  tr->add_option("--epochs", train_args.epochs, "epochs")
      ->check(CLI::NonNegativeNumber);
  tr->add_option("--seed", train_args.seed, "rng seed");
  tr->add_option("--shape", train_args.shape,
                 "sphere|cuboid|cylinder|mixed");
  tr->add_option("--steps", train_args.steps, "steps per epoch")
      ->check(CLI::PositiveNumber);
  tr->add_option("--batch", train_args.batch, "batch size")
      ->check(CLI::PositiveNumber);
  tr->add_option("--heldout", train_args.heldout, "held-out pair count")
      ->check(CLI::PositiveNumber);
  tr->add_option("--lr", train_args.lr, "initial learning rate");
  tr->add_option("--curve", train_args.curve_path,
                 "loss curve CSV (default: <out>.curve.csv)");
  tr->add_option("--config", train_args.config_path, "model config JSON");
  tr->add_flag("--deterministic", train_args.deterministic,
               "single-threaded reproducible run");
  tr->add_flag("--quiet", train_args.quiet, "suppress progress output");
  tr->add_flag("--verbose", train_args.verbose, "per-epoch progress");

  CompleteArgs complete_args;
  CLI::App* co = app.add_subcommand("complete", "complete a partial cloud");
  co->add_option("--ckpt", complete_args.ckpt_path, "checkpoint")->required();
  co->add_option("--in", complete_args.in_path, "input XYZ cloud")->required();
  co->add_option("--out", complete_args.out_path, "output XYZ cloud")
      ->required();
  co->add_flag("--deterministic", complete_args.deterministic,
               "single-threaded reproducible run");
  co->add_flag("--quiet", complete_args.quiet, "suppress progress output");

  EvalArgs eval_args;
  CLI::App* ev = app.add_subcommand("eval", "metrics between clouds");
  ev->add_option("--pred", eval_args.pred_path, "prediction cloud")->required();
  ev->add_option("--gt", eval_args.gt_path, "ground-truth cloud")->required();
  ev->add_option("--partial", eval_args.partial_path,
                 "partial observation (enables fd)");
  ev->add_option("--refs", eval_args.refs_dir,
                 "directory of reference .xyz clouds (enables mmd)");
  ev->add_option("--consistency", eval_args.consistency_ckpt,
                 "checkpoint for rotation-consistency evaluation");
  ev->add_option("--trials", eval_args.trials, "consistency trials")
      ->check(CLI::PositiveNumber);
  ev->add_option("--seed", eval_args.seed, "rng seed");
  ev->add_flag("--verbose", eval_args.verbose, "per-trial consistency values");
  ev->add_flag("--quiet", eval_args.quiet, "metric lines only");
  ev->add_flag("--deterministic", eval_args.deterministic,
               "single-threaded reproducible run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (audit->parsed()) return run_audit(audit_args);
    if (tr->parsed()) return run_train(train_args);
    if (co->parsed()) return run_complete(complete_args);
    if (ev->parsed()) return run_eval(eval_args);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
