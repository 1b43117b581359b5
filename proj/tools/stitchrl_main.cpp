// Command-line front end: every pipeline stage as a subcommand, plus the
// full orchestrated pipeline with resumable stages.

#include <cstdint>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "stitchrl/bridge.hpp"
#include "stitchrl/data.hpp"
#include "stitchrl/dynamics.hpp"
#include "stitchrl/env.hpp"
#include "stitchrl/pipeline.hpp"
#include "stitchrl/rl.hpp"
#include "stitchrl/stitch.hpp"
#include "stitchrl/validity.hpp"

namespace fs = std::filesystem;
using namespace stitchrl;

namespace {

struct GlobalOpts {
  std::string config;
  std::uint64_t seed = 1;
  std::string out = ".";
  int threads = 2;
};

RunConfig load_run_config(const GlobalOpts& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : run_config_from_file(g.config);
  if (!g.out.empty() && g.out != ".") cfg.out_dir = g.out;
  cfg.threads = g.threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"treatment-trajectory stitching toolkit for offline RL"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "seed for the invoked stage");
  app.add_option("--out", g.out, "output directory or file");
  app.add_option("--threads", g.threads, "worker threads");

  // make-env
  auto* cmd_env = app.add_subcommand("make-env", "sample an environment instance");
  std::string env_out = "env.json";
  cmd_env->add_option("--file", env_out, "output path");
  cmd_env->callback([&] {
    EnvSpec spec = g.config.empty() ? EnvSpec{} : env_spec_from_file(g.config);
    spec.seed = g.seed;
    const EnvInstance env = sample_env(spec);
    save_env(env_out, env);
    std::cout << "env " << env.hash << " -> " << env_out << "\n";
  });

  // collect
  auto* cmd_collect = app.add_subcommand("collect", "roll out the behavior policy");
  std::string col_env = "env.json", col_out = "dataset.jsonl";
  int col_episodes = 1024;
  double col_epsilon = 0.25;
  double col_gamma = 1.0;
  cmd_collect->add_option("--env", col_env, "environment file")->check(CLI::ExistingFile);
  cmd_collect->add_option("--file", col_out, "output dataset");
  cmd_collect->add_option("--episodes", col_episodes, "episode count");
  cmd_collect->add_option("--epsilon", col_epsilon, "behavior exploration rate");
  cmd_collect->add_option("--gamma", col_gamma, "return discount");
  cmd_collect->callback([&] {
    const EnvInstance env = load_env(col_env);
    const Dataset ds = collect_dataset(env, col_epsilon, col_episodes, col_gamma, g.seed);
    save_dataset(col_out, ds);
    long remissions = 0;
    for (const auto& tr : ds.trajectories)
      if (tr.outcome == Outcome::Remission) ++remissions;
    std::cout << "collected " << ds.trajectories.size() << " episodes (" << remissions
              << " remissions) -> " << col_out << "\n";
  });

  // split
  auto* cmd_split = app.add_subcommand("split", "show the return-percentile split");
  std::string split_data = "dataset.jsonl";
  double split_q = 50.0, split_gamma = 1.0;
  cmd_split->add_option("--data", split_data)->check(CLI::ExistingFile);
  cmd_split->add_option("--q", split_q, "percentile");
  cmd_split->add_option("--gamma", split_gamma, "return discount");
  cmd_split->callback([&] {
    const Dataset ds = load_dataset(split_data);
    const SplitResult res = split_by_return(ds, split_q, split_gamma);
    std::cout << "phi_" << split_q << " = " << res.phi << ", high " << res.high.size() << ", low "
              << res.low.size() << (res.fallback ? " (fallback index split)" : "") << "\n";
  });

  // stitch
  auto* cmd_stitch = app.add_subcommand("stitch", "direct trajectory stitching");
  std::string stitch_data = "dataset.jsonl", stitch_out = "augmented.jsonl",
              stitch_report = "stitch_report.json";
  cmd_stitch->add_option("--data", stitch_data)->check(CLI::ExistingFile);
  cmd_stitch->add_option("--file", stitch_out, "augmented dataset path");
  cmd_stitch->add_option("--report", stitch_report, "report path");
  cmd_stitch->callback([&] {
    const RunConfig cfg = load_run_config(g);
    const Dataset ds = load_dataset(stitch_data);
    Rng rng(g.seed);
    const AugmentResult res = augment(ds, cfg.stitch, rng);
    save_dataset(stitch_out, res.dataset);
    std::ofstream(stitch_report) << res.report.to_json() << "\n";
    std::cout << "produced " << res.report.produced << "/" << res.report.requested << " ("
              << res.report.misses << " misses) -> " << stitch_out << "\n";
  });

  // train-bridge
  auto* cmd_bridge = app.add_subcommand("train-bridge", "fit the bridging-state generator");
  std::string bridge_data = "dataset.jsonl", bridge_out = "bridge.json",
              bridge_trace = "bridge_trace.csv";
  cmd_bridge->add_option("--data", bridge_data)->check(CLI::ExistingFile);
  cmd_bridge->add_option("--file", bridge_out, "checkpoint path");
  cmd_bridge->add_option("--trace", bridge_trace, "loss trace CSV");
  cmd_bridge->callback([&] {
    const RunConfig cfg = load_run_config(g);
    const Dataset ds = load_dataset(bridge_data);
    Rng rng(g.seed);
    const auto pairs = make_training_pairs(ds, cfg.n_bridge_pairs, cfg.bridge, rng);
    const TrainedBridge tb = train_bridge(pairs, ds.n_symptoms, cfg.bridge, rng);
    save_mlp(bridge_out, tb.net.net, g.seed);
    save_bridge_trace_csv(bridge_trace, tb.trace);
    std::cout << "trained on " << pairs.size() << " pairs, final losses " << tb.trace.back().fwd_loss
              << "/" << tb.trace.back().bwd_loss << " -> " << bridge_out << "\n";
  });

  // train-models
  auto* cmd_models = app.add_subcommand("train-models", "fit inverse-dynamics and reward models");
  std::string models_data = "dataset.jsonl", inv_out = "inverse.json", rew_out = "reward.json";
  cmd_models->add_option("--data", models_data)->check(CLI::ExistingFile);
  cmd_models->add_option("--inverse", inv_out);
  cmd_models->add_option("--reward", rew_out);
  cmd_models->callback([&] {
    const RunConfig cfg = load_run_config(g);
    const Dataset ds = load_dataset(models_data);
    Rng rng(g.seed);
    const TrainedDynamics dyn = train_models(ds, cfg.dyn, rng);
    save_inverse_model(inv_out, dyn.inverse, g.seed);
    save_reward_model(rew_out, dyn.reward, g.seed);
    std::cout << "held-out action accuracy " << dyn.metrics.action_accuracy << ", reward rmse "
              << dyn.metrics.reward_rmse << "\n";
  });

  // augment-sb
  auto* cmd_sb = app.add_subcommand("augment-sb", "stitching with bridged fallback");
  std::string sb_data = "dataset.jsonl", sb_bridge = "bridge.json", sb_inv = "inverse.json",
              sb_rew = "reward.json", sb_out = "augmented.jsonl", sb_report = "sb_report.json";
  cmd_sb->add_option("--data", sb_data)->check(CLI::ExistingFile);
  cmd_sb->add_option("--bridge", sb_bridge)->check(CLI::ExistingFile);
  cmd_sb->add_option("--inverse", sb_inv)->check(CLI::ExistingFile);
  cmd_sb->add_option("--reward", sb_rew)->check(CLI::ExistingFile);
  cmd_sb->add_option("--file", sb_out);
  cmd_sb->add_option("--report", sb_report);
  cmd_sb->callback([&] {
    const RunConfig cfg = load_run_config(g);
    const Dataset ds = load_dataset(sb_data);
    BridgeNet bn{load_mlp(sb_bridge), ds.n_symptoms};
    const InverseDynModel inv = load_inverse_model(sb_inv, ds.n_symptoms, ds.n_treatments);
    const RewardModel rew = load_reward_model(sb_rew, ds.n_symptoms, ds.n_treatments);
    Rng rng(g.seed);
    const SbAugmentResult res = sb_augment(ds, cfg.stitch, bn, cfg.bridge, inv, rew, rng);
    save_dataset(sb_out, res.dataset);
    std::ofstream(sb_report) << res.report.to_json() << "\n";
    std::cout << "direct " << res.report.direct_count << ", bridged " << res.report.sb_count
              << ", misses " << res.report.misses << " -> " << sb_out << "\n";
  });

  // train-rl
  auto* cmd_rl = app.add_subcommand("train-rl", "conservative Q-learning");
  std::string rl_data = "dataset.jsonl", rl_out = "qnet.json";
  bool rl_plain = false;
  cmd_rl->add_option("--data", rl_data)->check(CLI::ExistingFile);
  cmd_rl->add_option("--file", rl_out);
  cmd_rl->add_flag("--plain", rl_plain, "disable the conservative term (fitted-Q baseline)");
  cmd_rl->callback([&] {
    const RunConfig cfg = load_run_config(g);
    const Dataset ds = load_dataset(rl_data);
    Rng rng(g.seed);
    const TrainedQ tq = rl_plain ? train_fitted_q(ds, cfg.rl, rng) : train_cql(ds, cfg.rl, rng);
    save_qnet(rl_out, tq.q, g.seed);
    std::cout << "trained " << cfg.rl.train_steps << " steps, final loss "
              << (tq.loss_trace.empty() ? 0.0 : tq.loss_trace.back()) << " -> " << rl_out << "\n";
  });

  // eval
  auto* cmd_eval = app.add_subcommand("eval", "greedy rollout evaluation");
  std::string eval_env = "env.json", eval_qnet = "qnet.json";
  int eval_episodes = 200;
  cmd_eval->add_option("--env", eval_env)->check(CLI::ExistingFile);
  cmd_eval->add_option("--qnet", eval_qnet)->check(CLI::ExistingFile);
  cmd_eval->add_option("--episodes", eval_episodes);
  cmd_eval->callback([&] {
    const EnvInstance env = load_env(eval_env);
    const QNet q = load_qnet(eval_qnet, env.spec.n_symptoms, env.spec.n_treatments);
    const EvalResult res = evaluate_policy(env, greedy_policy(q), eval_episodes, g.seed);
    std::cout << "mean return " << res.mean_return << " (std " << res.std_return << ") over "
              << res.episodes << " episodes\n";
  });

  // ope
  auto* cmd_ope = app.add_subcommand("ope", "off-policy estimates (WIS and DR)");
  std::string ope_env = "env.json", ope_data = "dataset.jsonl", ope_qnet = "qnet.json";
  double ope_epsilon = 0.25, ope_gamma = 1.0;
  cmd_ope->add_option("--env", ope_env)->check(CLI::ExistingFile);
  cmd_ope->add_option("--data", ope_data)->check(CLI::ExistingFile);
  cmd_ope->add_option("--qnet", ope_qnet)->check(CLI::ExistingFile);
  cmd_ope->add_option("--epsilon", ope_epsilon, "behavior exploration rate used at collection");
  cmd_ope->add_option("--gamma", ope_gamma, "return discount");
  cmd_ope->callback([&] {
    const RunConfig cfg = load_run_config(g);
    const EnvInstance env = load_env(ope_env);
    const Dataset ds = load_dataset(ope_data);
    const QNet q = load_qnet(ope_qnet, env.spec.n_symptoms, env.spec.n_treatments);
    const auto probs = logged_behavior_probs(ds, env, ope_epsilon);
    const PolicyFn pi = greedy_policy(q);
    const WisResult wis = wis_estimate(ds, pi, probs, ope_gamma);
    RlConfig ope_cfg = cfg.rl;
    ope_cfg.train_steps = cfg.ope_train_steps;
    Rng rng(g.seed);
    const double dr = dr_estimate(ds, pi, probs, ope_gamma, ope_cfg, rng);
    std::cout << "wis " << wis.estimate << " (clipped " << wis.clipped_ratios << "), dr " << dr
              << "\n";
  });

  // verify
  auto* cmd_verify = app.add_subcommand("verify", "out-of-distribution bound check");
  std::string ver_aug = "augmented.jsonl", ver_orig = "dataset.jsonl",
              ver_out = "validity.json";
  double ver_delta = 0.95;
  cmd_verify->add_option("--data", ver_aug, "augmented dataset")->check(CLI::ExistingFile);
  cmd_verify->add_option("--original", ver_orig)->check(CLI::ExistingFile);
  cmd_verify->add_option("--file", ver_out);
  cmd_verify->add_option("--delta", ver_delta);
  cmd_verify->callback([&] {
    const Dataset original = load_dataset(ver_orig);
    const Dataset augmented = load_dataset(ver_aug);
    const LipschitzEstimate lip = estimate_lipschitz(original);
    const ValidityReport rep = check_theorem1(augmented, original, ver_delta, lip.value);
    std::ofstream(ver_out) << rep.to_json() << "\n";
    std::cout << rep.to_table();
  });

  // report
  auto* cmd_report = app.add_subcommand("report", "aggregate a finished run directory");
  std::string report_dir;
  cmd_report->add_option("--dir", report_dir, "run directory (defaults to --out)");
  cmd_report->callback([&] {
    write_report(report_dir.empty() ? g.out : report_dir);
    std::cout << "report written under " << (report_dir.empty() ? g.out : report_dir) << "\n";
  });

  // pipeline
  auto* cmd_pipe = app.add_subcommand("pipeline", "run every stage per the config");
  cmd_pipe->callback([&] {
    if (g.config.empty()) throw CLI::ValidationError("pipeline requires --config");
    const RunConfig cfg = load_run_config(g);
    run_pipeline(cfg);
    std::cout << "pipeline complete -> " << cfg.out_dir << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
