#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stitchrl/bridge.hpp"
#include "stitchrl/dynamics.hpp"
#include "stitchrl/env.hpp"
#include "stitchrl/rl.hpp"
#include "stitchrl/stitch.hpp"

namespace stitchrl {

// One experiment arm: how (if at all) the dataset is augmented before the
// RL training stage. Ablation arms are the same machinery under different
// stitch configurations.
enum class AugmentMode { None, Direct, Bridged };

struct Arm {
  std::string name;
  AugmentMode mode = AugmentMode::None;
  StitchConfig stitch;  // resolved per arm (strategy/q/sampling overrides)
};

struct RunConfig {
  EnvSpec env;  // seed field is overridden by env_seeds per environment
  StitchConfig stitch;
  BridgeConfig bridge;
  RlConfig rl;
  DynTrainConfig dyn;

  std::string label = "restricted";  // dataset_variant column in metrics
  int n_episodes = 1024;
  double behavior_epsilon = 0.25;
  int n_bridge_pairs = 4096;
  long ope_train_steps = 2000;  // SARSA fit budget for the DR estimator
  std::vector<std::uint64_t> env_seeds = {1};
  std::vector<std::uint64_t> rl_seeds = {1};
  std::vector<std::string> variants = {"backbone"};
  std::string out_dir = "runs/out";
  int threads = 2;
  // Augmentation volume as a fraction of the dataset (stitch.m_target wins
  // when positive; this keeps presets size-relative).
  double m_fraction = 1.0;

  void validate() const;
  std::string canonical_string() const;
  std::string config_hash() const;
};

RunConfig run_config_from_file(const std::string& path);
RunConfig run_config_from_string(const std::string& text);

// Known arm names: backbone, stitch, stitch_sb, stitch_q75,
// stitch_high_to_low, stitch_random, stitch_uniform.
Arm resolve_arm(const std::string& name, const RunConfig& cfg);

struct MetricsRow {
  std::string run_id;
  std::string variant;   // arm name
  std::string method;    // cql | dqn | bc | random
  std::string dataset_variant;
  std::uint64_t env_seed = 0;
  std::uint64_t rl_seed = 0;
  std::string env_hash;
  std::string config_hash;
  double mean_return = 0.0;
  double std_return = 0.0;
  double wis = 0.0;
  double dr = 0.0;
  long train_steps = 0;
  double beta = 0.0;
  double gamma = 0.0;
  int produced = 0;   // augmentation volume behind this run
  int sb_count = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

// Runs every stage for every (env seed, arm, rl seed): environment,
// dataset, augmentation, training, evaluation, off-policy estimates,
// validity checks, and the aggregate report. Stages whose artifact already
// exists with a matching config hash are skipped, so interrupted runs
// resume. Throws with the stage name and artifact path on failure.
void run_pipeline(const RunConfig& cfg);

// Rebuilds the aggregate outputs (summary.csv, comparison.csv,
// k_histogram.csv, returns.svg/.txt) from per-run metrics under dir.
// Fails listing missing artifacts if the run is incomplete, and refuses to
// aggregate rows whose env hashes disagree for the same environment.
void write_report(const std::string& dir);

// Simple deterministic index-striped thread pool helper.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace stitchrl
