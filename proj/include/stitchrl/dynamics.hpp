#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stitchrl/bridge.hpp"
#include "stitchrl/data.hpp"
#include "stitchrl/nn.hpp"
#include "stitchrl/stitch.hpp"

namespace stitchrl {

// Action classifier over concatenated (s_t, s_{t+1}).
struct InverseDynModel {
  Mlp net;
  int state_dim = 0;
  int n_actions = 0;
};

// Scalar reward regressor over concatenated (s_t, one-hot a_t).
struct RewardModel {
  Mlp net;
  int state_dim = 0;
  int n_actions = 0;
};

struct DynTrainConfig {
  int epochs = 20;
  double lr = 1e-3;
  int batch = 256;
  std::vector<int> hidden = {64, 64};
  double holdout_fraction = 0.1;
};

struct DynMetrics {
  double action_accuracy = 0.0;
  double reward_rmse = 0.0;
  long train_transitions = 0;
  long holdout_transitions = 0;
};

struct TrainedDynamics {
  InverseDynModel inverse;
  RewardModel reward;
  DynMetrics metrics;
  std::vector<double> loss_trace;  // mean joint loss per epoch
};

// Joint supervised fit: squared error between softmax action scores and the
// one-hot logged action, plus squared reward error, minibatched with Adam.
// Metrics come from a 10% held-out split.
TrainedDynamics train_models(const Dataset& ds, const DynTrainConfig& cfg, Rng& rng);

// Argmax over action scores; ties break toward the smallest id.
int infer_action(const InverseDynModel& model, const std::vector<double>& s,
                 const std::vector<double>& s_next);

double predict_reward(const RewardModel& model, const std::vector<double>& s, int action);

struct RewardBounds {
  double lo = 0.0;
  double hi = 0.0;
};

// Min/max reward observed across real steps; synthetic rewards are clamped
// into this range.
RewardBounds observed_reward_bounds(const Dataset& ds);

// Labels the bridge chain: step i pairs state i with state i+1 (the final
// state pairs with next_state). All output steps are flagged synthetic.
// States are in raw (dataset) space.
std::vector<Step> complete_bridge(const std::vector<std::vector<double>>& states,
                                  const std::vector<double>& prev_state,
                                  const std::vector<double>& next_state,
                                  const InverseDynModel& inv, const RewardModel& rew,
                                  const RewardBounds& bounds);

struct SbReport {
  int requested = 0;
  int direct_count = 0;
  int sb_count = 0;
  int misses = 0;
  long attempts_total = 0;
  StitchStrategy strategy = StitchStrategy::LowToHigh;
  double delta = 0.0;
  double q = 0.0;
  std::vector<long> similarity_histogram = std::vector<long>(20, 0);
  std::vector<long> k_histogram;  // k_histogram[k] = count of bridges with K = k

  void record_similarity(double sim);
  void record_k(int k);
  std::string to_json() const;
};

struct SbAugmentResult {
  Dataset dataset;
  SbReport report;
};

// Direct stitching with a bridged fallback: slots that exhaust
// max_attempts below delta take the best pair seen, generate K bridging
// states between the two junction states, label them with the dynamics
// models, and assemble prefix + bridge + suffix. The prefix's final step
// also gets a re-inferred action/reward (and a synthetic flag) since its
// original transition no longer applies.
SbAugmentResult sb_augment(const Dataset& ds, const StitchConfig& stitch_cfg,
                           const BridgeNet& bridge_net, const BridgeConfig& bridge_cfg,
                           const InverseDynModel& inv, const RewardModel& rew, Rng& rng);

void save_inverse_model(const std::string& path, const InverseDynModel& m, std::uint64_t seed);
void save_reward_model(const std::string& path, const RewardModel& m, std::uint64_t seed);
InverseDynModel load_inverse_model(const std::string& path, int state_dim, int n_actions);
RewardModel load_reward_model(const std::string& path, int state_dim, int n_actions);

}  // namespace stitchrl
