#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stitchrl/data.hpp"
#include "stitchrl/env.hpp"
#include "stitchrl/nn.hpp"

namespace stitchrl {

struct RlConfig {
  int batch = 256;
  double lr = 3e-5;        // paper-scale CQL learning rate
  long train_steps = 20000;  // desk-scale default; paper-scale is 2e5
  double gamma = 0.0;      // CQL training discount on this benchmark
  double beta = 1.0;       // conservative regularizer weight
  long target_sync = 1000;
  int eval_episodes = 200;
  std::vector<int> hidden = {64, 64};
  int loss_trace_every = 100;

  void validate() const;
};

// State -> action values, with a target copy synced every target_sync steps.
struct QNet {
  Mlp net;
  Mlp target;
  int state_dim = 0;
  int n_actions = 0;
};

// Flat transition record used by the trainers and estimators.
struct Transition {
  const double* s = nullptr;
  const double* s_next = nullptr;  // null on terminal transitions
  int action = 0;
  double reward = 0.0;
  bool terminal = false;
};

// All transitions of all trajectories; the final step of every episode is a
// terminal transition (no bootstrap target).
std::vector<Transition> flatten_transitions(const Dataset& ds);

struct CqlLossParts {
  double bellman = 0.0;
  double conservative = 0.0;  // unweighted gap term
  double total(double beta) const { return bellman + beta * conservative; }
};

// Mean squared Bellman error against the target net plus the conservative
// gap (mean over actions minus data action). Pure evaluation; no gradients.
CqlLossParts cql_loss(const QNet& q, const std::vector<Transition>& batch, const RlConfig& cfg);

struct TrainedQ {
  QNet q;
  std::vector<double> loss_trace;
};

// Minibatch fitted-Q with the conservative regularizer. beta = 0 is the
// plain DQN-style baseline and runs the identical code path.
TrainedQ train_cql(const Dataset& ds, const RlConfig& cfg, Rng& rng);
TrainedQ train_fitted_q(const Dataset& ds, const RlConfig& cfg, Rng& rng);  // beta forced to 0

// Behavior cloning: softmax action scores fit to the logged actions with
// squared error; greedy inference.
struct BcPolicy {
  Mlp net;
  int state_dim = 0;
  int n_actions = 0;
};

BcPolicy train_bc(const Dataset& ds, const RlConfig& cfg, Rng& rng);

// A policy is anything that maps an observation to action probabilities.
using PolicyFn = std::function<std::vector<double>(const std::vector<double>&)>;

PolicyFn greedy_policy(const QNet& q);
PolicyFn greedy_policy(const BcPolicy& pi);
PolicyFn random_policy(int n_actions);
PolicyFn soc_policy(const EnvInstance& env, double epsilon);

int greedy_action(const QNet& q, const std::vector<double>& state);

struct EvalResult {
  double mean_return = 0.0;
  double std_return = 0.0;
  int episodes = 0;
};

// Seeded rollouts; actions drawn from the policy distribution (greedy
// policies are deterministic); cumulative reward is undiscounted.
EvalResult evaluate_policy(const EnvInstance& env, const PolicyFn& policy, int n_episodes,
                           std::uint64_t seed);

// Per-step behavior probability of every logged action, aligned with the
// dataset layout [trajectory][step].
std::vector<std::vector<double>> logged_behavior_probs(const Dataset& ds, const EnvInstance& env,
                                                       double epsilon);

struct WisResult {
  double estimate = 0.0;
  long clipped_ratios = 0;
};

// Trajectory-wise weighted importance sampling with per-step ratios clipped
// to [1e-6, 1e6].
WisResult wis_estimate(const Dataset& ds, const PolicyFn& target,
                       const std::vector<std::vector<double>>& behavior_probs, double gamma);

// Q-function abstraction for the doubly robust estimator.
using QValueFn = std::function<double(const std::vector<double>&, int)>;

// Per-sample doubly robust estimate averaged over all transitions, with an
// explicit Qhat (tests can pass exact tabular values).
double dr_core(const Dataset& ds, const PolicyFn& target,
               const std::vector<std::vector<double>>& behavior_probs, double gamma,
               const QValueFn& qhat);

// SARSA TD fit for Qhat; snapshots are scored on a validation split and the
// lowest-TD-error snapshot wins.
QNet fit_sarsa_q(const Dataset& ds, const RlConfig& cfg, Rng& rng);

double dr_estimate(const Dataset& ds, const PolicyFn& target,
                   const std::vector<std::vector<double>>& behavior_probs, double gamma,
                   const RlConfig& cfg, Rng& rng);

void save_qnet(const std::string& path, const QNet& q, std::uint64_t seed);
QNet load_qnet(const std::string& path, int state_dim, int n_actions);

}  // namespace stitchrl
