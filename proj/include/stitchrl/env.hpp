#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stitchrl/data.hpp"
#include "stitchrl/rng.hpp"

namespace stitchrl {

// Generative knobs for an episodic hidden-state treatment environment.
struct EnvSpec {
  int n_treatments = 16;
  int n_disease_states = 16;
  int n_symptoms = 8;
  double remission_reward = 64.0;
  double adverse_penalty = -64.0;
  double adverse_threshold = 0.999;
  double treatment_cost_min = -4.0;
  double treatment_cost_max = -1.0;
  double symptom_mean_min = 0.0;
  double symptom_mean_max = 2.0;
  double symptom_std_min = 1.0;
  double symptom_std_max = 2.0;
  double remission_prob_min = 0.8;
  double remission_prob_max = 1.0;
  double transition_prob_min = 0.01;
  double transition_prob_max = 0.2;
  int max_episode_len = 32;
  std::uint64_t seed = 0;

  // Fraction of disease states that can remit (rounded up), and how many
  // treatments are effective per remitting state.
  double remission_state_fraction = 0.25;
  int effective_treatments_per_state = 2;

  void validate() const;  // throws ConfigError naming the violated field
};

// A fully sampled environment: ground-truth dynamics for one "disease".
struct EnvInstance {
  EnvSpec spec;
  // transition[s][a] is a distribution over next disease states.
  std::vector<std::vector<std::vector<double>>> transition;
  std::vector<std::vector<double>> emission_mean;  // [state][symptom]
  std::vector<std::vector<double>> emission_std;   // [state][symptom]
  std::vector<std::vector<double>> remission_prob; // [state][treatment]
  std::vector<double> adverse_hazard;              // [state]
  std::vector<double> treatment_cost;              // [treatment]
  std::vector<int> remission_states;
  // Per-treatment symptom prototype used by the standard-of-care policy:
  // emission means weighted by where the treatment can trigger remission.
  std::vector<std::vector<double>> soc_prototype;  // [treatment][symptom]
  std::string hash;  // provenance: hash of (spec, seed)
};

struct StepResult {
  int next_hidden = 0;
  std::vector<double> observation;
  double reward = 0.0;
  bool done = false;
  Outcome outcome = Outcome::Truncated;  // meaningful only when done
};

// Deterministic function of (spec, spec.seed).
EnvInstance sample_env(const EnvSpec& spec);

std::string env_hash(const EnvSpec& spec);

// Draws the symptom observation emitted by a hidden disease state.
std::vector<double> observe(const EnvInstance& env, int hidden_state, Rng& rng);

int initial_hidden_state(const EnvInstance& env, Rng& rng);

// One environment step. Remission is checked before adverse events; both
// terminate the episode and add their reward on top of the treatment cost.
StepResult step(const EnvInstance& env, int hidden_state, int action, Rng& rng);

// Standard-of-care stand-in: with prob 1-epsilon the treatment whose
// prototype best matches the observation (negative Euclidean distance),
// else uniform random. Full support whenever epsilon > 0.
int behavior_policy(const std::vector<double>& observation, const EnvInstance& env,
                    double epsilon, Rng& rng);

// Exact action distribution of behavior_policy for a given observation.
std::vector<double> behavior_action_probs(const std::vector<double>& observation,
                                          const EnvInstance& env, double epsilon);

// Index of the prototype-matching treatment (the epsilon = 0 action).
int behavior_greedy_action(const std::vector<double>& observation, const EnvInstance& env);

// Rolls out n_episodes under the behavior policy with per-episode seeds
// derived as seed XOR episode index. Hidden states are not stored.
Dataset collect_dataset(const EnvInstance& env, double epsilon, int n_episodes, double gamma,
                        std::uint64_t seed);

void save_env(const std::string& path, const EnvInstance& env);
EnvInstance load_env(const std::string& path);

// EnvSpec from an INI-style key = value config file ([env] section).
EnvSpec env_spec_from_file(const std::string& path);

}  // namespace stitchrl
