#include "stitchrl/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "stitchrl/config.hpp"

namespace stitchrl {

void EnvSpec::validate() const {
  auto check = [](bool ok, const char* field, const char* what) {
    if (!ok) throw ConfigError(std::string("EnvSpec.") + field + ": " + what);
  };
  check(n_treatments >= 1, "n_treatments", "must be >= 1");
  check(n_disease_states >= 1, "n_disease_states", "must be >= 1");
  check(n_symptoms >= 1, "n_symptoms", "must be >= 1");
  check(max_episode_len >= 1, "max_episode_len", "must be >= 1");
  check(adverse_threshold > 0.0 && adverse_threshold < 1.0, "adverse_threshold",
        "must be in (0,1)");
  check(treatment_cost_min <= treatment_cost_max, "treatment_cost_range",
        "lower bound must be <= upper bound");
  check(symptom_mean_min <= symptom_mean_max, "symptom_mean_range",
        "lower bound must be <= upper bound");
  check(symptom_std_min <= symptom_std_max, "symptom_std_range",
        "lower bound must be <= upper bound");
  check(symptom_std_min > 0.0, "symptom_std_range", "must be strictly positive");
  check(remission_prob_min <= remission_prob_max, "remission_prob_range",
        "lower bound must be <= upper bound");
  check(remission_prob_min >= 0.0 && remission_prob_max <= 1.0, "remission_prob_range",
        "must lie in [0,1]");
  check(transition_prob_min <= transition_prob_max, "transition_prob_range",
        "lower bound must be <= upper bound");
  check(transition_prob_min > 0.0, "transition_prob_range", "must be strictly positive");
  check(remission_state_fraction > 0.0 && remission_state_fraction <= 1.0,
        "remission_state_fraction", "must be in (0,1]");
  check(effective_treatments_per_state >= 1, "effective_treatments_per_state", "must be >= 1");
}

namespace {

std::string canonical_spec_string(const EnvSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << s.n_treatments << '|' << s.n_disease_states << '|' << s.n_symptoms << '|'
     << s.remission_reward << '|' << s.adverse_penalty << '|' << s.adverse_threshold << '|'
     << s.treatment_cost_min << '|' << s.treatment_cost_max << '|' << s.symptom_mean_min << '|'
     << s.symptom_mean_max << '|' << s.symptom_std_min << '|' << s.symptom_std_max << '|'
     << s.remission_prob_min << '|' << s.remission_prob_max << '|' << s.transition_prob_min << '|'
     << s.transition_prob_max << '|' << s.max_episode_len << '|' << s.seed << '|'
     << s.remission_state_fraction << '|' << s.effective_treatments_per_state;
  return os.str();
}

std::string fnv1a_hex(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace

std::string env_hash(const EnvSpec& spec) { return fnv1a_hex(canonical_spec_string(spec)); }

EnvInstance sample_env(const EnvSpec& spec) {
  spec.validate();
  EnvInstance env;
  env.spec = spec;
  env.hash = env_hash(spec);
  Rng rng(spec.seed);
  const int S = spec.n_disease_states;
  const int A = spec.n_treatments;
  const int D = spec.n_symptoms;

  // Transition tensor: raw weights drawn inside transition_prob_range,
  // rows normalized to sum to 1.
  env.transition.assign(S, std::vector<std::vector<double>>(A, std::vector<double>(S, 0.0)));
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      double total = 0.0;
      for (int s2 = 0; s2 < S; ++s2) {
        const double w = rng.uniform(spec.transition_prob_min, spec.transition_prob_max);
        env.transition[s][a][s2] = w;
        total += w;
      }
      for (int s2 = 0; s2 < S; ++s2) env.transition[s][a][s2] /= total;
    }

  env.emission_mean.assign(S, std::vector<double>(D));
  env.emission_std.assign(S, std::vector<double>(D));
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < D; ++k) {
      env.emission_mean[s][k] = rng.uniform(spec.symptom_mean_min, spec.symptom_mean_max);
      env.emission_std[s][k] = rng.uniform(spec.symptom_std_min, spec.symptom_std_max);
    }

  // Remission-capable states: a fixed fraction of states (rounded up),
  // chosen without replacement; each gets a sparse set of effective
  // treatments whose remission probability is drawn from the spec range.
  const int n_remit = std::min(
      S, static_cast<int>(std::ceil(spec.remission_state_fraction * static_cast<double>(S))));
  std::vector<int> state_order(S);
  std::iota(state_order.begin(), state_order.end(), 0);
  for (int i = S - 1; i > 0; --i)
    std::swap(state_order[i], state_order[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
  env.remission_states.assign(state_order.begin(), state_order.begin() + n_remit);
  std::sort(env.remission_states.begin(), env.remission_states.end());

  env.remission_prob.assign(S, std::vector<double>(A, 0.0));
  const int n_eff = std::min(A, spec.effective_treatments_per_state);
  for (int s : env.remission_states) {
    std::vector<int> treat_order(A);
    std::iota(treat_order.begin(), treat_order.end(), 0);
    for (int i = A - 1; i > 0; --i)
      std::swap(treat_order[i], treat_order[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
    for (int j = 0; j < n_eff; ++j)
      env.remission_prob[s][treat_order[j]] =
          rng.uniform(spec.remission_prob_min, spec.remission_prob_max);
  }

  // Hazard = (1 - adverse_threshold) scaled by a per-state severity in [0.5, 2].
  env.adverse_hazard.assign(S, 0.0);
  for (int s = 0; s < S; ++s)
    env.adverse_hazard[s] = (1.0 - spec.adverse_threshold) * rng.uniform(0.5, 2.0);

  env.treatment_cost.assign(A, 0.0);
  for (int a = 0; a < A; ++a)
    env.treatment_cost[a] = rng.uniform(spec.treatment_cost_min, spec.treatment_cost_max);

  // Standard-of-care prototypes: emission means weighted by each
  // treatment's remission probability (small floor keeps them defined for
  // treatments that never remit).
  env.soc_prototype.assign(A, std::vector<double>(D, 0.0));
  constexpr double kFloor = 1e-3;
  for (int a = 0; a < A; ++a) {
    double total = 0.0;
    for (int s = 0; s < S; ++s) {
      const double w = env.remission_prob[s][a] + kFloor;
      for (int k = 0; k < D; ++k) env.soc_prototype[a][k] += w * env.emission_mean[s][k];
      total += w;
    }
    for (int k = 0; k < D; ++k) env.soc_prototype[a][k] /= total;
  }
  return env;
}

std::vector<double> observe(const EnvInstance& env, int hidden_state, Rng& rng) {
  const int D = env.spec.n_symptoms;
  std::vector<double> obs(D);
  for (int k = 0; k < D; ++k)
    obs[k] = rng.normal(env.emission_mean[hidden_state][k], env.emission_std[hidden_state][k]);
  return obs;
}

int initial_hidden_state(const EnvInstance& env, Rng& rng) {
  return static_cast<int>(rng.uniform_int(env.spec.n_disease_states));
}

StepResult step(const EnvInstance& env, int hidden_state, int action, Rng& rng) {
  if (hidden_state < 0 || hidden_state >= env.spec.n_disease_states)
    throw UsageError("step: hidden_state " + std::to_string(hidden_state) + " out of range");
  if (action < 0 || action >= env.spec.n_treatments)
    throw UsageError("step: action " + std::to_string(action) + " out of range");

  StepResult res;
  res.reward = env.treatment_cost[action];

  // Fixed draw order: remission, next state, adverse, observation.
  const double u_remit = rng.uniform();
  res.next_hidden =
      rng.categorical(env.transition[hidden_state][action]);
  const double u_adverse = rng.uniform();
  res.observation = observe(env, res.next_hidden, rng);

  if (u_remit < env.remission_prob[hidden_state][action]) {
    res.reward += env.spec.remission_reward;
    res.done = true;
    res.outcome = Outcome::Remission;
    return res;
  }
  if (u_adverse < env.adverse_hazard[res.next_hidden]) {
    res.reward += env.spec.adverse_penalty;
    res.done = true;
    res.outcome = Outcome::AdverseEvent;
    return res;
  }
  return res;
}

int behavior_greedy_action(const std::vector<double>& observation, const EnvInstance& env) {
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < env.spec.n_treatments; ++a) {
    double d2 = 0.0;
    for (int k = 0; k < env.spec.n_symptoms; ++k) {
      const double c = observation[k] - env.soc_prototype[a][k];
      d2 += c * c;
    }
    const double score = -d2;
    if (score > best_score) {
      best_score = score;
      best = a;
    }
  }
  return best;
}

int behavior_policy(const std::vector<double>& observation, const EnvInstance& env, double epsilon,
                    Rng& rng) {
  if (epsilon < 0.0 || epsilon > 1.0) throw UsageError("behavior_policy: epsilon not in [0,1]");
  if (rng.uniform() < epsilon)
    return static_cast<int>(rng.uniform_int(env.spec.n_treatments));
  return behavior_greedy_action(observation, env);
}

std::vector<double> behavior_action_probs(const std::vector<double>& observation,
                                          const EnvInstance& env, double epsilon) {
  const int A = env.spec.n_treatments;
  std::vector<double> probs(A, epsilon / A);
  probs[behavior_greedy_action(observation, env)] += 1.0 - epsilon;
  return probs;
}

Dataset collect_dataset(const EnvInstance& env, double epsilon, int n_episodes, double gamma,
                        std::uint64_t seed) {
  if (n_episodes < 1) throw UsageError("collect_dataset: n_episodes must be >= 1");
  (void)gamma;  // returns are recomputed downstream; kept for interface parity
  Dataset ds;
  ds.env_hash = env.hash;
  ds.n_symptoms = env.spec.n_symptoms;
  ds.n_treatments = env.spec.n_treatments;
  ds.trajectories.resize(n_episodes);
  for (int ep = 0; ep < n_episodes; ++ep) {
    Rng rng(seed ^ static_cast<std::uint64_t>(ep));
    Trajectory& tr = ds.trajectories[ep];
    tr.id = "ep-" + std::to_string(ep);
    tr.source = Source::Real;
    int hidden = initial_hidden_state(env, rng);
    std::vector<double> obs = observe(env, hidden, rng);
    tr.outcome = Outcome::Truncated;
    for (int t = 0; t < env.spec.max_episode_len; ++t) {
      const int action = behavior_policy(obs, env, epsilon, rng);
      StepResult sr = step(env, hidden, action, rng);
      tr.steps.push_back(Step{obs, action, sr.reward, false});
      if (sr.done) {
        tr.outcome = sr.outcome;
        break;
      }
      hidden = sr.next_hidden;
      obs = std::move(sr.observation);
    }
  }
  ds.norm_stats = compute_norm_stats(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json spec_to_json(const EnvSpec& s) {
  return nlohmann::json{{"n_treatments", s.n_treatments},
                        {"n_disease_states", s.n_disease_states},
                        {"n_symptoms", s.n_symptoms},
                        {"remission_reward", s.remission_reward},
                        {"adverse_penalty", s.adverse_penalty},
                        {"adverse_threshold", s.adverse_threshold},
                        {"treatment_cost_min", s.treatment_cost_min},
                        {"treatment_cost_max", s.treatment_cost_max},
                        {"symptom_mean_min", s.symptom_mean_min},
                        {"symptom_mean_max", s.symptom_mean_max},
                        {"symptom_std_min", s.symptom_std_min},
                        {"symptom_std_max", s.symptom_std_max},
                        {"remission_prob_min", s.remission_prob_min},
                        {"remission_prob_max", s.remission_prob_max},
                        {"transition_prob_min", s.transition_prob_min},
                        {"transition_prob_max", s.transition_prob_max},
                        {"max_episode_len", s.max_episode_len},
                        {"seed", s.seed},
                        {"remission_state_fraction", s.remission_state_fraction},
                        {"effective_treatments_per_state", s.effective_treatments_per_state}};
}

EnvSpec spec_from_json(const nlohmann::json& j) {
  EnvSpec s;
  s.n_treatments = j.at("n_treatments").get<int>();
  s.n_disease_states = j.at("n_disease_states").get<int>();
  s.n_symptoms = j.at("n_symptoms").get<int>();
  s.remission_reward = j.at("remission_reward").get<double>();
  s.adverse_penalty = j.at("adverse_penalty").get<double>();
  s.adverse_threshold = j.at("adverse_threshold").get<double>();
  s.treatment_cost_min = j.at("treatment_cost_min").get<double>();
  s.treatment_cost_max = j.at("treatment_cost_max").get<double>();
  s.symptom_mean_min = j.at("symptom_mean_min").get<double>();
  s.symptom_mean_max = j.at("symptom_mean_max").get<double>();
  s.symptom_std_min = j.at("symptom_std_min").get<double>();
  s.symptom_std_max = j.at("symptom_std_max").get<double>();
  s.remission_prob_min = j.at("remission_prob_min").get<double>();
  s.remission_prob_max = j.at("remission_prob_max").get<double>();
  s.transition_prob_min = j.at("transition_prob_min").get<double>();
  s.transition_prob_max = j.at("transition_prob_max").get<double>();
  s.max_episode_len = j.at("max_episode_len").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.remission_state_fraction = j.at("remission_state_fraction").get<double>();
  s.effective_treatments_per_state = j.at("effective_treatments_per_state").get<int>();
  return s;
}

}  // namespace

void save_env(const std::string& path, const EnvInstance& env) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = "env_instance";
  j["hash"] = env.hash;
  j["spec"] = spec_to_json(env.spec);
  j["transition"] = env.transition;
  j["emission_mean"] = env.emission_mean;
  j["emission_std"] = env.emission_std;
  j["remission_prob"] = env.remission_prob;
  j["adverse_hazard"] = env.adverse_hazard;
  j["treatment_cost"] = env.treatment_cost;
  j["remission_states"] = env.remission_states;
  j["soc_prototype"] = env.soc_prototype;
  std::ofstream out(path);
  if (!out) throw UsageError("save_env: cannot open " + path);
  out << j.dump() << "\n";
}

EnvInstance load_env(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("load_env: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_env: " + path + ": " + e.what());
  }
  if (j.value("format_version", -1) != 1)
    throw ParseError("load_env: " + path + ": unsupported format_version");
  EnvInstance env;
  env.spec = spec_from_json(j.at("spec"));
  env.hash = j.at("hash").get<std::string>();
  if (env.hash != env_hash(env.spec))
    throw ParseError("load_env: " + path + ": stored hash does not match spec");
  env.transition = j.at("transition").get<decltype(env.transition)>();
  env.emission_mean = j.at("emission_mean").get<decltype(env.emission_mean)>();
  env.emission_std = j.at("emission_std").get<decltype(env.emission_std)>();
  env.remission_prob = j.at("remission_prob").get<decltype(env.remission_prob)>();
  env.adverse_hazard = j.at("adverse_hazard").get<decltype(env.adverse_hazard)>();
  env.treatment_cost = j.at("treatment_cost").get<decltype(env.treatment_cost)>();
  env.remission_states = j.at("remission_states").get<decltype(env.remission_states)>();
  env.soc_prototype = j.at("soc_prototype").get<decltype(env.soc_prototype)>();
  return env;
}

EnvSpec env_spec_from_file(const std::string& path) {
  const KeyValueConfig cfg = KeyValueConfig::from_file(path);
  EnvSpec s;
  s.n_treatments = cfg.get_int("env.n_treatments", s.n_treatments);
  s.n_disease_states = cfg.get_int("env.n_disease_states", s.n_disease_states);
  s.n_symptoms = cfg.get_int("env.n_symptoms", s.n_symptoms);
  s.remission_reward = cfg.get_double("env.remission_reward", s.remission_reward);
  s.adverse_penalty = cfg.get_double("env.adverse_penalty", s.adverse_penalty);
  s.adverse_threshold = cfg.get_double("env.adverse_threshold", s.adverse_threshold);
  s.treatment_cost_min = cfg.get_double("env.treatment_cost_min", s.treatment_cost_min);
  s.treatment_cost_max = cfg.get_double("env.treatment_cost_max", s.treatment_cost_max);
  s.symptom_mean_min = cfg.get_double("env.symptom_mean_min", s.symptom_mean_min);
  s.symptom_mean_max = cfg.get_double("env.symptom_mean_max", s.symptom_mean_max);
  s.symptom_std_min = cfg.get_double("env.symptom_std_min", s.symptom_std_min);
  s.symptom_std_max = cfg.get_double("env.symptom_std_max", s.symptom_std_max);
  s.remission_prob_min = cfg.get_double("env.remission_prob_min", s.remission_prob_min);
  s.remission_prob_max = cfg.get_double("env.remission_prob_max", s.remission_prob_max);
  s.transition_prob_min = cfg.get_double("env.transition_prob_min", s.transition_prob_min);
  s.transition_prob_max = cfg.get_double("env.transition_prob_max", s.transition_prob_max);
  s.max_episode_len = cfg.get_int("env.max_episode_len", s.max_episode_len);
  s.seed = cfg.get_u64("env.seed", s.seed);
  s.remission_state_fraction =
      cfg.get_double("env.remission_state_fraction", s.remission_state_fraction);
  s.effective_treatments_per_state =
      cfg.get_int("env.effective_treatments_per_state", s.effective_treatments_per_state);
  s.validate();
  return s;
}

}  // namespace stitchrl
