#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "stitchrl/env.hpp"
#include "stitchrl/rl.hpp"

using namespace stitchrl;

namespace {

// Two-state bandit-style MDP: states A = (1,0) and B = (0,1); in both
// states action 0 pays 1 and action 1 pays 0. Episodes have two steps.
Dataset two_state_dataset(int n_traj, std::uint64_t seed, bool hold_out_action_in_b = false) {
  Dataset ds;
  ds.env_hash = "two-state";
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Rng rng(seed);
  for (int i = 0; i < n_traj; ++i) {
    Trajectory tr;
    tr.id = "t" + std::to_string(i);
    for (int t = 0; t < 2; ++t) {
      const bool in_a = t == 0 ? (i % 2 == 0) : (i % 3 == 0);
      int action = static_cast<int>(rng.uniform_int(2));
      if (hold_out_action_in_b && !in_a) action = 0;  // B only ever logs action 0
      Step st;
      st.state = in_a ? std::vector<double>{1.0, 0.0} : std::vector<double>{0.0, 1.0};
      st.action = action;
      st.reward = action == 0 ? 1.0 : 0.0;
      tr.steps.push_back(std::move(st));
    }
    ds.trajectories.push_back(std::move(tr));
  }
  ds.norm_stats = compute_norm_stats(ds);
  return ds;
}

QNet fixed_qnet(const std::vector<double>& action_values) {
  MlpSpec spec;
  spec.widths = {2, static_cast<int>(action_values.size())};
  QNet q;
  q.net = make_mlp(spec, 1);
  std::fill(q.net.w[0].v.begin(), q.net.w[0].v.end(), 0.0);
  q.net.b[0] = action_values;
  q.target = q.net;
  q.state_dim = 2;
  q.n_actions = static_cast<int>(action_values.size());
  return q;
}

RlConfig small_cfg() {
  RlConfig cfg;
  cfg.batch = 32;
  cfg.lr = 1e-3;
  cfg.train_steps = 1500;
  cfg.gamma = 0.0;
  cfg.beta = 1.0;
  cfg.hidden = {16, 16};
  cfg.eval_episodes = 50;
  return cfg;
}

double conservative_gap(const QNet& q, const Dataset& ds) {
  // mean over transitions of mean_a Q(s,a) - Q(s, a_data)
  double total = 0.0;
  long n = 0;
  for (const Trajectory& tr : ds.trajectories)
    for (const Step& st : tr.steps) {
      Tensor2 in(1, 2);
      in.v = {st.state[0], st.state[1]};
      const Tensor2 out = forward(q.net, in);
      double mean_q = 0.0;
      for (int a = 0; a < q.n_actions; ++a) mean_q += out.at(0, a);
      mean_q /= q.n_actions;
      total += mean_q - out.at(0, st.action);
      ++n;
    }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("cql_loss: constant Q makes the conservative term vanish") {
  const QNet q = fixed_qnet({2.0, 2.0, 2.0});
  Dataset ds = two_state_dataset(4, 1);
  const auto batch = flatten_transitions(ds);
  RlConfig cfg = small_cfg();
  const CqlLossParts parts = cql_loss(q, batch, cfg);
  CHECK(parts.conservative == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cql_loss: beta 0 collapses to the Bellman error") {
  const QNet q = fixed_qnet({0.5, -0.5});
  Dataset ds = two_state_dataset(6, 2);
  const auto batch = flatten_transitions(ds);
  RlConfig cfg = small_cfg();
  const CqlLossParts parts = cql_loss(q, batch, cfg);
  CHECK(parts.total(0.0) == parts.bellman);
}

TEST_CASE("cql_loss: hand-evaluated tabular case") {
  // Q(s, .) = (1, 3), data action 0, r = 1, gamma = 0, beta = 1:
  // Bellman (1-1)^2 = 0, conservative (2 - 1) = 1, total 1.
  const QNet q = fixed_qnet({1.0, 3.0});
  Dataset ds;
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Trajectory tr;
  tr.id = "x";
  tr.steps.push_back(Step{{1.0, 0.0}, 0, 1.0, false});
  ds.trajectories.push_back(tr);
  const auto batch = flatten_transitions(ds);
  RlConfig cfg = small_cfg();
  cfg.gamma = 0.0;
  const CqlLossParts parts = cql_loss(q, batch, cfg);
  CHECK(parts.bellman == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(parts.conservative == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(parts.total(1.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("train_cql: recovers the optimal greedy policy on the two-state MDP") {
  const Dataset ds = two_state_dataset(64, 3);
  RlConfig cfg = small_cfg();
  Rng rng(11);
  const TrainedQ tq = train_cql(ds, cfg, rng);
  // gamma = 0 means Q* = E[r | s, a]; greedy must pick action 0 everywhere.
  CHECK(greedy_action(tq.q, {1.0, 0.0}) == 0);
  CHECK(greedy_action(tq.q, {0.0, 1.0}) == 0);
}

TEST_CASE("train_cql: zero steps returns the initialized net; small batches error") {
  const Dataset ds = two_state_dataset(16, 4);
  RlConfig cfg = small_cfg();
  cfg.train_steps = 0;
  Rng r1(5), r2(5);
  const TrainedQ a = train_cql(ds, cfg, r1);
  const TrainedQ b = train_cql(ds, cfg, r2);
  CHECK(a.q.net.w[0].v == b.q.net.w[0].v);
  CHECK(a.loss_trace.empty());
  RlConfig big = cfg;
  big.batch = 10000;
  Rng r3(5);
  CHECK_THROWS_AS(train_cql(ds, big, r3), UsageError);
}

TEST_CASE("train_cql: OOD action suppressed where only one action is logged") {
  const Dataset ds = two_state_dataset(64, 7, /*hold_out_action_in_b=*/true);
  RlConfig cfg = small_cfg();
  cfg.train_steps = 2500;
  Rng rng(13);
  const TrainedQ tq = train_cql(ds, cfg, rng);
  Tensor2 in(1, 2);
  in.v = {0.0, 1.0};  // state B, where only action 0 was ever taken
  const Tensor2 out = forward(tq.q.net, in);
  const double mean_q = (out.at(0, 0) + out.at(0, 1)) / 2.0;
  CHECK(out.at(0, 0) >= mean_q);
}

TEST_CASE("train_cql vs train_fitted_q: bit-identical with beta 0 semantics") {
  const Dataset ds = two_state_dataset(32, 9);
  RlConfig cfg = small_cfg();
  cfg.train_steps = 400;
  cfg.beta = 0.0;
  Rng r1(21);
  const TrainedQ a = train_cql(ds, cfg, r1);
  RlConfig cfg_b = small_cfg();
  cfg_b.train_steps = 400;
  cfg_b.beta = 7.5;  // train_fitted_q must force this to zero
  Rng r2(21);
  const TrainedQ b = train_fitted_q(ds, cfg_b, r2);
  for (int l = 0; l < a.q.net.n_layers(); ++l) {
    CHECK(a.q.net.w[l].v == b.q.net.w[l].v);
    CHECK(a.q.net.b[l] == b.q.net.b[l]);
  }
  CHECK(a.loss_trace == b.loss_trace);
}

TEST_CASE("conservative pressure: beta 1 shrinks the data-action gap vs beta 0") {
  const Dataset ds = two_state_dataset(64, 15, true);
  double gap_beta1 = 0.0, gap_beta0 = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RlConfig cfg = small_cfg();
    cfg.train_steps = 1200;
    Rng r1(seed), r2(seed);
    cfg.beta = 1.0;
    gap_beta1 += conservative_gap(train_cql(ds, cfg, r1).q, ds);
    cfg.beta = 0.0;
    gap_beta0 += conservative_gap(train_cql(ds, cfg, r2).q, ds);
  }
  CHECK(gap_beta1 / 5.0 < gap_beta0 / 5.0);
}

TEST_CASE("train_bc: matches a deterministic behavior policy on held-out data") {
  const EnvInstance env = sample_env(EnvSpec{});
  const Dataset ds = collect_dataset(env, 0.0, 256, 1.0, 17);  // epsilon 0: deterministic
  RlConfig cfg = small_cfg();
  cfg.train_steps = 3000;
  cfg.hidden = {64, 64};
  Rng rng(3);
  const BcPolicy pi = train_bc(ds, cfg, rng);
  const PolicyFn bc = greedy_policy(pi);
  const Dataset held = collect_dataset(env, 0.0, 64, 1.0, 999);
  long match = 0, total = 0;
  for (const Trajectory& tr : held.trajectories)
    for (const Step& st : tr.steps) {
      const auto probs = bc(st.state);
      int argmax = 0;
      for (int a = 1; a < static_cast<int>(probs.size()); ++a)
        if (probs[a] > probs[argmax]) argmax = a;
      if (argmax == st.action) ++match;
      ++total;
    }
  CHECK(static_cast<double>(match) / total >= 0.95);
}

TEST_CASE("train_bc: single-action dataset always emits that action") {
  Dataset ds = two_state_dataset(32, 19);
  for (Trajectory& tr : ds.trajectories)
    for (Step& st : tr.steps) st.action = 1;
  RlConfig cfg = small_cfg();
  cfg.train_steps = 500;
  Rng rng(5);
  const BcPolicy pi = train_bc(ds, cfg, rng);
  const PolicyFn bc = greedy_policy(pi);
  for (const auto& state : {std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}}) {
    const auto probs = bc(state);
    CHECK(probs[1] == 1.0);
  }
}

TEST_CASE("evaluate_policy: rigged remission env returns 64 + cost exactly") {
  EnvInstance env = sample_env(EnvSpec{});
  const int magic = 5;
  for (auto& row : env.remission_prob) {
    std::fill(row.begin(), row.end(), 0.0);
    row[magic] = 1.0;
  }
  const PolicyFn always = [&](const std::vector<double>&) {
    std::vector<double> p(env.spec.n_treatments, 0.0);
    p[magic] = 1.0;
    return p;
  };
  const EvalResult res = evaluate_policy(env, always, 64, 31);
  CHECK(res.mean_return == doctest::Approx(64.0 + env.treatment_cost[magic]).epsilon(1e-12));
  CHECK(res.std_return == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("evaluate_policy: deterministic in (env, policy, seed)") {
  const EnvInstance env = sample_env(EnvSpec{});
  const PolicyFn pi = soc_policy(env, 0.2);
  const EvalResult a = evaluate_policy(env, pi, 100, 7);
  const EvalResult b = evaluate_policy(env, pi, 100, 7);
  CHECK(a.mean_return == b.mean_return);
  CHECK(a.std_return == b.std_return);
}

TEST_CASE("wis_estimate: target equal to behavior reduces to the mean return") {
  const EnvInstance env = sample_env(EnvSpec{});
  const double eps = 0.3, gamma = 0.97;
  const Dataset ds = collect_dataset(env, eps, 128, gamma, 23);
  const auto probs = logged_behavior_probs(ds, env, eps);
  const WisResult res = wis_estimate(ds, soc_policy(env, eps), probs, gamma);
  double mean = 0.0;
  for (const Trajectory& tr : ds.trajectories) mean += discounted_return(tr, gamma);
  mean /= static_cast<double>(ds.trajectories.size());
  CHECK(res.estimate == doctest::Approx(mean).epsilon(1e-9));
  CHECK(res.clipped_ratios == 0);
}

TEST_CASE("wis_estimate: hand-computed weights (2,1) with returns (10,4) give 8") {
  Dataset ds;
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Trajectory t1;
  t1.id = "a";
  t1.steps.push_back(Step{{1.0, 0.0}, 0, 10.0, false});
  Trajectory t2;
  t2.id = "b";
  t2.steps.push_back(Step{{0.0, 1.0}, 0, 4.0, false});
  ds.trajectories = {t1, t2};
  ds.norm_stats = compute_norm_stats(ds);
  const std::vector<std::vector<double>> behavior = {{0.5}, {1.0}};
  const PolicyFn target = [](const std::vector<double>&) {
    return std::vector<double>{1.0, 0.0};
  };
  const WisResult res = wis_estimate(ds, target, behavior, 1.0);
  CHECK(res.estimate == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("wis_estimate: zero target probability floors that trajectory's weight") {
  Dataset ds;
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Trajectory t1;
  t1.id = "a";
  t1.steps.push_back(Step{{1.0, 0.0}, 1, 100.0, false});  // target never takes action 1
  Trajectory t2;
  t2.id = "b";
  t2.steps.push_back(Step{{0.0, 1.0}, 0, 4.0, false});
  ds.trajectories = {t1, t2};
  ds.norm_stats = compute_norm_stats(ds);
  const std::vector<std::vector<double>> behavior = {{0.5}, {1.0}};
  const PolicyFn target = [](const std::vector<double>&) {
    return std::vector<double>{1.0, 0.0};
  };
  const WisResult res = wis_estimate(ds, target, behavior, 1.0);
  CHECK(res.clipped_ratios == 1);
  CHECK(res.estimate == doctest::Approx(4.0).epsilon(1e-3));  // t1 contributes ~nothing
  // Zero behavior probability is an error naming the step.
  const std::vector<std::vector<double>> bad = {{0.0}, {1.0}};
  CHECK_THROWS_WITH_AS(wis_estimate(ds, target, bad, 1.0), doctest::Contains("step 0"),
                       UsageError);
}

TEST_CASE("dr_core: exact Qhat on the deterministic chain matches the closed form") {
  // Chain: A -> B -> end with rewards 1 then 2 at gamma 0.5.
  // V(B) = 2, V(A) = 1 + 0.5*2 = 2; every per-sample DR equals 2.
  Dataset ds;
  ds.n_symptoms = 2;
  ds.n_treatments = 1;
  for (int i = 0; i < 10; ++i) {
    Trajectory tr;
    tr.id = "c" + std::to_string(i);
    tr.steps.push_back(Step{{1.0, 0.0}, 0, 1.0, false});
    tr.steps.push_back(Step{{0.0, 1.0}, 0, 2.0, false});
    ds.trajectories.push_back(std::move(tr));
  }
  ds.norm_stats = compute_norm_stats(ds);
  const std::vector<std::vector<double>> behavior(10, std::vector<double>{1.0, 1.0});
  const PolicyFn target = [](const std::vector<double>&) { return std::vector<double>{1.0}; };
  const QValueFn qhat = [](const std::vector<double>& s, int) {
    return s[0] > 0.5 ? 2.0 : 2.0;  // Q(A,0) = Q(B,0) = 2
  };
  const double dr = dr_core(ds, target, behavior, 0.5, qhat);
  CHECK(dr == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("dr_core: rho 0 collapses to mean Qhat(s, pi(s))") {
  Dataset ds;
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Trajectory tr;
  tr.id = "z";
  tr.steps.push_back(Step{{1.0, 0.0}, 1, 5.0, false});  // logged action 1
  tr.steps.push_back(Step{{0.0, 1.0}, 1, 3.0, false});
  ds.trajectories.push_back(tr);
  ds.norm_stats = compute_norm_stats(ds);
  const std::vector<std::vector<double>> behavior = {{0.5, 0.5}};
  const PolicyFn target = [](const std::vector<double>&) {
    return std::vector<double>{1.0, 0.0};  // never the logged action: rho floors to ~0
  };
  const QValueFn qhat = [](const std::vector<double>& s, int a) {
    return (s[0] > 0.5 ? 10.0 : 20.0) + (a == 0 ? 0.0 : 1.0);
  };
  const double dr = dr_core(ds, target, behavior, 0.5, qhat);
  CHECK(dr == doctest::Approx((10.0 + 20.0) / 2.0).epsilon(1e-4));
}

TEST_CASE("dr_core: gamma 0 specialization") {
  Dataset ds;
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Trajectory tr;
  tr.id = "g";
  tr.steps.push_back(Step{{1.0, 0.0}, 0, 5.0, false});
  ds.trajectories.push_back(tr);
  ds.norm_stats = compute_norm_stats(ds);
  const std::vector<std::vector<double>> behavior = {{0.8}};
  const PolicyFn target = [](const std::vector<double>&) {
    return std::vector<double>{1.0, 0.0};
  };
  const QValueFn qhat = [](const std::vector<double>&, int a) { return a == 0 ? 4.0 : -1.0; };
  // DR = Q(s, pi(s)) + (1/0.8) * (r - Q(s, a)) = 4 + 1.25 * (5 - 4)
  const double dr = dr_core(ds, target, behavior, 0.0, qhat);
  CHECK(dr == doctest::Approx(4.0 + 1.25 * 1.0).epsilon(1e-12));
}

TEST_CASE("dr_estimate: fitted Qhat lands near the returns under matched policies") {
  const EnvInstance env = sample_env(EnvSpec{});
  const double eps = 0.3;
  const Dataset ds = collect_dataset(env, eps, 160, 1.0, 29);
  const auto probs = logged_behavior_probs(ds, env, eps);
  RlConfig cfg = small_cfg();
  cfg.train_steps = 1500;
  cfg.gamma = 0.0;
  cfg.hidden = {32, 32};
  Rng rng(41);
  const double dr = dr_estimate(ds, soc_policy(env, eps), probs, 0.0, cfg, rng);
  // With gamma 0, DR estimates the mean one-step reward under the data policy.
  double mean_r = 0.0;
  long n = 0;
  for (const Trajectory& tr : ds.trajectories)
    for (const Step& st : tr.steps) {
      mean_r += st.reward;
      ++n;
    }
  mean_r /= static_cast<double>(n);
  CHECK(std::abs(dr - mean_r) < 2.0);
}

TEST_CASE("qnet checkpoints round-trip") {
  const Dataset ds = two_state_dataset(16, 43);
  RlConfig cfg = small_cfg();
  cfg.train_steps = 50;
  Rng rng(2);
  const TrainedQ tq = train_cql(ds, cfg, rng);
  save_qnet("/tmp/stitchrl_q.json", tq.q, 2);
  const QNet back = load_qnet("/tmp/stitchrl_q.json", 2, 2);
  CHECK(back.net.w[0].v == tq.q.net.w[0].v);
  std::remove("/tmp/stitchrl_q.json");
}
