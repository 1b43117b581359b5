#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <set>
#include <tuple>

#include "doctest.h"
#include "stitchrl/dynamics.hpp"
#include "stitchrl/env.hpp"

using namespace stitchrl;

namespace {

// Ring-walk environment: 8 positions on a circle, action 0 steps one way,
// action 1 the other. The (s, s') pair uniquely determines the action.
Dataset ring_dataset(int n_traj, int len, std::uint64_t seed, double reward_value = -1.0) {
  Dataset ds;
  ds.env_hash = "ring";
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Rng rng(seed);
  auto embed = [](int pos) {
    const double theta = 2.0 * 3.14159265358979323846 * pos / 8.0;
    return std::vector<double>{std::cos(theta), std::sin(theta)};
  };
  for (int i = 0; i < n_traj; ++i) {
    Trajectory tr;
    tr.id = "r" + std::to_string(i);
    int pos = static_cast<int>(rng.uniform_int(8));
    for (int t = 0; t < len; ++t) {
      const int action = static_cast<int>(rng.uniform_int(2));
      Step st;
      st.state = embed(pos);
      st.action = action;
      st.reward = reward_value;
      tr.steps.push_back(std::move(st));
      pos = (pos + (action == 0 ? 1 : 7)) % 8;
    }
    ds.trajectories.push_back(std::move(tr));
  }
  ds.norm_stats = compute_norm_stats(ds);
  return ds;
}

InverseDynModel fixed_logit_model(const std::vector<double>& logits) {
  MlpSpec spec;
  spec.widths = {4, static_cast<int>(logits.size())};
  InverseDynModel m{make_mlp(spec, 1), 2, static_cast<int>(logits.size())};
  std::fill(m.net.w[0].v.begin(), m.net.w[0].v.end(), 0.0);
  m.net.b[0] = logits;
  return m;
}

}  // namespace

TEST_CASE("train_models: deterministic chain reaches >= 0.99 held-out action accuracy") {
  const Dataset ds = ring_dataset(64, 12, 3);
  DynTrainConfig cfg;
  cfg.epochs = 40;
  Rng rng(5);
  const TrainedDynamics dyn = train_models(ds, cfg, rng);
  CHECK(dyn.metrics.action_accuracy >= 0.99);
  CHECK(dyn.metrics.holdout_transitions > 0);
}

TEST_CASE("train_models: constant rewards regress to the constant") {
  const Dataset ds = ring_dataset(48, 10, 7, 2.5);
  DynTrainConfig cfg;
  cfg.epochs = 250;
  Rng rng(6);
  const TrainedDynamics dyn = train_models(ds, cfg, rng);
  CHECK(dyn.metrics.reward_rmse < 0.05);
  CHECK(predict_reward(dyn.reward, ds.trajectories[0].steps[0].state, 0) ==
        doctest::Approx(2.5).epsilon(0.05));
}

TEST_CASE("train_models: zero epochs returns initialized models with baseline metrics") {
  const Dataset ds = ring_dataset(16, 8, 9);
  DynTrainConfig cfg;
  cfg.epochs = 0;
  Rng rng(2);
  const TrainedDynamics dyn = train_models(ds, cfg, rng);
  CHECK(dyn.loss_trace.empty());
  CHECK(dyn.metrics.action_accuracy >= 0.0);
  CHECK(dyn.metrics.action_accuracy <= 1.0);
  CHECK(std::isfinite(dyn.metrics.reward_rmse));
}

TEST_CASE("train_models: joint loss decreases across epochs") {
  const Dataset ds = ring_dataset(24, 10, 11);
  DynTrainConfig cfg;
  cfg.epochs = 15;
  Rng rng(4);
  const TrainedDynamics dyn = train_models(ds, cfg, rng);
  REQUIRE(dyn.loss_trace.size() == 15);
  CHECK(dyn.loss_trace.back() < dyn.loss_trace.front());
}

TEST_CASE("train_models: empty transition set is a usage error") {
  Dataset ds;
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Trajectory tr;
  tr.id = "single";
  tr.steps.push_back(Step{{0.0, 0.0}, 0, 0.0, false});  // one step, no transitions
  ds.trajectories.push_back(tr);
  DynTrainConfig cfg;
  Rng rng(1);
  CHECK_THROWS_AS(train_models(ds, cfg, rng), UsageError);
}

TEST_CASE("infer_action: argmax with smallest-id tie-break") {
  const InverseDynModel unique_max = fixed_logit_model({0.0, 1.0, 0.5, 3.0, 2.0});
  CHECK(infer_action(unique_max, {0.1, 0.2}, {0.3, 0.4}) == 3);
  const InverseDynModel tie = fixed_logit_model({0.0, 0.0, 7.0, 0.0, 0.0, 7.0});
  CHECK(infer_action(tie, {0.1, 0.2}, {0.3, 0.4}) == 2);
}

TEST_CASE("infer_action: recovers the true action on oracle chain pairs") {
  const Dataset ds = ring_dataset(64, 12, 3);
  DynTrainConfig cfg;
  cfg.epochs = 40;
  Rng rng(5);
  const TrainedDynamics dyn = train_models(ds, cfg, rng);
  const Trajectory& tr = ds.trajectories[0];
  for (std::size_t t = 0; t + 1 < tr.steps.size(); ++t)
    CHECK(infer_action(dyn.inverse, tr.steps[t].state, tr.steps[t + 1].state) ==
          tr.steps[t].action);
}

TEST_CASE("complete_bridge: lengths, synthetic flags, valid ids, clamped rewards") {
  const Dataset ds = ring_dataset(48, 10, 13);
  DynTrainConfig cfg;
  cfg.epochs = 10;
  Rng rng(8);
  const TrainedDynamics dyn = train_models(ds, cfg, rng);
  const RewardBounds bounds = observed_reward_bounds(ds);

  for (int k : {1, 3, 6}) {
    std::vector<std::vector<double>> states;
    Rng srng(k);
    for (int i = 0; i < k; ++i) states.push_back({srng.normal(), srng.normal()});
    const std::vector<double> prev = {1.0, 0.0};
    const std::vector<double> next = {0.0, 1.0};
    const auto steps = complete_bridge(states, prev, next, dyn.inverse, dyn.reward, bounds);
    REQUIRE(static_cast<int>(steps.size()) == k);
    for (const Step& st : steps) {
      CHECK(st.synthetic);
      CHECK(st.action >= 0);
      CHECK(st.action < ds.n_treatments);
      CHECK(st.reward >= bounds.lo);
      CHECK(st.reward <= bounds.hi);
    }
  }
  CHECK_THROWS_AS(
      complete_bridge({}, {0.0, 0.0}, {1.0, 1.0}, dyn.inverse, dyn.reward, bounds), UsageError);
}

TEST_CASE("sb_augment: unreachable delta makes every produced trajectory bridged") {
  const EnvInstance env = sample_env(EnvSpec{});
  const Dataset ds = collect_dataset(env, 0.35, 160, 1.0, 31);
  DynTrainConfig dyn_cfg;
  dyn_cfg.epochs = 4;
  Rng dyn_rng(3);
  const TrainedDynamics dyn = train_models(ds, dyn_cfg, dyn_rng);
  BridgeConfig bcfg;
  bcfg.train_iters = 300;
  Rng brng(4);
  const auto pairs = make_training_pairs(ds, 512, bcfg, brng);
  const TrainedBridge tb = train_bridge(pairs, ds.n_symptoms, bcfg, brng);

  StitchConfig scfg;
  scfg.delta = 1.0 + 1e-9;
  scfg.m_target = 16;
  scfg.max_attempts_per_stitch = 4;
  Rng rng(5);
  const SbAugmentResult res = sb_augment(ds, scfg, tb.net, bcfg, dyn.inverse, dyn.reward, rng);
  CHECK(res.report.direct_count == 0);
  CHECK(res.report.sb_count == 16);
  long hist_total = 0;
  for (long c : res.report.k_histogram) hist_total += c;
  CHECK(hist_total == 16);

  long sb_seen = 0;
  for (const Trajectory& tr : res.dataset.trajectories) {
    if (tr.source != Source::StitchedSB) continue;
    ++sb_seen;
    REQUIRE(tr.stitch_meta.has_value());
    CHECK(tr.stitch_meta->bridge_len >= 1);
    // K synthetic bridge steps plus the relabeled prefix junction step.
    long syn = 0;
    for (const Step& st : tr.steps)
      if (st.synthetic) ++syn;
    CHECK(syn == tr.stitch_meta->bridge_len + 1);
  }
  CHECK(sb_seen == 16);
}

TEST_CASE("sb_augment: permissive delta keeps the direct path dominant") {
  const EnvInstance env = sample_env(EnvSpec{});
  const Dataset ds = collect_dataset(env, 0.35, 160, 1.0, 31);
  DynTrainConfig dyn_cfg;
  dyn_cfg.epochs = 4;
  Rng dyn_rng(3);
  const TrainedDynamics dyn = train_models(ds, dyn_cfg, dyn_rng);
  BridgeConfig bcfg;
  bcfg.train_iters = 300;
  Rng brng(4);
  const auto pairs = make_training_pairs(ds, 512, bcfg, brng);
  const TrainedBridge tb = train_bridge(pairs, ds.n_symptoms, bcfg, brng);

  StitchConfig scfg;
  scfg.delta = 0.90;
  scfg.m_target = 24;
  scfg.max_attempts_per_stitch = 80;
  Rng rng(6);
  const SbAugmentResult res = sb_augment(ds, scfg, tb.net, bcfg, dyn.inverse, dyn.reward, rng);
  CHECK(res.report.direct_count + res.report.sb_count == 24);
  CHECK(res.report.direct_count > res.report.sb_count);
}

TEST_CASE("sb_augment: non-synthetic transitions of bridged trajectories stay verbatim") {
  const EnvInstance env = sample_env(EnvSpec{});
  const Dataset ds = collect_dataset(env, 0.35, 128, 1.0, 37);
  DynTrainConfig dyn_cfg;
  dyn_cfg.epochs = 4;
  Rng dyn_rng(3);
  const TrainedDynamics dyn = train_models(ds, dyn_cfg, dyn_rng);
  BridgeConfig bcfg;
  bcfg.train_iters = 200;
  Rng brng(4);
  const auto pairs = make_training_pairs(ds, 256, bcfg, brng);
  const TrainedBridge tb = train_bridge(pairs, ds.n_symptoms, bcfg, brng);

  StitchConfig scfg;
  scfg.delta = 1.0 + 1e-9;  // force bridges
  scfg.m_target = 12;
  scfg.max_attempts_per_stitch = 3;
  Rng rng(9);
  const SbAugmentResult res = sb_augment(ds, scfg, tb.net, bcfg, dyn.inverse, dyn.reward, rng);

  using Key = std::tuple<std::vector<double>, int, double, std::vector<double>>;
  std::set<Key> originals;
  for (const Trajectory& tr : ds.trajectories)
    for (std::size_t t = 0; t + 1 < tr.steps.size(); ++t)
      originals.insert({tr.steps[t].state, tr.steps[t].action, tr.steps[t].reward,
                        tr.steps[t + 1].state});

  long checked = 0;
  for (const Trajectory& tr : res.dataset.trajectories) {
    if (tr.source != Source::StitchedSB) continue;
    for (std::size_t t = 0; t + 1 < tr.steps.size(); ++t) {
      if (tr.steps[t].synthetic || tr.steps[t + 1].synthetic) continue;
      CHECK(originals.count({tr.steps[t].state, tr.steps[t].action, tr.steps[t].reward,
                             tr.steps[t + 1].state}) == 1);
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("model checkpoints round-trip through load with shape validation") {
  const Dataset ds = ring_dataset(16, 8, 41);
  DynTrainConfig cfg;
  cfg.epochs = 2;
  Rng rng(2);
  const TrainedDynamics dyn = train_models(ds, cfg, rng);
  save_inverse_model("/tmp/stitchrl_inv.json", dyn.inverse, 2);
  save_reward_model("/tmp/stitchrl_rew.json", dyn.reward, 2);
  const InverseDynModel inv = load_inverse_model("/tmp/stitchrl_inv.json", 2, 2);
  const RewardModel rew = load_reward_model("/tmp/stitchrl_rew.json", 2, 2);
  CHECK(inv.net.w[0].v == dyn.inverse.net.w[0].v);
  CHECK(rew.net.w[0].v == dyn.reward.net.w[0].v);
  CHECK_THROWS_AS(load_inverse_model("/tmp/stitchrl_rew.json", 2, 2), ParseError);
  std::filesystem::remove("/tmp/stitchrl_inv.json");
  std::filesystem::remove("/tmp/stitchrl_rew.json");
}
