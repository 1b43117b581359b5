#include "stitchrl/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace stitchrl {

namespace {

struct TransitionRef {
  int traj = 0;
  int t = 0;
};

std::vector<TransitionRef> list_transitions(const Dataset& ds) {
  std::vector<TransitionRef> out;
  for (int i = 0; i < static_cast<int>(ds.trajectories.size()); ++i) {
    const int len = static_cast<int>(ds.trajectories[i].steps.size());
    for (int t = 0; t + 1 < len; ++t) out.push_back({i, t});
  }
  return out;
}

}  // namespace

TrainedDynamics train_models(const Dataset& ds, const DynTrainConfig& cfg, Rng& rng) {
  const auto transitions = list_transitions(ds);
  if (transitions.empty()) throw UsageError("train_models: dataset has no transitions");

  const int dim = ds.n_symptoms;
  const int A = ds.n_treatments;
  TrainedDynamics out;
  MlpSpec inv_spec;
  inv_spec.widths.push_back(2 * dim);
  for (int h : cfg.hidden) inv_spec.widths.push_back(h);
  inv_spec.widths.push_back(A);
  inv_spec.act = Activation::ReLU;
  out.inverse = {make_mlp(inv_spec, rng.next_u64()), dim, A};

  MlpSpec rew_spec;
  rew_spec.widths.push_back(dim + A);
  for (int h : cfg.hidden) rew_spec.widths.push_back(h);
  rew_spec.widths.push_back(1);
  rew_spec.act = Activation::ReLU;
  out.reward = {make_mlp(rew_spec, rng.next_u64()), dim, A};

  // Deterministic shuffle, then a 10% holdout tail.
  std::vector<int> order(transitions.size());
  std::iota(order.begin(), order.end(), 0);
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
  const long n_hold = std::max<long>(1, std::lround(cfg.holdout_fraction * order.size()));
  const long n_train = static_cast<long>(order.size()) - n_hold;
  if (n_train < 1) throw UsageError("train_models: not enough transitions for a train split");

  AdamState inv_opt = make_adam(out.inverse.net, cfg.lr);
  AdamState rew_opt = make_adam(out.reward.net, cfg.lr);

  const int batch = std::min<int>(cfg.batch, static_cast<int>(n_train));
  const long steps_per_epoch = (n_train + batch - 1) / batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (long s = 0; s < steps_per_epoch; ++s) {
      Tensor2 inv_in(batch, 2 * dim);
      Tensor2 rew_in(batch, dim + A);
      std::vector<int> actions(batch);
      std::vector<double> rewards(batch);
      for (int b = 0; b < batch; ++b) {
        const TransitionRef& tr = transitions[order[rng.uniform_int(n_train)]];
        const Step& st = ds.trajectories[tr.traj].steps[tr.t];
        const Step& nx = ds.trajectories[tr.traj].steps[tr.t + 1];
        double* irow = inv_in.row(b);
        for (int k = 0; k < dim; ++k) irow[k] = st.state[k];
        for (int k = 0; k < dim; ++k) irow[dim + k] = nx.state[k];
        double* rrow = rew_in.row(b);
        for (int k = 0; k < dim; ++k) rrow[k] = st.state[k];
        for (int a = 0; a < A; ++a) rrow[dim + a] = a == st.action ? 1.0 : 0.0;
        actions[b] = st.action;
        rewards[b] = st.reward;
      }

      ForwardTrace inv_trace;
      const Tensor2 logits = forward(out.inverse.net, inv_in, inv_trace);
      Tensor2 dlogits(batch, A);
      for (int b = 0; b < batch; ++b) {
        const std::vector<double> p = softmax(logits.row(b), A);
        epoch_loss += softmax_sq_error(p, actions[b]);
        softmax_sq_error_grad(p, actions[b], 1.0 / batch, dlogits.row(b));
      }
      MlpGrads inv_grads = backward(out.inverse.net, inv_trace, dlogits);
      adam_step(out.inverse.net, inv_grads, inv_opt);

      ForwardTrace rew_trace;
      const Tensor2 pred = forward(out.reward.net, rew_in, rew_trace);
      Tensor2 dpred(batch, 1);
      for (int b = 0; b < batch; ++b) {
        const double diff = pred.at(b, 0) - rewards[b];
        epoch_loss += diff * diff;
        dpred.at(b, 0) = 2.0 * diff / batch;
      }
      MlpGrads rew_grads = backward(out.reward.net, rew_trace, dpred);
      adam_step(out.reward.net, rew_grads, rew_opt);
    }
    out.loss_trace.push_back(epoch_loss / static_cast<double>(steps_per_epoch * batch));
  }

  // Held-out metrics.
  long correct = 0;
  double se = 0.0;
  for (long i = n_train; i < static_cast<long>(order.size()); ++i) {
    const TransitionRef& tr = transitions[order[i]];
    const Step& st = ds.trajectories[tr.traj].steps[tr.t];
    const Step& nx = ds.trajectories[tr.traj].steps[tr.t + 1];
    if (infer_action(out.inverse, st.state, nx.state) == st.action) ++correct;
    const double r = predict_reward(out.reward, st.state, st.action);
    se += (r - st.reward) * (r - st.reward);
  }
  out.metrics.train_transitions = n_train;
  out.metrics.holdout_transitions = n_hold;
  out.metrics.action_accuracy = static_cast<double>(correct) / static_cast<double>(n_hold);
  out.metrics.reward_rmse = std::sqrt(se / static_cast<double>(n_hold));
  return out;
}

int infer_action(const InverseDynModel& model, const std::vector<double>& s,
                 const std::vector<double>& s_next) {
  Tensor2 in(1, 2 * model.state_dim);
  for (int k = 0; k < model.state_dim; ++k) in.at(0, k) = s[k];
  for (int k = 0; k < model.state_dim; ++k) in.at(0, model.state_dim + k) = s_next[k];
  const Tensor2 logits = forward(model.net, in);
  int best = 0;
  for (int a = 1; a < model.n_actions; ++a)
    if (logits.at(0, a) > logits.at(0, best)) best = a;  // strict: ties keep the smaller id
  return best;
}

double predict_reward(const RewardModel& model, const std::vector<double>& s, int action) {
  Tensor2 in(1, model.state_dim + model.n_actions);
  for (int k = 0; k < model.state_dim; ++k) in.at(0, k) = s[k];
  for (int a = 0; a < model.n_actions; ++a)
    in.at(0, model.state_dim + a) = a == action ? 1.0 : 0.0;
  return forward(model.net, in).at(0, 0);
}

RewardBounds observed_reward_bounds(const Dataset& ds) {
  RewardBounds b{std::numeric_limits<double>::infinity(),
                 -std::numeric_limits<double>::infinity()};
  for (const Trajectory& tr : ds.trajectories) {
    if (tr.source != Source::Real) continue;
    for (const Step& st : tr.steps) {
      b.lo = std::min(b.lo, st.reward);
      b.hi = std::max(b.hi, st.reward);
    }
  }
  if (!(b.lo <= b.hi)) throw UsageError("observed_reward_bounds: no real steps in dataset");
  return b;
}

std::vector<Step> complete_bridge(const std::vector<std::vector<double>>& states,
                                  const std::vector<double>& prev_state,
                                  const std::vector<double>& next_state,
                                  const InverseDynModel& inv, const RewardModel& rew,
                                  const RewardBounds& bounds) {
  (void)prev_state;  // the prefix-side junction step is relabeled by the caller
  if (states.empty()) throw UsageError("complete_bridge: need K >= 1 states");
  const int k = static_cast<int>(states.size());
  std::vector<Step> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) {
    const std::vector<double>& target = i + 1 < k ? states[i + 1] : next_state;
    Step st;
    st.state = states[i];
    st.action = infer_action(inv, states[i], target);
    st.reward = std::clamp(predict_reward(rew, states[i], st.action), bounds.lo, bounds.hi);
    st.synthetic = true;
    out.push_back(std::move(st));
  }
  return out;
}

void SbReport::record_similarity(double sim) {
  int bin = static_cast<int>(std::floor((sim + 1.0) / 0.1));
  bin = std::clamp(bin, 0, static_cast<int>(similarity_histogram.size()) - 1);
  similarity_histogram[static_cast<std::size_t>(bin)] += 1;
}

void SbReport::record_k(int k) {
  if (k >= static_cast<int>(k_histogram.size())) k_histogram.resize(k + 1, 0);
  k_histogram[k] += 1;
}

std::string SbReport::to_json() const {
  nlohmann::json j{{"requested", requested},
                   {"direct_count", direct_count},
                   {"sb_count", sb_count},
                   {"misses", misses},
                   {"attempts_total", attempts_total},
                   {"strategy", to_string(strategy)},
                   {"delta", delta},
                   {"q", q},
                   {"similarity_histogram", similarity_histogram},
                   {"k_histogram", k_histogram}};
  return j.dump(2);
}

SbAugmentResult sb_augment(const Dataset& ds, const StitchConfig& stitch_cfg,
                           const BridgeNet& bridge_net, const BridgeConfig& bridge_cfg,
                           const InverseDynModel& inv, const RewardModel& rew, Rng& rng) {
  const PairSampler sampler(ds, stitch_cfg);
  const StitchConfig& cfg = sampler.cfg();
  const auto norm = normalized_states(ds);
  const RewardBounds bounds = observed_reward_bounds(ds);
  const std::uint64_t base_seed = rng.next_u64();

  struct BestPair {
    int suffix_idx = -1;
    int prefix_idx = -1;
    StitchPoint point;
  };

  SbAugmentResult res;
  res.dataset = ds;
  res.report.requested = cfg.m_target;
  res.report.strategy = cfg.strategy;
  res.report.delta = cfg.delta;
  res.report.q = cfg.q;

  for (int m = 1; m <= cfg.m_target; ++m) {
    Rng slot_rng(derive_seed(base_seed, static_cast<std::uint64_t>(m)));
    const double alpha = alpha_at(m, cfg);
    BestPair best;
    best.point.similarity = -2.0;
    std::optional<Trajectory> direct;
    for (int attempt = 0; attempt < cfg.max_attempts_per_stitch; ++attempt) {
      ++res.report.attempts_total;
      const auto [suffix_idx, prefix_idx] = sampler.sample(alpha, slot_rng);
      const auto point = find_stitch_point(norm[suffix_idx], norm[prefix_idx], cfg);
      if (!point) continue;
      if (point->similarity > best.point.similarity)
        best = {suffix_idx, prefix_idx, *point};
      if (point->similarity >= cfg.delta) {
        direct = stitch(ds.trajectories[suffix_idx], ds.trajectories[prefix_idx], point->t,
                        point->t_prime, point->similarity, "st-" + std::to_string(m));
        break;
      }
    }

    if (direct) {
      res.report.record_similarity(direct->stitch_meta->similarity);
      res.dataset.trajectories.push_back(std::move(*direct));
      ++res.report.direct_count;
      continue;
    }
    if (best.suffix_idx < 0) {
      ++res.report.misses;  // nothing long enough to cut
      continue;
    }

    // Bridge the best pair seen. The bridge runs in normalized space from
    // the prefix junction state to the suffix junction state, then states
    // come back through the inverse z-score for storage.
    res.report.record_similarity(best.point.similarity);
    const Trajectory& suffix_donor = ds.trajectories[best.suffix_idx];
    const Trajectory& prefix_donor = ds.trajectories[best.prefix_idx];
    const int t = best.point.t;
    const int tp = best.point.t_prime;
    const std::vector<double>& x_start = norm[best.prefix_idx][tp];
    const std::vector<double>& x_target = norm[best.suffix_idx][t];
    const int k = choose_k(x_start, x_target, bridge_cfg);
    const auto bridge_norm = generate_bridge(bridge_net, x_start, x_target, k, bridge_cfg,
                                             slot_rng);
    std::vector<std::vector<double>> bridge_raw;
    bridge_raw.reserve(bridge_norm.size());
    for (const auto& z : bridge_norm) bridge_raw.push_back(denormalize_state(ds.norm_stats, z));

    const std::vector<double>& prev_raw = prefix_donor.steps[tp].state;
    const std::vector<double>& next_raw = suffix_donor.steps[t].state;
    const std::vector<Step> bridge_steps =
        complete_bridge(bridge_raw, prev_raw, next_raw, inv, rew, bounds);

    Trajectory out;
    out.id = "sb-" + std::to_string(m);
    out.source = Source::StitchedSB;
    out.outcome = suffix_donor.outcome;
    for (int i = 0; i < tp; ++i) out.steps.push_back(prefix_donor.steps[i]);
    // The prefix junction step's original action no longer matches what
    // follows it; relabel it against the first bridge state.
    Step junction;
    junction.state = prev_raw;
    junction.action = infer_action(inv, prev_raw, bridge_raw.front());
    junction.reward = std::clamp(predict_reward(rew, prev_raw, junction.action), bounds.lo,
                                 bounds.hi);
    junction.synthetic = true;
    out.steps.push_back(std::move(junction));
    for (const Step& st : bridge_steps) out.steps.push_back(st);
    for (std::size_t i = static_cast<std::size_t>(t); i < suffix_donor.steps.size(); ++i)
      out.steps.push_back(suffix_donor.steps[i]);

    StitchMeta meta;
    meta.parent_a = suffix_donor.id;
    meta.parent_b = prefix_donor.id;
    meta.t = t;
    meta.t_prime = tp;
    meta.similarity = best.point.similarity;
    meta.bridge_len = k;
    out.stitch_meta = meta;
    res.report.record_k(k);
    res.dataset.trajectories.push_back(std::move(out));
    ++res.report.sb_count;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_inverse_model(const std::string& path, const InverseDynModel& m, std::uint64_t seed) {
  save_mlp(path, m.net, seed);
}

void save_reward_model(const std::string& path, const RewardModel& m, std::uint64_t seed) {
  save_mlp(path, m.net, seed);
}

InverseDynModel load_inverse_model(const std::string& path, int state_dim, int n_actions) {
  InverseDynModel m{load_mlp(path), state_dim, n_actions};
  if (m.net.spec.input_width() != 2 * state_dim || m.net.spec.output_width() != n_actions)
    throw ParseError("load_inverse_model: " + path + ": shape does not match dataset");
  return m;
}

RewardModel load_reward_model(const std::string& path, int state_dim, int n_actions) {
  RewardModel m{load_mlp(path), state_dim, n_actions};
  if (m.net.spec.input_width() != state_dim + n_actions || m.net.spec.output_width() != 1)
    throw ParseError("load_reward_model: " + path + ": shape does not match dataset");
  return m;
}

}  // namespace stitchrl
