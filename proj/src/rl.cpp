#include "stitchrl/rl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace stitchrl {

void RlConfig::validate() const {
  if (batch < 1) throw ConfigError("RlConfig.batch: must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("RlConfig.lr: must be > 0");
  if (train_steps < 0) throw ConfigError("RlConfig.train_steps: must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("RlConfig.gamma: must be in [0,1]");
  if (beta < 0.0) throw ConfigError("RlConfig.beta: must be >= 0");
  if (target_sync < 1) throw ConfigError("RlConfig.target_sync: must be >= 1");
  if (eval_episodes < 1) throw ConfigError("RlConfig.eval_episodes: must be >= 1");
}

std::vector<Transition> flatten_transitions(const Dataset& ds) {
  std::vector<Transition> out;
  for (const Trajectory& tr : ds.trajectories) {
    const int len = static_cast<int>(tr.steps.size());
    for (int t = 0; t < len; ++t) {
      Transition x;
      x.s = tr.steps[t].state.data();
      x.action = tr.steps[t].action;
      x.reward = tr.steps[t].reward;
      if (t + 1 < len) {
        x.s_next = tr.steps[t + 1].state.data();
        x.terminal = false;
      } else {
        x.s_next = nullptr;
        x.terminal = true;
      }
      out.push_back(x);
    }
  }
  return out;
}

namespace {

QNet make_qnet(int state_dim, int n_actions, const std::vector<int>& hidden, std::uint64_t seed) {
  MlpSpec spec;
  spec.widths.push_back(state_dim);
  for (int h : hidden) spec.widths.push_back(h);
  spec.widths.push_back(n_actions);
  spec.act = Activation::ReLU;
  QNet q;
  q.net = make_mlp(spec, seed);
  q.target = q.net;
  q.state_dim = state_dim;
  q.n_actions = n_actions;
  return q;
}

double max_action_value(const Mlp& net, const double* state, int dim, int n_actions) {
  Tensor2 in(1, dim);
  for (int k = 0; k < dim; ++k) in.at(0, k) = state[k];
  const Tensor2 out = forward(net, in);
  double best = out.at(0, 0);
  for (int a = 1; a < n_actions; ++a) best = std::max(best, out.at(0, a));
  return best;
}

}  // namespace

CqlLossParts cql_loss(const QNet& q, const std::vector<Transition>& batch, const RlConfig& cfg) {
  if (batch.empty()) throw UsageError("cql_loss: empty batch");
  CqlLossParts parts;
  Tensor2 in(static_cast<int>(batch.size()), q.state_dim);
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (int k = 0; k < q.state_dim; ++k) in.at(static_cast<int>(i), k) = batch[i].s[k];
  const Tensor2 values = forward(q.net, in);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& x = batch[i];
    double target = x.reward;
    if (!x.terminal && cfg.gamma > 0.0)
      target += cfg.gamma * max_action_value(q.target, x.s_next, q.state_dim, q.n_actions);
    const double qsa = values.at(static_cast<int>(i), x.action);
    parts.bellman += (qsa - target) * (qsa - target);
    double mean_q = 0.0;
    for (int a = 0; a < q.n_actions; ++a) mean_q += values.at(static_cast<int>(i), a);
    mean_q /= q.n_actions;
    parts.conservative += mean_q - qsa;
  }
  parts.bellman /= static_cast<double>(batch.size());
  parts.conservative /= static_cast<double>(batch.size());
  return parts;
}

TrainedQ train_cql(const Dataset& ds, const RlConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto transitions = flatten_transitions(ds);
  if (static_cast<long>(transitions.size()) < cfg.batch)
    throw UsageError("train_cql: dataset has fewer transitions than one batch");

  TrainedQ out;
  out.q = make_qnet(ds.n_symptoms, ds.n_treatments, cfg.hidden, rng.next_u64());
  AdamState opt = make_adam(out.q.net, cfg.lr);
  const int B = cfg.batch;
  const int A = out.q.n_actions;
  const int dim = out.q.state_dim;

  for (long step = 0; step < cfg.train_steps; ++step) {
    if (step % cfg.target_sync == 0) out.q.target = out.q.net;

    Tensor2 in(B, dim);
    std::vector<const Transition*> picked(B);
    for (int i = 0; i < B; ++i) {
      picked[i] = &transitions[rng.uniform_int(transitions.size())];
      for (int k = 0; k < dim; ++k) in.at(i, k) = picked[i]->s[k];
    }

    // Bootstrap targets from the target net, batched over the non-terminal rows.
    std::vector<double> targets(B);
    if (cfg.gamma > 0.0) {
      std::vector<int> rows;
      for (int i = 0; i < B; ++i)
        if (!picked[i]->terminal) rows.push_back(i);
      if (!rows.empty()) {
        Tensor2 nxt(static_cast<int>(rows.size()), dim);
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (int k = 0; k < dim; ++k) nxt.at(static_cast<int>(r), k) = picked[rows[r]]->s_next[k];
        const Tensor2 qn = forward(out.q.target, nxt);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          double best = qn.at(static_cast<int>(r), 0);
          for (int a = 1; a < A; ++a) best = std::max(best, qn.at(static_cast<int>(r), a));
          targets[rows[r]] = cfg.gamma * best;
        }
      }
    }
    for (int i = 0; i < B; ++i) targets[i] += picked[i]->reward;

    ForwardTrace trace;
    const Tensor2 values = forward(out.q.net, in, trace);
    Tensor2 dvalues(B, A);
    double loss = 0.0;
    for (int i = 0; i < B; ++i) {
      const int a_data = picked[i]->action;
      const double qsa = values.at(i, a_data);
      const double diff = qsa - targets[i];
      loss += diff * diff;
      dvalues.at(i, a_data) += 2.0 * diff / B;
      if (cfg.beta != 0.0) {
        double mean_q = 0.0;
        for (int a = 0; a < A; ++a) mean_q += values.at(i, a);
        loss += cfg.beta * (mean_q / A - qsa);
        const double w = cfg.beta / B;
        for (int a = 0; a < A; ++a) dvalues.at(i, a) += w / A;
        dvalues.at(i, a_data) -= w;
      }
    }
    loss /= B;
    if (!std::isfinite(loss))
      throw NumericError("train_cql: non-finite loss at step " + std::to_string(step));
    if (step % cfg.loss_trace_every == 0) out.loss_trace.push_back(loss);

    MlpGrads grads = backward(out.q.net, trace, dvalues);
    adam_step(out.q.net, grads, opt);
  }
  return out;
}

TrainedQ train_fitted_q(const Dataset& ds, const RlConfig& cfg, Rng& rng) {
  RlConfig plain = cfg;
  plain.beta = 0.0;
  return train_cql(ds, plain, rng);
}

BcPolicy train_bc(const Dataset& ds, const RlConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto transitions = flatten_transitions(ds);
  if (transitions.empty()) throw UsageError("train_bc: empty dataset");

  MlpSpec spec;
  spec.widths.push_back(ds.n_symptoms);
  for (int h : cfg.hidden) spec.widths.push_back(h);
  spec.widths.push_back(ds.n_treatments);
  spec.act = Activation::ReLU;
  BcPolicy pi{make_mlp(spec, rng.next_u64()), ds.n_symptoms, ds.n_treatments};
  AdamState opt = make_adam(pi.net, cfg.lr);

  const int B = std::min<int>(cfg.batch, static_cast<int>(transitions.size()));
  for (long step = 0; step < cfg.train_steps; ++step) {
    Tensor2 in(B, pi.state_dim);
    std::vector<int> actions(B);
    for (int i = 0; i < B; ++i) {
      const Transition& x = transitions[rng.uniform_int(transitions.size())];
      for (int k = 0; k < pi.state_dim; ++k) in.at(i, k) = x.s[k];
      actions[i] = x.action;
    }
    ForwardTrace trace;
    const Tensor2 logits = forward(pi.net, in, trace);
    Tensor2 dlogits(B, pi.n_actions);
    for (int i = 0; i < B; ++i) {
      const std::vector<double> p = softmax(logits.row(i), pi.n_actions);
      softmax_sq_error_grad(p, actions[i], 1.0 / B, dlogits.row(i));
    }
    MlpGrads grads = backward(pi.net, trace, dlogits);
    adam_step(pi.net, grads, opt);
  }
  return pi;
}

namespace {

std::vector<double> one_hot(int n, int idx) {
  std::vector<double> v(n, 0.0);
  v[idx] = 1.0;
  return v;
}

}  // namespace

int greedy_action(const QNet& q, const std::vector<double>& state) {
  Tensor2 in(1, q.state_dim);
  for (int k = 0; k < q.state_dim; ++k) in.at(0, k) = state[k];
  const Tensor2 out = forward(q.net, in);
  int best = 0;
  for (int a = 1; a < q.n_actions; ++a)
    if (out.at(0, a) > out.at(0, best)) best = a;
  return best;
}

PolicyFn greedy_policy(const QNet& q) {
  return [&q](const std::vector<double>& s) { return one_hot(q.n_actions, greedy_action(q, s)); };
}

PolicyFn greedy_policy(const BcPolicy& pi) {
  return [&pi](const std::vector<double>& s) {
    Tensor2 in(1, pi.state_dim);
    for (int k = 0; k < pi.state_dim; ++k) in.at(0, k) = s[k];
    const Tensor2 out = forward(pi.net, in);
    int best = 0;
    for (int a = 1; a < pi.n_actions; ++a)
      if (out.at(0, a) > out.at(0, best)) best = a;
    return one_hot(pi.n_actions, best);
  };
}

PolicyFn random_policy(int n_actions) {
  return [n_actions](const std::vector<double>&) {
    return std::vector<double>(n_actions, 1.0 / n_actions);
  };
}

PolicyFn soc_policy(const EnvInstance& env, double epsilon) {
  return [&env, epsilon](const std::vector<double>& s) {
    return behavior_action_probs(s, env, epsilon);
  };
}

EvalResult evaluate_policy(const EnvInstance& env, const PolicyFn& policy, int n_episodes,
                           std::uint64_t seed) {
  if (n_episodes < 1) throw UsageError("evaluate_policy: n_episodes must be >= 1");
  std::vector<double> returns(n_episodes, 0.0);
  for (int ep = 0; ep < n_episodes; ++ep) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(ep)));
    int hidden = initial_hidden_state(env, rng);
    std::vector<double> obs = observe(env, hidden, rng);
    double total = 0.0;
    for (int t = 0; t < env.spec.max_episode_len; ++t) {
      const std::vector<double> probs = policy(obs);
      const int action = rng.categorical(probs);
      StepResult sr = step(env, hidden, action, rng);
      total += sr.reward;
      if (sr.done) break;
      hidden = sr.next_hidden;
      obs = std::move(sr.observation);
    }
    returns[ep] = total;
  }
  EvalResult res;
  res.episodes = n_episodes;
  for (double r : returns) res.mean_return += r;
  res.mean_return /= n_episodes;
  double var = 0.0;
  for (double r : returns) var += (r - res.mean_return) * (r - res.mean_return);
  res.std_return = std::sqrt(var / n_episodes);
  return res;
}

std::vector<std::vector<double>> logged_behavior_probs(const Dataset& ds, const EnvInstance& env,
                                                       double epsilon) {
  std::vector<std::vector<double>> out(ds.trajectories.size());
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& tr = ds.trajectories[i];
    out[i].reserve(tr.steps.size());
    for (const Step& st : tr.steps)
      out[i].push_back(behavior_action_probs(st.state, env, epsilon)[st.action]);
  }
  return out;
}

namespace {

constexpr double kRatioFloor = 1e-6;
constexpr double kRatioCeil = 1e6;

double clipped_ratio(double target_p, double behavior_p, long& clip_count,
                     const std::string& where) {
  if (!(behavior_p > 0.0))
    throw UsageError("importance ratio: zero behavior probability at " + where);
  double rho = target_p / behavior_p;
  if (rho < kRatioFloor || rho > kRatioCeil) {
    rho = std::clamp(rho, kRatioFloor, kRatioCeil);
    ++clip_count;
  }
  return rho;
}

}  // namespace

WisResult wis_estimate(const Dataset& ds, const PolicyFn& target,
                       const std::vector<std::vector<double>>& behavior_probs, double gamma) {
  if (ds.trajectories.empty()) throw UsageError("wis_estimate: empty dataset");
  WisResult res;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& tr = ds.trajectories[i];
    double w = 1.0;
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const double pt = target(tr.steps[t].state)[tr.steps[t].action];
      w *= clipped_ratio(pt, behavior_probs[i][t], res.clipped_ratios,
                         "trajectory " + tr.id + " step " + std::to_string(t));
    }
    const double g = discounted_return(tr, gamma);
    num += w * g;
    den += w;
  }
  res.estimate = num / den;
  return res;
}

double dr_core(const Dataset& ds, const PolicyFn& target,
               const std::vector<std::vector<double>>& behavior_probs, double gamma,
               const QValueFn& qhat) {
  double total = 0.0;
  long n = 0;
  long clip_count = 0;
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& tr = ds.trajectories[i];
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const Step& st = tr.steps[t];
      const std::vector<double> pi = target(st.state);
      double v_s = 0.0;
      for (int a = 0; a < static_cast<int>(pi.size()); ++a)
        if (pi[a] > 0.0) v_s += pi[a] * qhat(st.state, a);
      const double rho = clipped_ratio(pi[st.action], behavior_probs[i][t], clip_count,
                                       "trajectory " + tr.id + " step " + std::to_string(t));
      double v_next = 0.0;
      if (t + 1 < tr.steps.size() && gamma > 0.0) {
        const Step& nx = tr.steps[t + 1];
        const std::vector<double> pi_next = target(nx.state);
        for (int a = 0; a < static_cast<int>(pi_next.size()); ++a)
          if (pi_next[a] > 0.0) v_next += pi_next[a] * qhat(nx.state, a);
      }
      total += v_s + rho * (st.reward + gamma * v_next - qhat(st.state, st.action));
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

QNet fit_sarsa_q(const Dataset& ds, const RlConfig& cfg, Rng& rng) {
  cfg.validate();
  // SARSA pairs: (s, a, r, s', a') with a' the logged next action.
  struct SarsaRow {
    const Step* st = nullptr;
    const Step* nx = nullptr;  // null when terminal
  };
  std::vector<SarsaRow> rows;
  for (const Trajectory& tr : ds.trajectories)
    for (std::size_t t = 0; t < tr.steps.size(); ++t)
      rows.push_back({&tr.steps[t], t + 1 < tr.steps.size() ? &tr.steps[t + 1] : nullptr});
  if (rows.empty()) throw UsageError("fit_sarsa_q: empty dataset");

  // Deterministic shuffle; tail 10% becomes the validation split.
  for (int i = static_cast<int>(rows.size()) - 1; i > 0; --i)
    std::swap(rows[i], rows[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
  const long n_val = std::max<long>(1, static_cast<long>(rows.size()) / 10);
  const long n_train = static_cast<long>(rows.size()) - n_val;
  if (n_train < 1) throw UsageError("fit_sarsa_q: not enough transitions");

  QNet q = make_qnet(ds.n_symptoms, ds.n_treatments, cfg.hidden, rng.next_u64());
  AdamState opt = make_adam(q.net, cfg.lr);
  const int B = static_cast<int>(std::min<long>(cfg.batch, n_train));
  const int dim = q.state_dim;

  auto validation_td = [&]() {
    double se = 0.0;
    for (long i = n_train; i < static_cast<long>(rows.size()); ++i) {
      const SarsaRow& row = rows[i];
      Tensor2 in(1, dim);
      for (int k = 0; k < dim; ++k) in.at(0, k) = row.st->state[k];
      const double qsa = forward(q.net, in).at(0, row.st->action);
      double target = row.st->reward;
      if (row.nx != nullptr && cfg.gamma > 0.0) {
        Tensor2 in2(1, dim);
        for (int k = 0; k < dim; ++k) in2.at(0, k) = row.nx->state[k];
        target += cfg.gamma * forward(q.net, in2).at(0, row.nx->action);
      }
      se += (qsa - target) * (qsa - target);
    }
    return se / static_cast<double>(n_val);
  };

  Mlp best_params = q.net;
  double best_td = std::numeric_limits<double>::infinity();
  const long check_every = std::max<long>(1, cfg.train_steps / 10);
  for (long step = 0; step < cfg.train_steps; ++step) {
    Tensor2 in(B, dim);
    std::vector<const SarsaRow*> picked(B);
    for (int i = 0; i < B; ++i) {
      picked[i] = &rows[rng.uniform_int(n_train)];
      for (int k = 0; k < dim; ++k) in.at(i, k) = picked[i]->st->state[k];
    }
    std::vector<double> targets(B);
    for (int i = 0; i < B; ++i) {
      targets[i] = picked[i]->st->reward;
      if (picked[i]->nx != nullptr && cfg.gamma > 0.0) {
        Tensor2 in2(1, dim);
        for (int k = 0; k < dim; ++k) in2.at(0, k) = picked[i]->nx->state[k];
        targets[i] += cfg.gamma * forward(q.net, in2).at(0, picked[i]->nx->action);
      }
    }
    ForwardTrace trace;
    const Tensor2 values = forward(q.net, in, trace);
    Tensor2 dvalues(B, q.n_actions);
    for (int i = 0; i < B; ++i) {
      const double diff = values.at(i, picked[i]->st->action) - targets[i];
      dvalues.at(i, picked[i]->st->action) = 2.0 * diff / B;
    }
    MlpGrads grads = backward(q.net, trace, dvalues);
    adam_step(q.net, grads, opt);

    if ((step + 1) % check_every == 0 || step + 1 == cfg.train_steps) {
      const double td = validation_td();
      if (td < best_td) {
        best_td = td;
        best_params = q.net;
      }
    }
  }
  q.net = best_params;
  q.target = q.net;
  return q;
}

double dr_estimate(const Dataset& ds, const PolicyFn& target,
                   const std::vector<std::vector<double>>& behavior_probs, double gamma,
                   const RlConfig& cfg, Rng& rng) {
  const QNet q = fit_sarsa_q(ds, cfg, rng);
  const QValueFn qhat = [&q](const std::vector<double>& s, int a) {
    Tensor2 in(1, q.state_dim);
    for (int k = 0; k < q.state_dim; ++k) in.at(0, k) = s[k];
    return forward(q.net, in).at(0, a);
  };
  return dr_core(ds, target, behavior_probs, gamma, qhat);
}

void save_qnet(const std::string& path, const QNet& q, std::uint64_t seed) {
  save_mlp(path, q.net, seed);
}

QNet load_qnet(const std::string& path, int state_dim, int n_actions) {
  QNet q;
  q.net = load_mlp(path);
  if (q.net.spec.input_width() != state_dim || q.net.spec.output_width() != n_actions)
    throw ParseError("load_qnet: " + path + ": shape does not match dataset");
  q.target = q.net;
  q.state_dim = state_dim;
  q.n_actions = n_actions;
  return q;
}

}  // namespace stitchrl
