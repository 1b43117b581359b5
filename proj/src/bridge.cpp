#include "stitchrl/bridge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "stitchrl/stitch.hpp"

namespace stitchrl {

void BridgeConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("BridgeConfig.sigma: must be > 0");
  if (!(eps_stab > 0.0)) throw ConfigError("BridgeConfig.eps_stab: must be > 0");
  if (k_max < 1) throw ConfigError("BridgeConfig.k_max: must be >= 1");
  if (batch < 1) throw ConfigError("BridgeConfig.batch: must be >= 1");
  if (train_iters < 0) throw ConfigError("BridgeConfig.train_iters: must be >= 0");
  if (!(step_scale > 0.0)) throw ConfigError("BridgeConfig.step_scale: must be > 0");
  if (!(pair_dist_min >= 0.0 && pair_dist_min < pair_dist_max))
    throw ConfigError("BridgeConfig.pair_dist band: need 0 <= min < max");
}

BridgeNet make_bridge_net(int state_dim, const BridgeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  MlpSpec spec;
  spec.widths.push_back(3 * state_dim + 1);
  for (int h : cfg.hidden) spec.widths.push_back(h);
  spec.widths.push_back(2 * state_dim);
  spec.act = Activation::Tanh;
  return BridgeNet{make_mlp(spec, seed), state_dim};
}

namespace {

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d2 = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double c = a[k] - b[k];
    d2 += c * c;
  }
  return std::sqrt(d2);
}

}  // namespace

std::vector<StatePair> make_training_pairs(const Dataset& ds, int n_pairs, const BridgeConfig& cfg,
                                           Rng& rng) {
  if (ds.trajectories.empty()) throw UsageError("make_training_pairs: empty dataset");
  if (ds.trajectories.size() < 2)
    throw UsageError("make_training_pairs: need at least 2 trajectories for cross-pairs");

  const auto norm = normalized_states(ds);
  const int n_traj = static_cast<int>(ds.trajectories.size());

  std::vector<StatePair> out;
  out.reserve(n_pairs);
  bool widened = false;
  auto fill = [&](double d_lo, double d_hi) {
    const long max_attempts = std::max(100000L, 500L * n_pairs);
    for (long attempt = 0; attempt < max_attempts && static_cast<int>(out.size()) < n_pairs;
         ++attempt) {
      const int i = static_cast<int>(rng.uniform_int(n_traj));
      int j = static_cast<int>(rng.uniform_int(n_traj - 1));
      if (j >= i) ++j;  // distinct trajectories
      const auto& si = norm[i][rng.uniform_int(norm[i].size())];
      const auto& sj = norm[j][rng.uniform_int(norm[j].size())];
      const double d = dist(si, sj);
      if (d >= d_lo && d <= d_hi) out.emplace_back(si, sj);
    }
  };

  fill(cfg.pair_dist_min, cfg.pair_dist_max);
  if (out.empty()) {
    widened = true;
    fill(cfg.pair_dist_min / 5.0, 2.0);
  }
  if (out.empty())
    throw UsageError("make_training_pairs: no cross-trajectory pairs inside the distance band, "
                     "even after widening; the dataset's states are degenerate");
  if (static_cast<int>(out.size()) < n_pairs)
    throw UsageError("make_training_pairs: only " + std::to_string(out.size()) + " of " +
                     std::to_string(n_pairs) + " requested pairs found" +
                     (widened ? " (band was widened once)" : ""));
  return out;
}

std::vector<double> score_target(const std::vector<double>& eps, double t, double sigma,
                                 double eps_stab, bool forward_direction) {
  const double scale = forward_direction ? sigma * std::sqrt(t) : sigma * std::sqrt(1.0 - t);
  std::vector<double> out(eps.size());
  for (std::size_t k = 0; k < eps.size(); ++k) out[k] = -eps[k] / (scale + eps_stab);
  return out;
}

BridgeBatch sample_bridge_batch(const std::vector<StatePair>& pairs, int batch_size,
                                const BridgeConfig& cfg, Rng& rng) {
  (void)cfg;
  if (pairs.empty()) throw UsageError("sample_bridge_batch: empty pair set");
  BridgeBatch batch;
  const int dim = static_cast<int>(pairs.front().first.size());
  for (int i = 0; i < batch_size; ++i) {
    batch.pairs.push_back(&pairs[rng.uniform_int(pairs.size())]);
    // Times are kept strictly inside (0,1).
    double t = rng.uniform();
    t = std::min(std::max(t, 1e-6), 1.0 - 1e-6);
    batch.t.push_back(t);
    std::vector<double> ef(dim), eb(dim);
    for (int k = 0; k < dim; ++k) ef[k] = rng.normal();
    for (int k = 0; k < dim; ++k) eb[k] = rng.normal();
    batch.eps_fwd.push_back(std::move(ef));
    batch.eps_bwd.push_back(std::move(eb));
  }
  return batch;
}

namespace {

// Builds the network input row (x, time, x_start, x_target).
void fill_input_row(double* row, const std::vector<double>& x, double time_feature,
                    const std::vector<double>& xs, const std::vector<double>& xt) {
  const int dim = static_cast<int>(x.size());
  for (int k = 0; k < dim; ++k) row[k] = x[k];
  row[dim] = time_feature;
  for (int k = 0; k < dim; ++k) row[dim + 1 + k] = xs[k];
  for (int k = 0; k < dim; ++k) row[2 * dim + 1 + k] = xt[k];
}

}  // namespace

BridgeLosses bridge_losses(const BridgeNet& bn, const BridgeBatch& batch, const BridgeConfig& cfg,
                           MlpGrads* grads) {
  const int B = static_cast<int>(batch.pairs.size());
  const int dim = bn.dim;
  const int in_width = 3 * dim + 1;

  // Pass 1: start states perturbed at time t, supervised on the fwd head.
  Tensor2 x_fwd(B, in_width);
  // Pass 2: target states perturbed at complementary time, evaluated at
  // reversed time input, supervised on the bwd head.
  Tensor2 x_bwd(B, in_width);
  std::vector<std::vector<double>> tgt_fwd(B), tgt_bwd(B);
  for (int i = 0; i < B; ++i) {
    const auto& [xs, xt] = *batch.pairs[i];
    const double t = batch.t[i];
    std::vector<double> noisy_fwd(dim), noisy_bwd(dim);
    const double sf = cfg.sigma * std::sqrt(t);
    const double sb = cfg.sigma * std::sqrt(1.0 - t);
    for (int k = 0; k < dim; ++k) noisy_fwd[k] = xs[k] + sf * batch.eps_fwd[i][k];
    for (int k = 0; k < dim; ++k) noisy_bwd[k] = xt[k] + sb * batch.eps_bwd[i][k];
    fill_input_row(x_fwd.row(i), noisy_fwd, t, xs, xt);
    fill_input_row(x_bwd.row(i), noisy_bwd, 1.0 - t, xs, xt);
    tgt_fwd[i] = score_target(batch.eps_fwd[i], t, cfg.sigma, cfg.eps_stab, true);
    tgt_bwd[i] = score_target(batch.eps_bwd[i], t, cfg.sigma, cfg.eps_stab, false);
  }

  BridgeLosses losses;
  auto run_pass = [&](const Tensor2& input, const std::vector<std::vector<double>>& targets,
                      bool fwd_head) {
    ForwardTrace trace;
    const Tensor2 out = forward(bn.net, input, trace);
    const int off = fwd_head ? 0 : dim;
    double loss = 0.0;
    Tensor2 dout(B, 2 * dim);
    for (int i = 0; i < B; ++i) {
      for (int k = 0; k < dim; ++k) {
        const double diff = out.at(i, off + k) - targets[i][k];
        loss += diff * diff;
        dout.at(i, off + k) = 2.0 * diff / B;
      }
    }
    loss /= B;
    if (grads != nullptr) accumulate(*grads, backward(bn.net, trace, dout));
    return loss;
  };
  losses.fwd = run_pass(x_fwd, tgt_fwd, true);
  losses.bwd = run_pass(x_bwd, tgt_bwd, false);
  return losses;
}

TrainedBridge train_bridge(const std::vector<StatePair>& pairs, int state_dim,
                           const BridgeConfig& cfg, Rng& rng) {
  cfg.validate();
  if (pairs.empty()) throw UsageError("train_bridge: empty pair set");
  TrainedBridge tb;
  tb.net = make_bridge_net(state_dim, cfg, rng.next_u64());
  AdamState opt = make_adam(tb.net.net, cfg.lr);
  for (int iter = 0; iter < cfg.train_iters; ++iter) {
    const BridgeBatch batch = sample_bridge_batch(pairs, cfg.batch, cfg, rng);
    MlpGrads grads = zero_grads(tb.net.net);
    const BridgeLosses losses = bridge_losses(tb.net, batch, cfg, &grads);
    if (!std::isfinite(losses.total()))
      throw NumericError("train_bridge: non-finite loss at iteration " + std::to_string(iter));
    adam_step(tb.net.net, grads, opt);
    tb.trace.push_back({iter, losses.fwd, losses.bwd});
  }
  return tb;
}

int choose_k(const std::vector<double>& x_start, const std::vector<double>& x_target,
             const BridgeConfig& cfg) {
  const double d = dist(x_start, x_target);
  const int k = static_cast<int>(std::ceil(d / cfg.step_scale));
  return std::clamp(k, 1, cfg.k_max);
}

std::vector<std::vector<double>> generate_bridge(const BridgeNet& bn,
                                                 const std::vector<double>& x_start,
                                                 const std::vector<double>& x_target, int k,
                                                 const BridgeConfig& cfg, Rng& rng) {
  if (k < 1) throw UsageError("generate_bridge: K must be >= 1");
  const int dim = bn.dim;
  const double dt = 1.0 / k;
  std::vector<std::vector<double>> out;
  out.reserve(k);
  std::vector<double> cur = x_start;
  Tensor2 input(1, 3 * dim + 1);
  for (int step = 0; step < k; ++step) {
    // Remaining time to the pinned endpoint, taken at the step midpoint so
    // the learned score's pull strengthens as the bridge closes.
    const double remaining = 1.0 - (static_cast<double>(step) + 0.5) * dt;
    fill_input_row(input.row(0), cur, remaining, x_start, x_target);
    const Tensor2 score = forward(bn.net, input);
    std::vector<double> next(dim);
    const double drift_scale = 0.5 * cfg.sigma * cfg.sigma * dt;
    const double noise_scale = cfg.sigma * std::sqrt(dt);
    for (int c = 0; c < dim; ++c) {
      // The bwd head carries the score toward the pinned endpoint.
      const double drift = score.at(0, dim + c);
      next[c] = cur[c] + drift_scale * drift + noise_scale * rng.normal();
      if (!std::isfinite(next[c]))
        throw NumericError("generate_bridge: non-finite state at step " + std::to_string(step));
    }
    out.push_back(next);
    cur = std::move(next);
  }
  return out;
}

void save_bridge_trace_csv(const std::string& path, const std::vector<BridgeTraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw UsageError("save_bridge_trace_csv: cannot open " + path);
  out << "iteration,fwd_loss,bwd_loss\n";
  out.precision(17);
  for (const BridgeTraceRow& row : trace)
    out << row.iter << "," << row.fwd_loss << "," << row.bwd_loss << "\n";
}

}  // namespace stitchrl
