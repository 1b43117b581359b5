#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stitchrl/data.hpp"
#include "stitchrl/nn.hpp"
#include "stitchrl/rng.hpp"

namespace stitchrl {

struct BridgeConfig {
  double sigma = 0.5;      // diffusion coefficient
  double eps_stab = 1e-3;  // stability constant in the score denominators
  int batch = 128;
  int train_iters = 2000;
  double lr = 1e-3;
  int k_max = 8;            // max bridging states
  double step_scale = 0.15; // normalized-units of distance per bridging state
  std::vector<int> hidden = {64, 64};
  // Accepted distance band for training pairs, in normalized units.
  double pair_dist_min = 0.05;
  double pair_dist_max = 1.5;

  void validate() const;
};

// Conditional score network over (noisy state, time, start, target) with a
// shared trunk and two heads of state dimension each: output columns
// [0, dim) are the fwd score, [dim, 2*dim) the bwd score.
struct BridgeNet {
  Mlp net;
  int dim = 0;
};

BridgeNet make_bridge_net(int state_dim, const BridgeConfig& cfg, std::uint64_t seed);

using StatePair = std::pair<std::vector<double>, std::vector<double>>;

// Normalized cross-trajectory state pairs inside the distance band. If the
// band filters everything out it is widened once; failing again is an error.
std::vector<StatePair> make_training_pairs(const Dataset& ds, int n_pairs, const BridgeConfig& cfg,
                                           Rng& rng);

// Denoising score target: -eps / (sigma*sqrt(t) + eps_stab) in the fwd
// direction and -eps / (sigma*sqrt(1-t) + eps_stab) in the bwd direction.
std::vector<double> score_target(const std::vector<double>& eps, double t, double sigma,
                                 double eps_stab, bool forward_direction);

// One training batch with its noise realizations, kept explicit so the loss
// can be recomputed independently in tests.
struct BridgeBatch {
  std::vector<const StatePair*> pairs;
  std::vector<double> t;
  std::vector<std::vector<double>> eps_fwd;
  std::vector<std::vector<double>> eps_bwd;
};

BridgeBatch sample_bridge_batch(const std::vector<StatePair>& pairs, int batch_size,
                                const BridgeConfig& cfg, Rng& rng);

struct BridgeLosses {
  double fwd = 0.0;
  double bwd = 0.0;
  double total() const { return fwd + bwd; }
};

// Mean-squared score-matching losses of one batch; accumulates parameter
// gradients into *grads when non-null.
BridgeLosses bridge_losses(const BridgeNet& bn, const BridgeBatch& batch, const BridgeConfig& cfg,
                           MlpGrads* grads);

struct BridgeTraceRow {
  int iter = 0;
  double fwd_loss = 0.0;
  double bwd_loss = 0.0;
};

struct TrainedBridge {
  BridgeNet net;
  std::vector<BridgeTraceRow> trace;
};

TrainedBridge train_bridge(const std::vector<StatePair>& pairs, int state_dim,
                           const BridgeConfig& cfg, Rng& rng);

// K = clamp(ceil(dist / step_scale), 1, k_max).
int choose_k(const std::vector<double>& x_start, const std::vector<double>& x_target,
             const BridgeConfig& cfg);

// Euler-Maruyama pass from x_start toward x_target over K steps of size
// dt = 1/K. Each update adds (sigma^2/2) * drift * dt plus sigma*sqrt(dt)
// noise, where the drift is the learned score toward the pinned endpoint
// evaluated at the midpoint of the remaining time. Emits K states
// (x_start itself is not emitted).
std::vector<std::vector<double>> generate_bridge(const BridgeNet& bn,
                                                 const std::vector<double>& x_start,
                                                 const std::vector<double>& x_target, int k,
                                                 const BridgeConfig& cfg, Rng& rng);

void save_bridge_trace_csv(const std::string& path, const std::vector<BridgeTraceRow>& trace);

}  // namespace stitchrl
