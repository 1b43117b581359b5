#include "stitchrl/stitch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

namespace stitchrl {

std::string to_string(SamplingMode m) {
  return m == SamplingMode::Priority ? "priority" : "uniform";
}

std::string to_string(StitchStrategy s) {
  switch (s) {
    case StitchStrategy::LowToHigh: return "low_to_high";
    case StitchStrategy::HighToLow: return "high_to_low";
    case StitchStrategy::Random: return "random";
  }
  return "low_to_high";
}

void StitchConfig::validate() const {
  // delta above 1 is allowed: it makes the threshold unreachable, which the
  // bridged augmentation path uses to force SB stitches.
  if (delta <= -1.0) throw ConfigError("StitchConfig.delta: must be > -1");
  if (!(q > 0.0 && q < 100.0)) throw ConfigError("StitchConfig.q: must be in (0,100)");
  if (m_target < 1) throw ConfigError("StitchConfig.m_target: must be >= 1");
  if (max_attempts_per_stitch < 1)
    throw ConfigError("StitchConfig.max_attempts_per_stitch: must be >= 1");
  if (min_margin < 0) throw ConfigError("StitchConfig.min_margin: must be >= 0");
  if (alpha_start < 0.0 || alpha_end < 0.0)
    throw ConfigError("StitchConfig.alpha: must be positive (or 0 for auto)");
}

void StitchReport::record_similarity(double sim) {
  int bin = static_cast<int>(std::floor((sim + 1.0) / 0.1));
  bin = std::clamp(bin, 0, static_cast<int>(similarity_histogram.size()) - 1);
  similarity_histogram[static_cast<std::size_t>(bin)] += 1;
}

std::string StitchReport::to_json() const {
  nlohmann::json j{{"requested", requested},
                   {"produced", produced},
                   {"misses", misses},
                   {"attempts_total", attempts_total},
                   {"strategy", stitchrl::to_string(strategy)},
                   {"delta", delta},
                   {"q", q},
                   {"alpha_start", alpha_start},
                   {"alpha_end", alpha_end},
                   {"similarity_histogram", similarity_histogram},
                   {"all_missed", all_missed}};
  return j.dump(2);
}

std::vector<double> boltzmann_probs(const std::vector<double>& returns, double alpha,
                                    bool negate) {
  if (returns.empty()) throw UsageError("boltzmann_probs: empty group");
  if (!(alpha > 0.0)) throw UsageError("boltzmann_probs: alpha must be > 0");
  const double sign = negate ? -1.0 : 1.0;
  std::vector<double> logits(returns.size());
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < returns.size(); ++i) {
    logits[i] = sign * returns[i] / alpha;
    max_logit = std::max(max_logit, logits[i]);
  }
  double total = 0.0;
  for (double& x : logits) {
    x = std::exp(x - max_logit);
    total += x;
  }
  for (double& x : logits) x /= total;
  return logits;
}

int boltzmann_sample(const DatasetView& group, const std::vector<double>& group_returns,
                     double alpha, bool negate, Rng& rng) {
  if (group.empty()) throw UsageError("boltzmann_sample: empty group");
  const std::vector<double> probs = boltzmann_probs(group_returns, alpha, negate);
  return rng.categorical(probs);
}

double alpha_at(int m, const StitchConfig& cfg) {
  const double span = static_cast<double>(std::max(cfg.m_target - 1, 1));
  return cfg.alpha_start + (static_cast<double>(m - 1) / span) * (cfg.alpha_end - cfg.alpha_start);
}

double cosine_similarity(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) throw UsageError("cosine_similarity: length mismatch");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    dot += u[k] * v[k];
    nu += u[k] * u[k];
    nv += v[k] * v[k];
  }
  const double denom = std::sqrt(nu) * std::sqrt(nv);
  if (denom == 0.0) throw UsageError("cosine_similarity: zero-norm input");
  return std::clamp(dot / denom, -1.0, 1.0);
}

std::optional<StitchPoint> find_stitch_point(const std::vector<std::vector<double>>& norm_suffix,
                                             const std::vector<std::vector<double>>& norm_prefix,
                                             const StitchConfig& cfg) {
  const int len_a = static_cast<int>(norm_suffix.size());
  const int len_b = static_cast<int>(norm_prefix.size());
  const int lo = cfg.min_margin;
  const int hi_a = len_a - 1 - cfg.min_margin;
  const int hi_b = len_b - 1 - cfg.min_margin;
  if (lo > hi_a || lo > hi_b) return std::nullopt;  // too short to cut

  StitchPoint best;
  best.similarity = -2.0;
  for (int t = lo; t <= hi_a; ++t) {
    const std::vector<double>& sa = norm_suffix[t];
    for (int tp = lo; tp <= hi_b; ++tp) {
      // Normalized states are unit vectors, so the inner product is the
      // cosine similarity directly.
      double dot = 0.0;
      const std::vector<double>& sb = norm_prefix[tp];
      for (std::size_t k = 0; k < sa.size(); ++k) dot += sa[k] * sb[k];
      dot = std::clamp(dot, -1.0, 1.0);
      if (dot > best.similarity) {
        best.similarity = dot;
        best.t = t;
        best.t_prime = tp;
      }
    }
  }
  return best;
}

Trajectory stitch(const Trajectory& suffix_donor, const Trajectory& prefix_donor, int t,
                  int t_prime, double similarity, const std::string& id) {
  Trajectory out;
  out.id = id;
  out.source = Source::Stitched;
  out.outcome = suffix_donor.outcome;
  out.steps.reserve(static_cast<std::size_t>(t_prime + 1) +
                    (suffix_donor.steps.size() - static_cast<std::size_t>(t) - 1));
  for (int i = 0; i <= t_prime; ++i) out.steps.push_back(prefix_donor.steps[i]);
  for (std::size_t i = static_cast<std::size_t>(t) + 1; i < suffix_donor.steps.size(); ++i)
    out.steps.push_back(suffix_donor.steps[i]);
  StitchMeta meta;
  meta.parent_a = suffix_donor.id;
  meta.parent_b = prefix_donor.id;
  meta.t = t;
  meta.t_prime = t_prime;
  meta.similarity = similarity;
  meta.bridge_len = 0;
  out.stitch_meta = meta;
  return out;
}

StitchConfig resolve_alphas(const StitchConfig& cfg, const std::vector<double>& returns) {
  StitchConfig out = cfg;
  if (out.alpha_start > 0.0 && out.alpha_end > 0.0) return out;
  const auto [lo, hi] = std::minmax_element(returns.begin(), returns.end());
  const double range = std::max(*hi - *lo, 1.0);
  if (out.alpha_start <= 0.0) out.alpha_start = range / 10.0;
  if (out.alpha_end <= 0.0) out.alpha_end = 50.0 * range;
  return out;
}

std::vector<std::vector<std::vector<double>>> normalized_states(const Dataset& ds) {
  std::vector<std::vector<std::vector<double>>> out(ds.trajectories.size());
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& tr = ds.trajectories[i];
    out[i].reserve(tr.steps.size());
    for (const Step& st : tr.steps) out[i].push_back(normalize_state(ds.norm_stats, st.state));
  }
  return out;
}

PairSampler::PairSampler(const Dataset& ds, const StitchConfig& cfg) : cfg_(cfg) {
  if (ds.trajectories.empty()) throw UsageError("PairSampler: empty dataset");
  cfg.validate();
  const int n = static_cast<int>(ds.trajectories.size());
  returns_.resize(n);
  for (int i = 0; i < n; ++i) returns_[i] = discounted_return(ds.trajectories[i], cfg.gamma);
  cfg_ = resolve_alphas(cfg, returns_);

  all_.base = &ds;
  all_.indices.resize(n);
  for (int i = 0; i < n; ++i) all_.indices[i] = i;
  high_ = all_;
  low_ = all_;
  if (cfg_.strategy != StitchStrategy::Random) {
    SplitResult split = split_by_return(ds, cfg_.q, cfg_.gamma);
    high_ = std::move(split.high);
    low_ = std::move(split.low);
  }
  auto view_returns = [&](const DatasetView& v) {
    std::vector<double> r(v.indices.size());
    for (std::size_t i = 0; i < v.indices.size(); ++i) r[i] = returns_[v.indices[i]];
    return r;
  };
  high_returns_ = view_returns(high_);
  low_returns_ = view_returns(low_);
}

std::pair<int, int> PairSampler::sample(double alpha, Rng& rng) const {
  auto pick = [&](const DatasetView& view, const std::vector<double>& view_returns, bool negate) {
    if (cfg_.sampling == SamplingMode::Priority)
      return view.indices[boltzmann_sample(view, view_returns, alpha, negate, rng)];
    return view.indices[rng.uniform_int(view.indices.size())];
  };
  int suffix_idx = 0, prefix_idx = 0;
  switch (cfg_.strategy) {
    case StitchStrategy::LowToHigh:
      // Suffix from the high group, prefix from the low group.
      suffix_idx = pick(high_, high_returns_, false);
      prefix_idx = pick(low_, low_returns_, true);
      break;
    case StitchStrategy::HighToLow:
      prefix_idx = pick(high_, high_returns_, false);
      suffix_idx = pick(low_, low_returns_, true);
      break;
    case StitchStrategy::Random:
      suffix_idx = static_cast<int>(rng.uniform_int(all_.indices.size()));
      prefix_idx = static_cast<int>(rng.uniform_int(all_.indices.size()));
      break;
  }
  return {suffix_idx, prefix_idx};
}

namespace {

struct SlotOutcome {
  std::optional<Trajectory> trajectory;
  double best_similarity = -2.0;
  int attempts = 0;
};

}  // namespace

AugmentResult augment(const Dataset& ds, const StitchConfig& raw_cfg, Rng& rng) {
  const PairSampler sampler(ds, raw_cfg);
  const StitchConfig& cfg = sampler.cfg();
  const auto norm = normalized_states(ds);
  const std::uint64_t base_seed = rng.next_u64();

  std::vector<SlotOutcome> slots(cfg.m_target);
  for (int m = 1; m <= cfg.m_target; ++m) {
    SlotOutcome& slot = slots[m - 1];
    Rng slot_rng(derive_seed(base_seed, static_cast<std::uint64_t>(m)));
    const double alpha = alpha_at(m, cfg);
    for (int attempt = 0; attempt < cfg.max_attempts_per_stitch; ++attempt) {
      ++slot.attempts;
      const auto [suffix_idx, prefix_idx] = sampler.sample(alpha, slot_rng);
      const auto point = find_stitch_point(norm[suffix_idx], norm[prefix_idx], cfg);
      if (!point) continue;  // too short; costs an attempt
      slot.best_similarity = std::max(slot.best_similarity, point->similarity);
      if (point->similarity >= cfg.delta) {
        slot.trajectory = stitch(ds.trajectories[suffix_idx], ds.trajectories[prefix_idx],
                                 point->t, point->t_prime, point->similarity,
                                 "st-" + std::to_string(m));
        break;
      }
    }
  }

  AugmentResult res;
  res.dataset = ds;
  res.report.requested = cfg.m_target;
  res.report.strategy = cfg.strategy;
  res.report.delta = cfg.delta;
  res.report.q = cfg.q;
  res.report.alpha_start = cfg.alpha_start;
  res.report.alpha_end = cfg.alpha_end;
  for (SlotOutcome& slot : slots) {
    res.report.attempts_total += slot.attempts;
    if (slot.best_similarity >= -1.0) res.report.record_similarity(slot.best_similarity);
    if (slot.trajectory) {
      res.dataset.trajectories.push_back(std::move(*slot.trajectory));
      ++res.report.produced;
    } else {
      ++res.report.misses;
    }
  }
  res.report.all_missed = res.report.produced == 0;
  return res;
}

}  // namespace stitchrl
