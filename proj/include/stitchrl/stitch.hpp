#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stitchrl/data.hpp"
#include "stitchrl/rng.hpp"

namespace stitchrl {

enum class SamplingMode { Priority, Uniform };
enum class StitchStrategy { LowToHigh, HighToLow, Random };

std::string to_string(SamplingMode m);
std::string to_string(StitchStrategy s);

struct StitchConfig {
  double delta = 0.95;   // junction similarity threshold
  double q = 50.0;       // return percentile for the high/low split
  double gamma = 1.0;    // discount used for returns in split and priority
  int m_target = 256;    // number of stitched trajectories to generate
  // Temperature schedule for priority sampling. 0 means "derive from the
  // dataset's return range at augment time" (start = range/10, end = 50*range).
  double alpha_start = 0.0;
  double alpha_end = 0.0;
  SamplingMode sampling = SamplingMode::Priority;
  StitchStrategy strategy = StitchStrategy::LowToHigh;
  int max_attempts_per_stitch = 100;
  int min_margin = 1;  // cut indices stay this far from trajectory ends

  void validate() const;
};

struct StitchPoint {
  int t = 0;        // index into the suffix donor
  int t_prime = 0;  // index into the prefix donor
  double similarity = -1.0;
};

struct StitchReport {
  int requested = 0;
  int produced = 0;
  int misses = 0;
  long attempts_total = 0;
  StitchStrategy strategy = StitchStrategy::LowToHigh;
  double delta = 0.0;
  double q = 0.0;
  double alpha_start = 0.0;
  double alpha_end = 0.0;
  // Best similarity found per slot, binned over [-1, 1] in steps of 0.1.
  std::vector<long> similarity_histogram = std::vector<long>(20, 0);
  bool all_missed = false;

  void record_similarity(double sim);
  std::string to_json() const;
};

// Softmax probabilities over exp(+-R/alpha), max-subtracted for stability.
std::vector<double> boltzmann_probs(const std::vector<double>& returns, double alpha, bool negate);

// Samples a member index of `group` with probability proportional to
// exp(R/alpha) (exp(-R/alpha) when negate).
int boltzmann_sample(const DatasetView& group, const std::vector<double>& group_returns,
                     double alpha, bool negate, Rng& rng);

// Linear temperature schedule across the M generation slots (1-based m).
double alpha_at(int m, const StitchConfig& cfg);

double cosine_similarity(const std::vector<double>& u, const std::vector<double>& v);

// Best similarity pair between intermediate (margin-respecting) states of
// the suffix donor and prefix donor, over precomputed normalized states.
// Ties break toward the smallest t, then the smallest t_prime. Returns
// nullopt when either trajectory is too short to cut.
std::optional<StitchPoint> find_stitch_point(const std::vector<std::vector<double>>& norm_suffix,
                                             const std::vector<std::vector<double>>& norm_prefix,
                                             const StitchConfig& cfg);

// Concatenates prefix_donor[0..t_prime] with suffix_donor[t+1..T].
// Step contents are copied untouched; outcome comes from the suffix donor.
Trajectory stitch(const Trajectory& suffix_donor, const Trajectory& prefix_donor, int t,
                  int t_prime, double similarity, const std::string& id);

struct AugmentResult {
  Dataset dataset;
  StitchReport report;
};

// Algorithm: split by return percentile, then fill M slots by priority
// sampling a (prefix, suffix) pair and accepting the best stitch point when
// its similarity clears delta; slots that exhaust max_attempts are misses.
AugmentResult augment(const Dataset& ds, const StitchConfig& cfg, Rng& rng);

// Resolves alpha_start/alpha_end = 0 against the dataset's return range.
StitchConfig resolve_alphas(const StitchConfig& cfg, const std::vector<double>& returns);

// Normalized states for every trajectory, cached once per augmentation run.
std::vector<std::vector<std::vector<double>>> normalized_states(const Dataset& ds);

// Draws (suffix donor, prefix donor) dataset indices per the configured
// strategy and sampling mode. Shared by the direct and bridged augmenters.
class PairSampler {
 public:
  PairSampler(const Dataset& ds, const StitchConfig& cfg);

  std::pair<int, int> sample(double alpha, Rng& rng) const;  // (suffix_idx, prefix_idx)
  const std::vector<double>& returns() const { return returns_; }
  const StitchConfig& cfg() const { return cfg_; }  // with alphas resolved

 private:
  StitchConfig cfg_;
  std::vector<double> returns_;
  DatasetView high_, low_, all_;
  std::vector<double> high_returns_, low_returns_;
};

}  // namespace stitchrl
