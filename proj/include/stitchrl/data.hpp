#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stitchrl/errors.hpp"

namespace stitchrl {

// Terminal status of a finished episode.
enum class Outcome { Remission, AdverseEvent, Truncated };

enum class Source { Real, Stitched, StitchedSB };

std::string to_string(Outcome o);
std::string to_string(Source s);
Outcome outcome_from_string(const std::string& s);
Source source_from_string(const std::string& s);

struct Step {
  std::vector<double> state;  // symptom observation
  int action = 0;
  double reward = 0.0;
  bool synthetic = false;

  bool operator==(const Step&) const = default;
};

// Provenance of a stitched trajectory: parents, cut indices, junction
// similarity, and (for bridged stitches) the number of generated states.
struct StitchMeta {
  std::string parent_a;  // suffix donor
  std::string parent_b;  // prefix donor
  int t = 0;             // cut index into parent_a
  int t_prime = 0;       // cut index into parent_b
  double similarity = 0.0;
  int bridge_len = 0;  // K; 0 for direct stitches

  bool operator==(const StitchMeta&) const = default;
};

struct Trajectory {
  std::string id;
  std::vector<Step> steps;
  Outcome outcome = Outcome::Truncated;
  Source source = Source::Real;
  std::optional<StitchMeta> stitch_meta;

  bool operator==(const Trajectory&) const = default;
};

// Per-dimension z-score statistics over all real states of a dataset.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;  // zero-variance dimensions get std = 1

  bool operator==(const NormStats&) const = default;
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  std::string env_hash;
  int n_symptoms = 0;
  int n_treatments = 0;
  NormStats norm_stats;

  bool operator==(const Dataset&) const = default;
};

// Read-only subset of a dataset (the percentile split groups).
struct DatasetView {
  const Dataset* base = nullptr;
  std::vector<int> indices;

  const Trajectory& at(int i) const { return base->trajectories[indices[i]]; }
  int size() const { return static_cast<int>(indices.size()); }
  bool empty() const { return indices.empty(); }
};

struct SplitResult {
  DatasetView high;
  DatasetView low;
  double phi = 0.0;        // the percentile threshold value
  bool fallback = false;   // true when the index-split fallback fired
};

double discounted_return(const Trajectory& traj, double gamma);

// Recomputes norm_stats over all real states. Zero-variance dims get std 1.
NormStats compute_norm_stats(const Dataset& ds);

// Nearest-rank percentile split: phi = value at index ceil(q/100*N) (1-based)
// of the ascending sorted returns; high = {R >= phi}, low = complement.
// If low would be empty, falls back to an index split at floor(N/2) of the
// return-sorted order so both parts are nonempty (N >= 2).
SplitResult split_by_return(const Dataset& ds, double q, double gamma);

// Brute-force nearest-rank percentile of a value list (test oracle lives in
// tests; this is the production path used by split_by_return).
double nearest_rank_percentile(std::vector<double> values, double q);

// Z-score per dimension, then scale to unit Euclidean norm. A zero vector
// after z-scoring maps to the unit vector along dimension 0.
std::vector<double> normalize_state(const NormStats& stats, const std::vector<double>& s);

// Inverse of the z-score part only (the unit scaling is not invertible).
std::vector<double> denormalize_state(const NormStats& stats, const std::vector<double>& z);

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace stitchrl
