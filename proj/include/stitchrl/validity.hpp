#pragma once

#include <map>
#include <string>
#include <vector>

#include "stitchrl/data.hpp"

namespace stitchrl {

struct TrajectoryCheck {
  std::string id;
  Source source = Source::Real;
  double worst_state_dev = 0.0;
  double worst_next_dev = 0.0;
  int state_violations = 0;
  int next_violations = 0;
  int nonjunction_mismatches = 0;  // non-junction transitions not found verbatim
  int synthetic_transitions = 0;   // reported separately, not bound-checked
};

struct ValidityReport {
  double delta = 0.0;
  double lipschitz = 0.0;
  double state_bound = 0.0;      // sqrt(2*(1-delta))
  double next_state_bound = 0.0; // L * sqrt(2*(1-delta))
  long transitions_checked = 0;
  long nonjunction_checked = 0;
  long nonjunction_exact = 0;
  long junction_checked = 0;
  long state_violations = 0;       // asserted side
  long next_state_violations = 0;  // reported side (stochastic dynamics)
  long synthetic_transitions = 0;
  std::vector<TrajectoryCheck> per_trajectory;
  std::map<int, long> k_histogram;
  std::string note;

  std::string to_json() const;
  std::string to_table() const;
};

// Empirical Lipschitz constant of the dynamics: the max ratio of next-state
// distance to state distance over nearest-neighbor same-action transition
// pairs with state distance in (1e-6, 0.5]. Distances are taken in z-score
// space (the unit scaling would erase radial structure).
struct LipschitzEstimate {
  double value = 0.0;
  long pairs_used = 0;
};

LipschitzEstimate estimate_lipschitz(const Dataset& ds);

// For every transition of every stitched trajectory, finds the nearest
// same-action original transition in normalized space and checks the
// state-side bound sqrt(2(1-delta)) and the next-state-side bound
// L*sqrt(2(1-delta)). Non-junction transitions must match an original
// transition verbatim. Transitions touching synthetic steps are counted
// separately (the bound statement covers direct stitching only).
ValidityReport check_theorem1(const Dataset& augmented, const Dataset& original, double delta,
                              double lipschitz);

// Histogram of stitch_meta.bridge_len over StitchedSB trajectories.
std::map<int, long> bridge_length_stats(const Dataset& ds);

}  // namespace stitchrl
