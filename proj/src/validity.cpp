#include "stitchrl/validity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace stitchrl {

namespace {

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d2 = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double c = a[k] - b[k];
    d2 += c * c;
  }
  return std::sqrt(d2);
}

std::vector<double> zscore(const NormStats& stats, const std::vector<double>& s) {
  std::vector<double> z(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) z[k] = (s[k] - stats.mean[k]) / stats.std[k];
  return z;
}

// Exact byte-level key of a transition (s, a, s') for verbatim matching.
std::string transition_key(const std::vector<double>& s, int a, const std::vector<double>& s_next) {
  std::string key;
  key.reserve(s.size() * 8 + s_next.size() * 8 + 4);
  auto push = [&key](const void* p, std::size_t n) {
    key.append(static_cast<const char*>(p), n);
  };
  for (double x : s) push(&x, sizeof(x));
  push(&a, sizeof(a));
  for (double x : s_next) push(&x, sizeof(x));
  return key;
}

struct OriginalTransition {
  std::vector<double> norm_s;
  std::vector<double> norm_next;
};

}  // namespace

LipschitzEstimate estimate_lipschitz(const Dataset& ds) {
  // Same-action transitions, states in z-score space.
  struct Tr {
    std::vector<double> z_s;
    std::vector<double> z_next;
  };
  std::unordered_map<int, std::vector<Tr>> by_action;
  for (const Trajectory& tr : ds.trajectories)
    for (std::size_t t = 0; t + 1 < tr.steps.size(); ++t)
      by_action[tr.steps[t].action].push_back({zscore(ds.norm_stats, tr.steps[t].state),
                                               zscore(ds.norm_stats, tr.steps[t + 1].state)});

  LipschitzEstimate est;
  constexpr double kMinDist = 1e-6;
  constexpr double kMaxDist = 0.5;
  for (const auto& [action, list] : by_action) {
    if (list.size() < 2) continue;
    for (std::size_t i = 0; i < list.size(); ++i) {
      // Nearest neighbor by state distance, linear scan.
      double best_d = std::numeric_limits<double>::infinity();
      std::size_t best_j = i;
      for (std::size_t j = 0; j < list.size(); ++j) {
        if (j == i) continue;
        const double d = dist(list[i].z_s, list[j].z_s);
        if (d < best_d) {
          best_d = d;
          best_j = j;
        }
      }
      if (best_d > kMinDist && best_d <= kMaxDist) {
        est.value = std::max(est.value, dist(list[i].z_next, list[best_j].z_next) / best_d);
        ++est.pairs_used;
      }
    }
  }
  if (est.pairs_used == 0)
    throw UsageError("estimate_lipschitz: no same-action transition pairs with state distance in "
                     "(1e-6, 0.5]; consider a larger radius");
  return est;
}

ValidityReport check_theorem1(const Dataset& augmented, const Dataset& original, double delta,
                              double lipschitz) {
  // Precondition: the augmented set extends the original.
  std::unordered_set<std::string> original_ids;
  for (const Trajectory& tr : original.trajectories) original_ids.insert(tr.id);
  long found = 0;
  for (const Trajectory& tr : augmented.trajectories)
    if (original_ids.count(tr.id)) ++found;
  if (found != static_cast<long>(original_ids.size()))
    throw UsageError("check_theorem1: augmented dataset does not contain the original");

  ValidityReport rep;
  rep.delta = delta;
  rep.lipschitz = lipschitz;
  rep.state_bound = std::sqrt(std::max(0.0, 2.0 * (1.0 - delta)));
  rep.next_state_bound = lipschitz * rep.state_bound;
  rep.note = "next-state bound is reported, not asserted: the theorem assumes deterministic "
             "L-Lipschitz dynamics while this environment is stochastic";

  // Index original transitions: verbatim lookup plus per-action lists in
  // normalized space for nearest-neighbor checks.
  std::unordered_set<std::string> verbatim;
  std::unordered_map<int, std::vector<OriginalTransition>> by_action;
  const NormStats& stats = original.norm_stats;
  for (const Trajectory& tr : original.trajectories) {
    for (std::size_t t = 0; t + 1 < tr.steps.size(); ++t) {
      const Step& st = tr.steps[t];
      const Step& nx = tr.steps[t + 1];
      verbatim.insert(transition_key(st.state, st.action, nx.state));
      by_action[st.action].push_back(
          {normalize_state(stats, st.state), normalize_state(stats, nx.state)});
    }
  }

  rep.k_histogram = bridge_length_stats(augmented);

  for (const Trajectory& tr : augmented.trajectories) {
    if (tr.source == Source::Real) continue;
    TrajectoryCheck check;
    check.id = tr.id;
    check.source = tr.source;
    // Junction transition index: last prefix step -> first suffix step.
    const int junction = tr.stitch_meta ? tr.stitch_meta->t_prime : -1;

    for (std::size_t t = 0; t + 1 < tr.steps.size(); ++t) {
      const Step& st = tr.steps[t];
      const Step& nx = tr.steps[t + 1];
      ++rep.transitions_checked;

      if (st.synthetic || nx.synthetic) {
        ++rep.synthetic_transitions;
        ++check.synthetic_transitions;
        continue;
      }

      const bool is_junction =
          tr.source == Source::Stitched && static_cast<int>(t) == junction;
      if (!is_junction) {
        ++rep.nonjunction_checked;
        if (verbatim.count(transition_key(st.state, st.action, nx.state))) {
          ++rep.nonjunction_exact;
        } else {
          ++check.nonjunction_mismatches;
          ++rep.state_violations;
          ++check.state_violations;
        }
        continue;
      }

      // Junction: nearest same-action original transition in normalized space.
      ++rep.junction_checked;
      const std::vector<double> ns = normalize_state(stats, st.state);
      const std::vector<double> nn = normalize_state(stats, nx.state);
      const auto it = by_action.find(st.action);
      double best_state = std::numeric_limits<double>::infinity();
      double best_next = std::numeric_limits<double>::infinity();
      if (it != by_action.end()) {
        for (const OriginalTransition& orig : it->second) {
          const double d = dist(ns, orig.norm_s);
          if (d < best_state) {
            best_state = d;
            best_next = dist(nn, orig.norm_next);
          }
        }
      }
      check.worst_state_dev = std::max(check.worst_state_dev, best_state);
      check.worst_next_dev = std::max(check.worst_next_dev, best_next);
      if (best_state > rep.state_bound + 1e-12) {
        ++rep.state_violations;
        ++check.state_violations;
      }
      if (best_next > rep.next_state_bound + 1e-12) {
        ++rep.next_state_violations;
        ++check.next_violations;
      }
    }
    rep.per_trajectory.push_back(std::move(check));
  }
  return rep;
}

std::map<int, long> bridge_length_stats(const Dataset& ds) {
  std::map<int, long> hist;
  for (const Trajectory& tr : ds.trajectories)
    if (tr.source == Source::StitchedSB && tr.stitch_meta)
      hist[tr.stitch_meta->bridge_len] += 1;
  return hist;
}

std::string ValidityReport::to_json() const {
  nlohmann::json j{{"delta", delta},
                   {"lipschitz", lipschitz},
                   {"state_bound", state_bound},
                   {"next_state_bound", next_state_bound},
                   {"transitions_checked", transitions_checked},
                   {"nonjunction_checked", nonjunction_checked},
                   {"nonjunction_exact", nonjunction_exact},
                   {"junction_checked", junction_checked},
                   {"state_violations", state_violations},
                   {"next_state_violations", next_state_violations},
                   {"synthetic_transitions", synthetic_transitions},
                   {"note", note}};
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [k, count] : k_histogram) hist[std::to_string(k)] = count;
  j["k_histogram"] = hist;
  nlohmann::json rows = nlohmann::json::array();
  for (const TrajectoryCheck& c : per_trajectory) {
    rows.push_back(nlohmann::json{{"id", c.id},
                                  {"source", to_string(c.source)},
                                  {"worst_state_dev", c.worst_state_dev},
                                  {"worst_next_dev", c.worst_next_dev},
                                  {"state_violations", c.state_violations},
                                  {"next_violations", c.next_violations},
                                  {"nonjunction_mismatches", c.nonjunction_mismatches},
                                  {"synthetic_transitions", c.synthetic_transitions}});
  }
  j["per_trajectory"] = rows;
  return j.dump(2);
}

std::string ValidityReport::to_table() const {
  std::ostringstream os;
  os << "validity check (delta = " << delta << ", L = " << lipschitz << ")\n";
  os << "  note: " << note << "\n";
  os << "  state bound sqrt(2(1-delta))   = " << state_bound << "\n";
  os << "  next-state bound L*state_bound = " << next_state_bound << "\n";
  os << "  transitions checked            = " << transitions_checked << "\n";
  os << "  non-junction (exact/checked)   = " << nonjunction_exact << "/" << nonjunction_checked
     << "\n";
  os << "  junctions checked              = " << junction_checked << "\n";
  os << "  state-side violations          = " << state_violations << "\n";
  os << "  next-state deviations > bound  = " << next_state_violations << "\n";
  os << "  synthetic transitions (SB)     = " << synthetic_transitions << "\n";
  if (!k_histogram.empty()) {
    os << "  bridge length histogram:\n";
    for (const auto& [k, count] : k_histogram) os << "    K=" << k << ": " << count << "\n";
  }
  return os.str();
}

}  // namespace stitchrl
