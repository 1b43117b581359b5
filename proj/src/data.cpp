#include "stitchrl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace stitchrl {

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::Remission: return "remission";
    case Outcome::AdverseEvent: return "adverse";
    case Outcome::Truncated: return "truncated";
  }
  return "truncated";
}

std::string to_string(Source s) {
  switch (s) {
    case Source::Real: return "real";
    case Source::Stitched: return "stitched";
    case Source::StitchedSB: return "stitched_sb";
  }
  return "real";
}

Outcome outcome_from_string(const std::string& s) {
  if (s == "remission") return Outcome::Remission;
  if (s == "adverse") return Outcome::AdverseEvent;
  if (s == "truncated") return Outcome::Truncated;
  throw ParseError("unknown outcome '" + s + "'");
}

Source source_from_string(const std::string& s) {
  if (s == "real") return Source::Real;
  if (s == "stitched") return Source::Stitched;
  if (s == "stitched_sb") return Source::StitchedSB;
  throw ParseError("unknown source '" + s + "'");
}

double discounted_return(const Trajectory& traj, double gamma) {
  double acc = 0.0;
  double g = 1.0;
  for (const Step& st : traj.steps) {
    acc += g * st.reward;
    g *= gamma;
  }
  return acc;
}

NormStats compute_norm_stats(const Dataset& ds) {
  NormStats stats;
  const int d = ds.n_symptoms;
  stats.mean.assign(d, 0.0);
  stats.std.assign(d, 1.0);
  long n = 0;
  for (const Trajectory& tr : ds.trajectories) {
    if (tr.source != Source::Real) continue;
    for (const Step& st : tr.steps) {
      for (int k = 0; k < d; ++k) stats.mean[k] += st.state[k];
      ++n;
    }
  }
  if (n == 0) return stats;
  for (int k = 0; k < d; ++k) stats.mean[k] /= static_cast<double>(n);
  std::vector<double> var(d, 0.0);
  for (const Trajectory& tr : ds.trajectories) {
    if (tr.source != Source::Real) continue;
    for (const Step& st : tr.steps)
      for (int k = 0; k < d; ++k) {
        const double c = st.state[k] - stats.mean[k];
        var[k] += c * c;
      }
  }
  for (int k = 0; k < d; ++k) {
    const double sd = std::sqrt(var[k] / static_cast<double>(n));
    stats.std[k] = sd > 0.0 ? sd : 1.0;
  }
  return stats;
}

double nearest_rank_percentile(std::vector<double> values, double q) {
  if (values.empty()) throw UsageError("nearest_rank_percentile: empty value list");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<long>(std::ceil(q / 100.0 * n));  // 1-based
  rank = std::clamp(rank, 1L, static_cast<long>(values.size()));
  return values[rank - 1];
}

SplitResult split_by_return(const Dataset& ds, double q, double gamma) {
  if (ds.trajectories.empty()) throw UsageError("split_by_return: empty dataset");
  if (!(q > 0.0 && q < 100.0)) throw UsageError("split_by_return: q must be in (0,100)");
  const int n = static_cast<int>(ds.trajectories.size());
  std::vector<double> returns(n);
  for (int i = 0; i < n; ++i) returns[i] = discounted_return(ds.trajectories[i], gamma);

  SplitResult res;
  res.high.base = &ds;
  res.low.base = &ds;
  res.phi = nearest_rank_percentile(returns, q);
  for (int i = 0; i < n; ++i) {
    if (returns[i] >= res.phi) res.high.indices.push_back(i);
    else res.low.indices.push_back(i);
  }
  if (res.low.empty() && n >= 2) {
    // Degenerate split (e.g. all returns equal): index split on sorted order.
    res.fallback = true;
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return returns[a] < returns[b]; });
    res.high.indices.clear();
    res.low.indices.clear();
    const int cut = n / 2;
    for (int i = 0; i < n; ++i) {
      if (i < cut) res.low.indices.push_back(order[i]);
      else res.high.indices.push_back(order[i]);
    }
    std::sort(res.low.indices.begin(), res.low.indices.end());
    std::sort(res.high.indices.begin(), res.high.indices.end());
  }
  return res;
}

std::vector<double> normalize_state(const NormStats& stats, const std::vector<double>& s) {
  const std::size_t d = stats.mean.size();
  std::vector<double> z(d);
  double norm_sq = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    z[k] = (s[k] - stats.mean[k]) / stats.std[k];
    norm_sq += z[k] * z[k];
  }
  const double norm = std::sqrt(norm_sq);
  if (norm == 0.0) {
    std::fill(z.begin(), z.end(), 0.0);
    z[0] = 1.0;
    return z;
  }
  for (double& x : z) x /= norm;
  return z;
}

std::vector<double> denormalize_state(const NormStats& stats, const std::vector<double>& z) {
  std::vector<double> s(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) s[k] = z[k] * stats.std[k] + stats.mean[k];
  return s;
}

// ---------------------------------------------------------------------------
// JSON-Lines serialization
// ---------------------------------------------------------------------------

namespace {

constexpr int kFormatVersion = 1;

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) { known = true; break; }
    if (!known)
      throw ParseError(where + ": unknown field '" + it.key() + "' (format_version " +
                       std::to_string(kFormatVersion) + ")");
  }
}

nlohmann::json step_to_json(const Step& st) {
  return nlohmann::json{{"s", st.state}, {"a", st.action}, {"r", st.reward}, {"syn", st.synthetic}};
}

nlohmann::json meta_to_json(const StitchMeta& m) {
  return nlohmann::json{{"parent_a", m.parent_a}, {"parent_b", m.parent_b}, {"t", m.t},
                        {"t_prime", m.t_prime},   {"similarity", m.similarity},
                        {"bridge_len", m.bridge_len}};
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw UsageError("save_dataset: cannot open " + path);
  nlohmann::json header{{"format_version", kFormatVersion},
                        {"env_hash", ds.env_hash},
                        {"n_symptoms", ds.n_symptoms},
                        {"n_treatments", ds.n_treatments},
                        {"norm_stats", {{"mean", ds.norm_stats.mean}, {"std", ds.norm_stats.std}}}};
  out << header.dump() << "\n";
  for (const Trajectory& tr : ds.trajectories) {
    nlohmann::json j{{"id", tr.id},
                     {"source", to_string(tr.source)},
                     {"outcome", to_string(tr.outcome)}};
    if (tr.stitch_meta) j["stitch_meta"] = meta_to_json(*tr.stitch_meta);
    nlohmann::json steps = nlohmann::json::array();
    for (const Step& st : tr.steps) steps.push_back(step_to_json(st));
    j["steps"] = std::move(steps);
    out << j.dump() << "\n";
  }
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("load_dataset: cannot open " + path);
  std::string line;
  long line_no = 0;
  auto parse_line = [&](const std::string& text) {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": malformed line (last good line " +
                       std::to_string(line_no - 1) + "): " + e.what());
    }
  };

  if (!std::getline(in, line)) throw ParseError(path + ": empty file, missing header");
  ++line_no;
  nlohmann::json header = parse_line(line);
  reject_unknown_keys(header, {"format_version", "env_hash", "n_symptoms", "n_treatments",
                               "norm_stats"},
                      path + ":1 header");
  const int version = header.value("format_version", -1);
  if (version != kFormatVersion)
    throw ParseError(path + ": format_version " + std::to_string(version) + " unsupported, " +
                     "this build reads version " + std::to_string(kFormatVersion));
  Dataset ds;
  ds.env_hash = header.at("env_hash").get<std::string>();
  ds.n_symptoms = header.at("n_symptoms").get<int>();
  ds.n_treatments = header.at("n_treatments").get<int>();
  const auto& jn = header.at("norm_stats");
  reject_unknown_keys(jn, {"mean", "std"}, path + ":1 norm_stats");
  ds.norm_stats.mean = jn.at("mean").get<std::vector<double>>();
  ds.norm_stats.std = jn.at("std").get<std::vector<double>>();

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = parse_line(line);
    const std::string where = path + ":" + std::to_string(line_no);
    reject_unknown_keys(j, {"id", "source", "outcome", "stitch_meta", "steps"}, where);
    Trajectory tr;
    tr.id = j.at("id").get<std::string>();
    tr.source = source_from_string(j.at("source").get<std::string>());
    tr.outcome = outcome_from_string(j.at("outcome").get<std::string>());
    if (j.contains("stitch_meta")) {
      const auto& jm = j.at("stitch_meta");
      reject_unknown_keys(jm, {"parent_a", "parent_b", "t", "t_prime", "similarity", "bridge_len"},
                          where + " stitch_meta");
      StitchMeta m;
      m.parent_a = jm.at("parent_a").get<std::string>();
      m.parent_b = jm.at("parent_b").get<std::string>();
      m.t = jm.at("t").get<int>();
      m.t_prime = jm.at("t_prime").get<int>();
      m.similarity = jm.at("similarity").get<double>();
      m.bridge_len = jm.at("bridge_len").get<int>();
      tr.stitch_meta = m;
    }
    for (const auto& js : j.at("steps")) {
      reject_unknown_keys(js, {"s", "a", "r", "syn"}, where + " step");
      Step st;
      st.state = js.at("s").get<std::vector<double>>();
      st.action = js.at("a").get<int>();
      st.reward = js.at("r").get<double>();
      st.synthetic = js.at("syn").get<bool>();
      tr.steps.push_back(std::move(st));
    }
    if (tr.steps.empty()) throw ParseError(where + ": trajectory has no steps");
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

}  // namespace stitchrl
