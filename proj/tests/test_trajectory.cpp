#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "stitchrl/data.hpp"
#include "stitchrl/rng.hpp"

using namespace stitchrl;

namespace {

Trajectory make_traj(const std::string& id, const std::vector<double>& rewards, int dim = 2) {
  Trajectory tr;
  tr.id = id;
  Rng rng(std::hash<std::string>{}(id));
  for (double r : rewards) {
    Step st;
    st.state.resize(dim);
    for (double& x : st.state) x = rng.normal();
    st.action = static_cast<int>(rng.uniform_int(4));
    st.reward = r;
    tr.steps.push_back(std::move(st));
  }
  return tr;
}

Dataset make_dataset(const std::vector<std::vector<double>>& reward_lists) {
  Dataset ds;
  ds.env_hash = "testenv";
  ds.n_symptoms = 2;
  ds.n_treatments = 4;
  int i = 0;
  for (const auto& rewards : reward_lists) ds.trajectories.push_back(make_traj("t" + std::to_string(i++), rewards));
  ds.norm_stats = compute_norm_stats(ds);
  return ds;
}

// Independent nearest-rank oracle: full sort, index ceil(q/100*N), 1-based.
double percentile_oracle(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const long rank = static_cast<long>(std::ceil(q / 100.0 * values.size()));
  return values[std::max(1L, rank) - 1];
}

}  // namespace

TEST_CASE("discounted_return examples") {
  CHECK(discounted_return(make_traj("a", {1, 1, 1}), 1.0) == 3.0);
  CHECK(discounted_return(make_traj("b", {2, 4}), 0.5) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(discounted_return(make_traj("c", {-7.5}), 0.3) == -7.5);
}

TEST_CASE("split_by_return: nearest-rank example {10,20,30,40} at q=50") {
  Dataset ds = make_dataset({{10}, {20}, {30}, {40}});
  const SplitResult res = split_by_return(ds, 50.0, 1.0);
  CHECK(res.phi == 20.0);
  CHECK(res.high.size() == 3);
  CHECK(res.low.size() == 1);
  CHECK(ds.trajectories[res.low.indices[0]].steps[0].reward == 10.0);
}

TEST_CASE("split_by_return: all-equal returns fall back to an index split") {
  Dataset ds = make_dataset({{5}, {5}, {5}, {5}, {5}});
  const SplitResult res = split_by_return(ds, 50.0, 1.0);
  CHECK(res.fallback);
  CHECK(res.high.size() + res.low.size() == 5);
  CHECK(res.high.size() >= 1);
  CHECK(res.low.size() >= 1);
}

TEST_CASE("split_by_return: partition property and oracle agreement") {
  Rng rng(99);
  for (int n = 1; n <= 100; n += 7) {
    std::vector<std::vector<double>> rewards;
    for (int i = 0; i < n; ++i) rewards.push_back({std::floor(rng.uniform(-50, 50))});
    Dataset ds = make_dataset(rewards);
    std::vector<double> returns;
    for (const auto& tr : ds.trajectories) returns.push_back(tr.steps[0].reward);
    for (int q = 1; q <= 99; q += 2) {
      const SplitResult res = split_by_return(ds, q, 1.0);
      CHECK(res.high.size() + res.low.size() == static_cast<std::size_t>(n));
      if (!res.fallback) {
        CHECK(res.phi == percentile_oracle(returns, q));
        for (int idx : res.high.indices) CHECK(returns[idx] >= res.phi);
        for (int idx : res.low.indices) CHECK(returns[idx] < res.phi);
      }
      // Disjointness.
      std::vector<int> all = res.high.indices;
      all.insert(all.end(), res.low.indices.begin(), res.low.indices.end());
      std::sort(all.begin(), all.end());
      CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    }
  }
}

TEST_CASE("split_by_return: empty dataset and bad q are usage errors") {
  Dataset empty;
  CHECK_THROWS_AS(split_by_return(empty, 50.0, 1.0), UsageError);
  Dataset ds = make_dataset({{1}});
  CHECK_THROWS_AS(split_by_return(ds, 0.0, 1.0), UsageError);
  CHECK_THROWS_AS(split_by_return(ds, 100.0, 1.0), UsageError);
}

TEST_CASE("normalize_state: mean vector maps to the e0 convention") {
  Dataset ds = make_dataset({{1, 2, 3}, {4, 5}});
  const std::vector<double> z = normalize_state(ds.norm_stats, ds.norm_stats.mean);
  CHECK(z[0] == 1.0);
  for (std::size_t k = 1; k < z.size(); ++k) CHECK(z[k] == 0.0);
}

TEST_CASE("normalize_state: always unit norm, cosine equals inner product") {
  Dataset ds = make_dataset({{1, 2, 3}, {4, 5}, {0, -3}});
  Rng rng(5);
  std::vector<std::vector<double>> normed;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> s = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
    const auto z = normalize_state(ds.norm_stats, s);
    double n2 = 0.0;
    for (double x : z) n2 += x * x;
    CHECK(std::abs(std::sqrt(n2) - 1.0) <= 1e-12);
    normed.push_back(z);
  }
  // Determinism: equal states map identically.
  const std::vector<double> s = {0.25, -1.5};
  CHECK(normalize_state(ds.norm_stats, s) == normalize_state(ds.norm_stats, s));
}

TEST_CASE("norm stats: zero-variance dimensions get std 1") {
  Dataset ds;
  ds.n_symptoms = 2;
  ds.n_treatments = 2;
  Trajectory tr;
  tr.id = "x";
  for (int i = 0; i < 3; ++i) {
    Step st;
    st.state = {5.0, static_cast<double>(i)};
    st.action = 0;
    st.reward = 0;
    tr.steps.push_back(st);
  }
  ds.trajectories.push_back(tr);
  ds.norm_stats = compute_norm_stats(ds);
  CHECK(ds.norm_stats.std[0] == 1.0);
  CHECK(ds.norm_stats.std[1] > 0.0);
}

TEST_CASE("save/load round-trip is field-for-field identity") {
  Dataset ds = make_dataset({{1.5, -2.25, 3.125}, {4.0625}, {-0.001, 64.0}});
  ds.trajectories[1].source = Source::Stitched;
  ds.trajectories[1].outcome = Outcome::Remission;
  StitchMeta meta;
  meta.parent_a = "t0";
  meta.parent_b = "t2";
  meta.t = 1;
  meta.t_prime = 1;
  meta.similarity = 0.97531;
  meta.bridge_len = 0;
  ds.trajectories[1].stitch_meta = meta;
  ds.trajectories[2].steps[0].synthetic = true;
  ds.trajectories[2].source = Source::StitchedSB;

  const std::string path = "/tmp/stitchrl_test_ds.jsonl";
  save_dataset(path, ds);
  const Dataset back = load_dataset(path);
  CHECK(back == ds);
  std::filesystem::remove(path);
}

TEST_CASE("load_dataset: malformed line reports the line number") {
  const std::string path = "/tmp/stitchrl_test_bad.jsonl";
  {
    Dataset ds = make_dataset({{1}, {2}});
    save_dataset(path, ds);
    std::ofstream out(path, std::ios::app);
    out << "{ truncated\n";
  }
  try {
    load_dataset(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":4") != std::string::npos);  // header + 2 rows + bad line
    CHECK(std::string(e.what()).find("last good line 3") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("load_dataset: unknown fields are rejected with the format version") {
  const std::string path = "/tmp/stitchrl_test_unknown.jsonl";
  {
    Dataset ds = make_dataset({{1}});
    save_dataset(path, ds);
    std::ofstream out(path, std::ios::app);
    out << R"({"id":"zz","source":"real","outcome":"truncated","bogus":1,"steps":[{"s":[0,0],"a":0,"r":0,"syn":false}]})"
        << "\n";
  }
  try {
    load_dataset(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bogus") != std::string::npos);
    CHECK(msg.find("format_version 1") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("load_dataset: version mismatch is an explicit error") {
  const std::string path = "/tmp/stitchrl_test_version.jsonl";
  {
    std::ofstream out(path);
    out << R"({"format_version":999,"env_hash":"x","n_symptoms":2,"n_treatments":4,"norm_stats":{"mean":[0,0],"std":[1,1]}})"
        << "\n";
  }
  CHECK_THROWS_WITH_AS(load_dataset(path),
                       doctest::Contains("format_version 999"), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("large dataset round-trip preserves per-trajectory returns") {
  Rng rng(11);
  std::vector<std::vector<double>> rewards;
  for (int i = 0; i < 1024; ++i) {
    std::vector<double> rs;
    const int len = 1 + static_cast<int>(rng.uniform_int(6));
    for (int t = 0; t < len; ++t) rs.push_back(rng.uniform(-4, 64));
    rewards.push_back(std::move(rs));
  }
  Dataset ds = make_dataset(rewards);
  const std::string path = "/tmp/stitchrl_test_big.jsonl";
  save_dataset(path, ds);
  const Dataset back = load_dataset(path);
  REQUIRE(back.trajectories.size() == ds.trajectories.size());
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i)
    CHECK(discounted_return(back.trajectories[i], 0.97) ==
          discounted_return(ds.trajectories[i], 0.97));
  std::filesystem::remove(path);
}
