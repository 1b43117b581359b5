#include "stitchrl/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "stitchrl/config.hpp"
#include "stitchrl/validity.hpp"

namespace fs = std::filesystem;

namespace stitchrl {

namespace {

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string fnv1a_hex(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

std::uint64_t fnv1a(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream tags for derived seeds, one per pipeline stage.
constexpr std::uint64_t kCollectTag = 0xC0113C7;
constexpr std::uint64_t kBridgeTag = 0xB41D6E;
constexpr std::uint64_t kDynTag = 0xD19A;
constexpr std::uint64_t kAugmentTag = 0xA06;
constexpr std::uint64_t kTrainTag = 0x7EA1;
constexpr std::uint64_t kEvalTag = 0xE7A1;
constexpr std::uint64_t kOpeTag = 0x0BE;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot open " + path + " for writing");
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Artifact freshness: the file exists and its sidecar meta carries the
// current config hash. Stage resumption is keyed on this, not timestamps.
bool artifact_fresh(const std::string& path, const std::string& hash) {
  if (!fs::exists(path)) return false;
  const std::string meta_path = path + ".meta.json";
  if (!fs::exists(meta_path)) return false;
  try {
    const nlohmann::json j = nlohmann::json::parse(read_text(meta_path));
    return j.value("config_hash", "") == hash;
  } catch (const std::exception&) {
    return false;
  }
}

void write_meta(const std::string& path, const std::string& hash) {
  nlohmann::json j{{"config_hash", hash}};
  write_text(path + ".meta.json", j.dump() + "\n");
}

void write_json_artifact(const std::string& path, const std::string& json_text,
                         const std::string& hash) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  j["config_hash"] = hash;
  write_text(path, j.dump(2) + "\n");
  write_meta(path, hash);
}

struct StageError : std::runtime_error {
  StageError(const std::string& stage, const std::string& artifact, const std::string& why)
      : std::runtime_error("stage '" + stage + "' failed (artifact " + artifact + "): " + why) {}
};

template <typename Fn>
void run_stage(const std::string& stage, const std::string& artifact, Fn&& fn) {
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, artifact, e.what());
  }
}

}  // namespace

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(n);
  for (int tid = 0; tid < threads; ++tid) {
    pool.emplace_back([&, tid]() {
      for (int i = tid; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

void RunConfig::validate() const {
  env.validate();
  stitch.validate();
  bridge.validate();
  rl.validate();
  if (n_episodes < 1) throw ConfigError("RunConfig.n_episodes: must be >= 1");
  if (!(behavior_epsilon >= 0.0 && behavior_epsilon <= 1.0))
    throw ConfigError("RunConfig.behavior_epsilon: must be in [0,1]");
  if (env_seeds.empty()) throw ConfigError("RunConfig.env_seeds: must not be empty");
  if (rl_seeds.empty()) throw ConfigError("RunConfig.rl_seeds: must not be empty");
  if (variants.empty()) throw ConfigError("RunConfig.variants: must not be empty");
  if (out_dir.empty()) throw ConfigError("RunConfig.out_dir: must not be empty");
  if (threads < 1) throw ConfigError("RunConfig.threads: must be >= 1");
  if (!(m_fraction > 0.0)) throw ConfigError("RunConfig.m_fraction: must be > 0");
  for (const std::string& v : variants) resolve_arm(v, *this);  // throws on unknown names
}

std::string RunConfig::canonical_string() const {
  std::ostringstream os;
  os.precision(17);
  os << "env:" << env_hash(env) << ";stitch:" << stitch.delta << ',' << stitch.q << ','
     << stitch.gamma << ',' << stitch.m_target << ',' << stitch.alpha_start << ','
     << stitch.alpha_end << ',' << to_string(stitch.sampling) << ',' << to_string(stitch.strategy)
     << ',' << stitch.max_attempts_per_stitch << ',' << stitch.min_margin;
  os << ";bridge:" << bridge.sigma << ',' << bridge.eps_stab << ',' << bridge.batch << ','
     << bridge.train_iters << ',' << bridge.lr << ',' << bridge.k_max << ',' << bridge.step_scale
     << ',' << bridge.pair_dist_min << ',' << bridge.pair_dist_max;
  for (int h : bridge.hidden) os << ',' << h;
  os << ";rl:" << rl.batch << ',' << rl.lr << ',' << rl.train_steps << ',' << rl.gamma << ','
     << rl.beta << ',' << rl.target_sync << ',' << rl.eval_episodes;
  for (int h : rl.hidden) os << ',' << h;
  os << ";dyn:" << dyn.epochs << ',' << dyn.lr << ',' << dyn.batch;
  os << ";data:" << label << ',' << n_episodes << ',' << behavior_epsilon << ',' << n_bridge_pairs
     << ',' << ope_train_steps << ',' << m_fraction;
  os << ";env_seeds:";
  for (auto s : env_seeds) os << s << ',';
  os << ";rl_seeds:";
  for (auto s : rl_seeds) os << s << ',';
  os << ";variants:";
  for (const auto& v : variants) os << v << ',';
  return os.str();
}

std::string RunConfig::config_hash() const { return fnv1a_hex(canonical_string()); }

RunConfig run_config_from_string(const std::string& text) {
  const KeyValueConfig kv = KeyValueConfig::from_string(text, "<config>");
  RunConfig cfg;

  // [env] — reuse the EnvSpec keys.
  {
    std::ostringstream env_text;
    for (const auto& [key, value] : kv.values())
      if (key.rfind("env.", 0) == 0) env_text << key.substr(4) << " = " << value << "\n";
    const KeyValueConfig env_kv = KeyValueConfig::from_string(env_text.str(), "<config env>");
    EnvSpec s;
    s.n_treatments = env_kv.get_int("n_treatments", s.n_treatments);
    s.n_disease_states = env_kv.get_int("n_disease_states", s.n_disease_states);
    s.n_symptoms = env_kv.get_int("n_symptoms", s.n_symptoms);
    s.remission_reward = env_kv.get_double("remission_reward", s.remission_reward);
    s.adverse_penalty = env_kv.get_double("adverse_penalty", s.adverse_penalty);
    s.adverse_threshold = env_kv.get_double("adverse_threshold", s.adverse_threshold);
    s.treatment_cost_min = env_kv.get_double("treatment_cost_min", s.treatment_cost_min);
    s.treatment_cost_max = env_kv.get_double("treatment_cost_max", s.treatment_cost_max);
    s.symptom_mean_min = env_kv.get_double("symptom_mean_min", s.symptom_mean_min);
    s.symptom_mean_max = env_kv.get_double("symptom_mean_max", s.symptom_mean_max);
    s.symptom_std_min = env_kv.get_double("symptom_std_min", s.symptom_std_min);
    s.symptom_std_max = env_kv.get_double("symptom_std_max", s.symptom_std_max);
    s.remission_prob_min = env_kv.get_double("remission_prob_min", s.remission_prob_min);
    s.remission_prob_max = env_kv.get_double("remission_prob_max", s.remission_prob_max);
    s.transition_prob_min = env_kv.get_double("transition_prob_min", s.transition_prob_min);
    s.transition_prob_max = env_kv.get_double("transition_prob_max", s.transition_prob_max);
    s.max_episode_len = env_kv.get_int("max_episode_len", s.max_episode_len);
    s.seed = env_kv.get_u64("seed", s.seed);
    s.remission_state_fraction =
        env_kv.get_double("remission_state_fraction", s.remission_state_fraction);
    s.effective_treatments_per_state =
        env_kv.get_int("effective_treatments_per_state", s.effective_treatments_per_state);
    cfg.env = s;
  }

  cfg.label = kv.get_string("data.label", cfg.label);
  cfg.n_episodes = kv.get_int("data.episodes", cfg.n_episodes);
  cfg.behavior_epsilon = kv.get_double("data.behavior_epsilon", cfg.behavior_epsilon);

  cfg.stitch.delta = kv.get_double("stitch.delta", cfg.stitch.delta);
  cfg.stitch.q = kv.get_double("stitch.q", cfg.stitch.q);
  cfg.stitch.gamma = kv.get_double("stitch.gamma", cfg.stitch.gamma);
  cfg.m_fraction = kv.get_double("stitch.m_fraction", cfg.m_fraction);
  const int m_explicit = kv.get_int("stitch.m", 0);
  cfg.stitch.m_target =
      m_explicit > 0
          ? m_explicit
          : std::max(1, static_cast<int>(std::lround(cfg.m_fraction * cfg.n_episodes)));
  cfg.stitch.alpha_start = kv.get_double("stitch.alpha_start", cfg.stitch.alpha_start);
  cfg.stitch.alpha_end = kv.get_double("stitch.alpha_end", cfg.stitch.alpha_end);
  const std::string sampling = kv.get_string("stitch.sampling", "priority");
  if (sampling == "priority") cfg.stitch.sampling = SamplingMode::Priority;
  else if (sampling == "uniform") cfg.stitch.sampling = SamplingMode::Uniform;
  else throw ConfigError("stitch.sampling: unknown mode '" + sampling + "'");
  const std::string strategy = kv.get_string("stitch.strategy", "low_to_high");
  if (strategy == "low_to_high") cfg.stitch.strategy = StitchStrategy::LowToHigh;
  else if (strategy == "high_to_low") cfg.stitch.strategy = StitchStrategy::HighToLow;
  else if (strategy == "random") cfg.stitch.strategy = StitchStrategy::Random;
  else throw ConfigError("stitch.strategy: unknown strategy '" + strategy + "'");
  cfg.stitch.max_attempts_per_stitch =
      kv.get_int("stitch.max_attempts", cfg.stitch.max_attempts_per_stitch);
  cfg.stitch.min_margin = kv.get_int("stitch.min_margin", cfg.stitch.min_margin);

  cfg.bridge.sigma = kv.get_double("bridge.sigma", cfg.bridge.sigma);
  cfg.bridge.eps_stab = kv.get_double("bridge.eps_stab", cfg.bridge.eps_stab);
  cfg.bridge.batch = kv.get_int("bridge.batch", cfg.bridge.batch);
  cfg.bridge.train_iters = kv.get_int("bridge.iters", cfg.bridge.train_iters);
  cfg.bridge.lr = kv.get_double("bridge.lr", cfg.bridge.lr);
  cfg.bridge.k_max = kv.get_int("bridge.k_max", cfg.bridge.k_max);
  cfg.bridge.step_scale = kv.get_double("bridge.step_scale", cfg.bridge.step_scale);
  cfg.n_bridge_pairs = kv.get_int("bridge.pairs", cfg.n_bridge_pairs);

  cfg.dyn.epochs = kv.get_int("dyn.epochs", cfg.dyn.epochs);
  cfg.dyn.lr = kv.get_double("dyn.lr", cfg.dyn.lr);
  cfg.dyn.batch = kv.get_int("dyn.batch", cfg.dyn.batch);

  cfg.rl.batch = kv.get_int("rl.batch", cfg.rl.batch);
  cfg.rl.lr = kv.get_double("rl.lr", cfg.rl.lr);
  cfg.rl.train_steps = kv.get_int("rl.steps", static_cast<int>(cfg.rl.train_steps));
  cfg.rl.gamma = kv.get_double("rl.gamma", cfg.rl.gamma);
  cfg.rl.beta = kv.get_double("rl.beta", cfg.rl.beta);
  cfg.rl.target_sync = kv.get_int("rl.target_sync", static_cast<int>(cfg.rl.target_sync));
  cfg.rl.eval_episodes = kv.get_int("rl.eval_episodes", cfg.rl.eval_episodes);
  if (kv.has("rl.hidden")) {
    cfg.rl.hidden.clear();
    for (auto h : kv.get_u64_list("rl.hidden", {})) cfg.rl.hidden.push_back(static_cast<int>(h));
  }

  cfg.ope_train_steps = kv.get_int("ope.steps", static_cast<int>(cfg.ope_train_steps));

  cfg.env_seeds = kv.get_u64_list("run.env_seeds", cfg.env_seeds);
  cfg.rl_seeds = kv.get_u64_list("run.rl_seeds", cfg.rl_seeds);
  if (kv.has("run.variants")) {
    cfg.variants.clear();
    std::istringstream ss(kv.get_string("run.variants", ""));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto b = item.find_first_not_of(" \t");
      const auto e = item.find_last_not_of(" \t");
      if (b != std::string::npos) cfg.variants.push_back(item.substr(b, e - b + 1));
    }
  }
  cfg.out_dir = kv.get_string("run.out", cfg.out_dir);
  cfg.threads = kv.get_int("run.threads", cfg.threads);
  cfg.validate();
  return cfg;
}

RunConfig run_config_from_file(const std::string& path) {
  return run_config_from_string(read_text(path));
}

Arm resolve_arm(const std::string& name, const RunConfig& cfg) {
  Arm arm;
  arm.name = name;
  arm.stitch = cfg.stitch;
  if (name == "backbone") {
    arm.mode = AugmentMode::None;
  } else if (name == "stitch") {
    arm.mode = AugmentMode::Direct;
  } else if (name == "stitch_sb") {
    arm.mode = AugmentMode::Bridged;
  } else if (name == "stitch_q75") {
    arm.mode = AugmentMode::Direct;
    arm.stitch.q = 75.0;
  } else if (name == "stitch_high_to_low") {
    arm.mode = AugmentMode::Direct;
    arm.stitch.strategy = StitchStrategy::HighToLow;
  } else if (name == "stitch_random") {
    arm.mode = AugmentMode::Direct;
    arm.stitch.strategy = StitchStrategy::Random;
  } else if (name == "stitch_uniform") {
    arm.mode = AugmentMode::Direct;
    arm.stitch.sampling = SamplingMode::Uniform;
  } else {
    throw ConfigError("unknown variant '" + name + "'");
  }
  return arm;
}

std::string metrics_csv_header() {
  return "run_id,variant,method,dataset_variant,env_seed,rl_seed,env_hash,config_hash,"
         "mean_return,std_return,wis,dr,train_steps,beta,gamma,produced,sb_count";
}

std::string metrics_csv_row(const MetricsRow& r) {
  std::ostringstream os;
  os << r.run_id << ',' << r.variant << ',' << r.method << ',' << r.dataset_variant << ','
     << r.env_seed << ',' << r.rl_seed << ',' << r.env_hash << ',' << r.config_hash << ','
     << fmt(r.mean_return) << ',' << fmt(r.std_return) << ',' << fmt(r.wis) << ',' << fmt(r.dr)
     << ',' << r.train_steps << ',' << fmt(r.beta) << ',' << fmt(r.gamma) << ',' << r.produced
     << ',' << r.sb_count;
  return os.str();
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("read_metrics_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty metrics file");
  if (line != metrics_csv_header())
    throw ParseError(path + ": unexpected metrics header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 17) throw ParseError(path + ": bad metrics row '" + line + "'");
    MetricsRow r;
    r.run_id = f[0];
    r.variant = f[1];
    r.method = f[2];
    r.dataset_variant = f[3];
    r.env_seed = std::stoull(f[4]);
    r.rl_seed = std::stoull(f[5]);
    r.env_hash = f[6];
    r.config_hash = f[7];
    r.mean_return = std::stod(f[8]);
    r.std_return = std::stod(f[9]);
    r.wis = std::stod(f[10]);
    r.dr = std::stod(f[11]);
    r.train_steps = std::stol(f[12]);
    r.beta = std::stod(f[13]);
    r.gamma = std::stod(f[14]);
    r.produced = std::stoi(f[15]);
    r.sb_count = std::stoi(f[16]);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

struct EnvPaths {
  std::string dir;
  std::string env_json;
  std::string dataset;
  std::string bridge_ckpt;
  std::string bridge_trace;
  std::string inverse_ckpt;
  std::string reward_ckpt;
};

EnvPaths env_paths(const RunConfig& cfg, std::uint64_t env_seed) {
  EnvPaths p;
  p.dir = cfg.out_dir + "/env" + std::to_string(env_seed);
  p.env_json = p.dir + "/env.json";
  p.dataset = p.dir + "/dataset.jsonl";
  p.bridge_ckpt = p.dir + "/bridge.json";
  p.bridge_trace = p.dir + "/bridge_trace.csv";
  p.inverse_ckpt = p.dir + "/inverse.json";
  p.reward_ckpt = p.dir + "/reward.json";
  return p;
}

std::string arm_dir(const RunConfig& cfg, std::uint64_t env_seed, const std::string& arm) {
  return cfg.out_dir + "/env" + std::to_string(env_seed) + "/" + arm;
}

// Builds env + dataset (+ bridge assets when needed) for one environment.
void prepare_env(const RunConfig& cfg, std::uint64_t env_seed, bool needs_sb,
                 const std::string& hash) {
  const EnvPaths p = env_paths(cfg, env_seed);
  fs::create_directories(p.dir);

  EnvSpec spec = cfg.env;
  spec.seed = env_seed;

  run_stage("make-env", p.env_json, [&] {
    if (artifact_fresh(p.env_json, hash)) return;
    const EnvInstance env = sample_env(spec);
    save_env(p.env_json, env);
    write_meta(p.env_json, hash);
  });

  run_stage("collect", p.dataset, [&] {
    if (artifact_fresh(p.dataset, hash)) return;
    const EnvInstance env = load_env(p.env_json);
    const Dataset ds = collect_dataset(env, cfg.behavior_epsilon, cfg.n_episodes, cfg.stitch.gamma,
                                       derive_seed(env_seed, kCollectTag));
    save_dataset(p.dataset, ds);
    write_meta(p.dataset, hash);
  });

  if (!needs_sb) return;

  run_stage("train-bridge", p.bridge_ckpt, [&] {
    if (artifact_fresh(p.bridge_ckpt, hash)) return;
    const Dataset ds = load_dataset(p.dataset);
    Rng rng(derive_seed(env_seed, kBridgeTag));
    const auto pairs = make_training_pairs(ds, cfg.n_bridge_pairs, cfg.bridge, rng);
    const TrainedBridge tb = train_bridge(pairs, ds.n_symptoms, cfg.bridge, rng);
    save_mlp(p.bridge_ckpt, tb.net.net, env_seed);
    save_bridge_trace_csv(p.bridge_trace, tb.trace);
    write_meta(p.bridge_ckpt, hash);
  });

  run_stage("train-models", p.inverse_ckpt, [&] {
    if (artifact_fresh(p.inverse_ckpt, hash)) return;
    const Dataset ds = load_dataset(p.dataset);
    Rng rng(derive_seed(env_seed, kDynTag));
    const TrainedDynamics dyn = train_models(ds, cfg.dyn, rng);
    save_inverse_model(p.inverse_ckpt, dyn.inverse, env_seed);
    save_reward_model(p.reward_ckpt, dyn.reward, env_seed);
    nlohmann::json j{{"action_accuracy", dyn.metrics.action_accuracy},
                     {"reward_rmse", dyn.metrics.reward_rmse},
                     {"train_transitions", dyn.metrics.train_transitions},
                     {"holdout_transitions", dyn.metrics.holdout_transitions}};
    write_json_artifact(p.dir + "/dyn_metrics.json", j.dump(), hash);
    write_meta(p.inverse_ckpt, hash);
  });
}

struct ArmArtifacts {
  std::string dataset_path;  // what the RL stage trains on
  int produced = 0;
  int sb_count = 0;
};

ArmArtifacts prepare_arm(const RunConfig& cfg, std::uint64_t env_seed, const Arm& arm,
                         const std::string& hash) {
  const EnvPaths p = env_paths(cfg, env_seed);
  ArmArtifacts out;
  if (arm.mode == AugmentMode::None) {
    out.dataset_path = p.dataset;
    return out;
  }
  const std::string dir = arm_dir(cfg, env_seed, arm.name);
  fs::create_directories(dir);
  const std::string aug_path = dir + "/augmented.jsonl";
  const std::string report_path =
      dir + (arm.mode == AugmentMode::Direct ? "/stitch_report.json" : "/sb_report.json");
  out.dataset_path = aug_path;

  run_stage(arm.mode == AugmentMode::Direct ? "stitch" : "augment-sb", aug_path, [&] {
    if (artifact_fresh(aug_path, hash) && artifact_fresh(report_path, hash)) return;
    const Dataset ds = load_dataset(p.dataset);
    Rng rng(derive_seed(env_seed ^ fnv1a(arm.name), kAugmentTag));
    if (arm.mode == AugmentMode::Direct) {
      AugmentResult res = augment(ds, arm.stitch, rng);
      save_dataset(aug_path, res.dataset);
      write_json_artifact(report_path, res.report.to_json(), hash);
    } else {
      const EnvInstance env = load_env(p.env_json);
      BridgeNet bn{load_mlp(p.bridge_ckpt), ds.n_symptoms};
      const InverseDynModel inv = load_inverse_model(p.inverse_ckpt, ds.n_symptoms,
                                                     ds.n_treatments);
      const RewardModel rew = load_reward_model(p.reward_ckpt, ds.n_symptoms, ds.n_treatments);
      SbAugmentResult res = sb_augment(ds, arm.stitch, bn, cfg.bridge, inv, rew, rng);
      save_dataset(aug_path, res.dataset);
      write_json_artifact(report_path, res.report.to_json(), hash);
    }
    write_meta(aug_path, hash);
  });

  // Validity scan of the augmented dataset (the verify stage).
  const std::string validity_path = dir + "/validity.json";
  run_stage("verify", validity_path, [&] {
    if (artifact_fresh(validity_path, hash)) return;
    const Dataset original = load_dataset(p.dataset);
    const Dataset augmented = load_dataset(aug_path);
    const LipschitzEstimate lip = estimate_lipschitz(original);
    const ValidityReport rep = check_theorem1(augmented, original, arm.stitch.delta, lip.value);
    write_json_artifact(validity_path, rep.to_json(), hash);
    write_text(dir + "/validity.txt", rep.to_table());
    write_meta(validity_path, hash);
  });

  // Pull augmentation volume out of the report for the metrics rows.
  const nlohmann::json rep = nlohmann::json::parse(read_text(report_path));
  if (arm.mode == AugmentMode::Direct) {
    out.produced = rep.value("produced", 0);
  } else {
    out.produced = rep.value("direct_count", 0) + rep.value("sb_count", 0);
    out.sb_count = rep.value("sb_count", 0);
  }
  return out;
}

struct Unit {
  std::uint64_t env_seed = 0;
  std::uint64_t rl_seed = 0;
  int arm_index = 0;
};

void run_unit(const RunConfig& cfg, const Arm& arm, const ArmArtifacts& art, std::uint64_t env_seed,
              std::uint64_t rl_seed, bool with_baselines, const std::string& hash) {
  const EnvPaths p = env_paths(cfg, env_seed);
  const std::string dir = arm_dir(cfg, env_seed, arm.name) + "/seed" + std::to_string(rl_seed);
  fs::create_directories(dir);
  const std::string metrics_path = dir + "/metrics.csv";
  if (artifact_fresh(metrics_path, hash)) return;

  const EnvInstance env = load_env(p.env_json);
  const Dataset train_ds = load_dataset(art.dataset_path);
  const Dataset real_ds = load_dataset(p.dataset);
  const auto behavior_probs = logged_behavior_probs(real_ds, env, cfg.behavior_epsilon);
  const std::uint64_t eval_seed = derive_seed(env_seed, kEvalTag);
  const std::string hash_prefix = "env" + std::to_string(env_seed) + "/" + arm.name + "/seed" +
                                  std::to_string(rl_seed);

  std::vector<MetricsRow> rows;
  auto add_row = [&](const std::string& method, const PolicyFn& policy, long steps, double beta) {
    run_stage("eval", metrics_path, [&] {
      const EvalResult ev = evaluate_policy(env, policy, cfg.rl.eval_episodes, eval_seed);
      MetricsRow r;
      r.run_id = hash_prefix + "/" + method;
      r.variant = arm.name;
      r.method = method;
      r.dataset_variant = cfg.label;
      r.env_seed = env_seed;
      r.rl_seed = rl_seed;
      r.env_hash = env.hash;
      r.config_hash = hash;
      r.mean_return = ev.mean_return;
      r.std_return = ev.std_return;
      r.train_steps = steps;
      r.beta = beta;
      r.gamma = cfg.rl.gamma;
      r.produced = art.produced;
      r.sb_count = art.sb_count;
      run_stage("ope", metrics_path, [&] {
        const WisResult wis = wis_estimate(real_ds, policy, behavior_probs, cfg.stitch.gamma);
        r.wis = wis.estimate;
        RlConfig ope_cfg = cfg.rl;
        ope_cfg.train_steps = cfg.ope_train_steps;
        Rng ope_rng(derive_seed(env_seed ^ rl_seed ^ fnv1a(arm.name + method), kOpeTag));
        r.dr = dr_estimate(real_ds, policy, behavior_probs, cfg.stitch.gamma, ope_cfg, ope_rng);
      });
      rows.push_back(std::move(r));
    });
  };

  // CQL on the (possibly augmented) dataset.
  run_stage("train-rl", dir + "/qnet.json", [&] {
    Rng rng(derive_seed(env_seed ^ rl_seed ^ fnv1a(arm.name), kTrainTag));
    TrainedQ tq = train_cql(train_ds, cfg.rl, rng);
    save_qnet(dir + "/qnet.json", tq.q, rl_seed);
    write_meta(dir + "/qnet.json", hash);
    add_row("cql", greedy_policy(tq.q), cfg.rl.train_steps, cfg.rl.beta);
  });

  if (with_baselines) {
    run_stage("train-rl", dir + "/dqn.json", [&] {
      Rng rng(derive_seed(env_seed ^ rl_seed ^ fnv1a(arm.name + "dqn"), kTrainTag));
      TrainedQ tq = train_fitted_q(train_ds, cfg.rl, rng);
      save_qnet(dir + "/dqn.json", tq.q, rl_seed);
      write_meta(dir + "/dqn.json", hash);
      add_row("dqn", greedy_policy(tq.q), cfg.rl.train_steps, 0.0);
    });
    run_stage("train-rl", dir + "/bc.json", [&] {
      Rng rng(derive_seed(env_seed ^ rl_seed ^ fnv1a(arm.name + "bc"), kTrainTag));
      RlConfig bc_cfg = cfg.rl;
      bc_cfg.lr = std::max(cfg.rl.lr, 1e-4);  // BC tolerates a faster rate
      BcPolicy pi = train_bc(train_ds, bc_cfg, rng);
      save_mlp(dir + "/bc.json", pi.net, rl_seed);
      write_meta(dir + "/bc.json", hash);
      add_row("bc", greedy_policy(pi), cfg.rl.train_steps, 0.0);
    });
    add_row("random", random_policy(env.spec.n_treatments), 0, 0.0);
  }

  std::ostringstream csv;
  csv << metrics_csv_header() << "\n";
  for (const MetricsRow& r : rows) csv << metrics_csv_row(r) << "\n";
  write_text(metrics_path, csv.str());
  write_meta(metrics_path, hash);
}

}  // namespace

void run_pipeline(const RunConfig& cfg) {
  cfg.validate();
  const std::string hash = cfg.config_hash();
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir + "/config_hash.txt", hash + "\n");

  std::vector<Arm> arms;
  for (const std::string& name : cfg.variants) arms.push_back(resolve_arm(name, cfg));
  const bool needs_sb =
      std::any_of(arms.begin(), arms.end(), [](const Arm& a) { return a.mode == AugmentMode::Bridged; });

  // Phase 1: per-environment shared artifacts, parallel over environments.
  parallel_for(static_cast<int>(cfg.env_seeds.size()), cfg.threads, [&](int i) {
    prepare_env(cfg, cfg.env_seeds[i], needs_sb, hash);
  });

  // Phase 2: per-arm augmented datasets (sequential per env, cheap).
  std::vector<std::vector<ArmArtifacts>> artifacts(cfg.env_seeds.size(),
                                                   std::vector<ArmArtifacts>(arms.size()));
  parallel_for(static_cast<int>(cfg.env_seeds.size()), cfg.threads, [&](int i) {
    for (std::size_t a = 0; a < arms.size(); ++a)
      artifacts[i][a] = prepare_arm(cfg, cfg.env_seeds[i], arms[a], hash);
  });

  // Phase 3: training/eval units, parallel over the flat unit list.
  std::vector<Unit> units;
  for (std::size_t e = 0; e < cfg.env_seeds.size(); ++e)
    for (std::size_t a = 0; a < arms.size(); ++a)
      for (std::uint64_t rs : cfg.rl_seeds) units.push_back({cfg.env_seeds[e], rs, static_cast<int>(a)});
  parallel_for(static_cast<int>(units.size()), cfg.threads, [&](int i) {
    const Unit& u = units[i];
    std::size_t e = 0;
    while (cfg.env_seeds[e] != u.env_seed) ++e;
    const Arm& arm = arms[u.arm_index];
    // Baselines ride along with the backbone arm on the first RL seed.
    const bool with_baselines =
        arm.mode == AugmentMode::None && u.rl_seed == cfg.rl_seeds.front();
    run_unit(cfg, arm, artifacts[e][u.arm_index], u.env_seed, u.rl_seed, with_baselines, hash);
  });

  write_report(cfg.out_dir);
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

namespace {

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;
  long n = 0;
};

Aggregate aggregate(const std::vector<double>& xs) {
  Aggregate a;
  a.n = static_cast<long>(xs.size());
  if (xs.empty()) return a;
  for (double x : xs) a.mean += x;
  a.mean /= static_cast<double>(xs.size());
  for (double x : xs) a.stddev += (x - a.mean) * (x - a.mean);
  a.stddev = std::sqrt(a.stddev / static_cast<double>(xs.size()));
  return a;
}

std::string svg_bar_chart(const std::vector<std::pair<std::string, double>>& bars) {
  constexpr int width = 640, height = 360, margin = 60;
  double lo = 0.0, hi = 1.0;
  for (const auto& [name, v] : bars) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) hi = lo + 1.0;
  const double plot_w = width - 2 * margin;
  const double plot_h = height - 2 * margin;
  const double bar_w = plot_w / std::max<std::size_t>(1, bars.size());
  auto y_of = [&](double v) { return margin + plot_h * (1.0 - (v - lo) / (hi - lo)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << y_of(0.0) << "\" x2=\"" << width - margin
     << "\" y2=\"" << y_of(0.0) << "\" stroke=\"black\"/>\n";
  int i = 0;
  for (const auto& [name, v] : bars) {
    const double x = margin + i * bar_w + bar_w * 0.15;
    const double y_top = std::min(y_of(v), y_of(0.0));
    const double h = std::abs(y_of(v) - y_of(0.0));
    os << "<rect x=\"" << x << "\" y=\"" << y_top << "\" width=\"" << bar_w * 0.7 << "\" height=\""
       << h << "\" fill=\"#4878a8\"/>\n";
    os << "<text x=\"" << x + bar_w * 0.35 << "\" y=\"" << height - margin / 2.5
       << "\" font-size=\"12\" text-anchor=\"middle\">" << name << "</text>\n";
    os << "<text x=\"" << x + bar_w * 0.35 << "\" y=\"" << y_top - 4
       << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt(std::round(v * 100.0) / 100.0)
       << "</text>\n";
    ++i;
  }
  os << "<text x=\"" << margin << "\" y=\"" << margin / 2
     << "\" font-size=\"13\">mean evaluation return per variant (cql)</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace

void write_report(const std::string& dir) {
  // Gather per-run metrics in sorted path order for determinism.
  std::vector<std::string> metric_files;
  std::vector<std::string> sb_reports;
  if (!fs::exists(dir)) throw UsageError("write_report: no such directory " + dir);
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name == "metrics.csv") metric_files.push_back(entry.path().string());
    if (name == "sb_report.json") sb_reports.push_back(entry.path().string());
  }
  std::sort(metric_files.begin(), metric_files.end());
  std::sort(sb_reports.begin(), sb_reports.end());
  if (metric_files.empty())
    throw UsageError("write_report: incomplete run, missing artifacts: no metrics.csv under " +
                     dir);

  std::vector<MetricsRow> rows;
  for (const std::string& f : metric_files)
    for (MetricsRow& r : read_metrics_csv(f)) rows.push_back(std::move(r));

  // Same environment label must mean the same environment.
  std::map<std::uint64_t, std::string> env_hashes;
  for (const MetricsRow& r : rows) {
    auto it = env_hashes.find(r.env_seed);
    if (it == env_hashes.end()) env_hashes[r.env_seed] = r.env_hash;
    else if (it->second != r.env_hash)
      throw UsageError("write_report: env seed " + std::to_string(r.env_seed) +
                       " appears with mismatched env hashes; refusing to aggregate");
  }

  // summary.csv: variant x method aggregates over all envs and seeds.
  std::map<std::pair<std::string, std::string>, std::vector<double>> returns, wis, drs;
  for (const MetricsRow& r : rows) {
    const auto key = std::make_pair(r.variant, r.method);
    returns[key].push_back(r.mean_return);
    wis[key].push_back(r.wis);
    drs[key].push_back(r.dr);
  }
  {
    std::ostringstream os;
    os << "variant,method,n_runs,mean_return,std_return,mean_wis,mean_dr\n";
    for (const auto& [key, vals] : returns) {
      const Aggregate agg = aggregate(vals);
      os << key.first << ',' << key.second << ',' << agg.n << ',' << fmt(agg.mean) << ','
         << fmt(agg.stddev) << ',' << fmt(aggregate(wis[key]).mean) << ','
         << fmt(aggregate(drs[key]).mean) << "\n";
    }
    write_text(dir + "/summary.csv", os.str());
  }

  // comparison.csv: per-environment cql returns side by side per variant.
  {
    std::set<std::string> variants;
    std::set<std::uint64_t> envs;
    std::map<std::pair<std::uint64_t, std::string>, std::vector<double>> cell;
    for (const MetricsRow& r : rows) {
      if (r.method != "cql") continue;
      variants.insert(r.variant);
      envs.insert(r.env_seed);
      cell[{r.env_seed, r.variant}].push_back(r.mean_return);
    }
    std::ostringstream os;
    os << "env_seed";
    for (const std::string& v : variants) os << ',' << v;
    os << "\n";
    for (std::uint64_t e : envs) {
      os << e;
      for (const std::string& v : variants) {
        auto it = cell.find({e, v});
        os << ',' << (it == cell.end() ? "" : fmt(aggregate(it->second).mean));
      }
      os << "\n";
    }
    write_text(dir + "/comparison.csv", os.str());
  }

  // k_histogram.csv aggregated over all bridged augmentation reports.
  {
    std::map<int, long> hist;
    for (const std::string& f : sb_reports) {
      const nlohmann::json j = nlohmann::json::parse(read_text(f));
      if (!j.contains("k_histogram")) continue;
      const auto& h = j.at("k_histogram");
      for (std::size_t k = 0; k < h.size(); ++k) {
        const long c = h.at(k).get<long>();
        if (c > 0) hist[static_cast<int>(k)] += c;
      }
    }
    std::ostringstream os;
    os << "k,count\n";
    for (const auto& [k, c] : hist) os << k << ',' << c << "\n";
    write_text(dir + "/k_histogram.csv", os.str());
  }

  // Text + SVG bar chart of cql returns per variant.
  {
    std::map<std::string, std::vector<double>> per_variant;
    for (const MetricsRow& r : rows)
      if (r.method == "cql") per_variant[r.variant].push_back(r.mean_return);
    std::vector<std::pair<std::string, double>> bars;
    double peak = 1.0;
    for (const auto& [v, vals] : per_variant) {
      bars.emplace_back(v, aggregate(vals).mean);
      peak = std::max(peak, std::abs(bars.back().second));
    }
    std::ostringstream os;
    os << "mean evaluation return per variant (cql)\n";
    for (const auto& [v, val] : bars) {
      const int n = static_cast<int>(std::round(std::abs(val) / peak * 48.0));
      os << "  " << v << std::string(std::max<std::size_t>(1, 20 - v.size()), ' ')
         << (val < 0 ? "-" : " ") << std::string(n, '#') << ' ' << fmt(val) << "\n";
    }
    write_text(dir + "/returns.txt", os.str());
    write_text(dir + "/returns.svg", svg_bar_chart(bars));
  }
}

}  // namespace stitchrl
