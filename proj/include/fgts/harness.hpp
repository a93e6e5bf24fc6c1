#pragma once

// Experiment configuration, execution and CSV output.
//
// Every run is keyed by (experiment hash, seed); the experiment hash is
// FNV-1a over the canonical config with seeds, parallelism and output path
// removed, so per-seed results do not depend on how many workers ran them.

#include "fgts/agent.hpp"
#include "fgts/core.hpp"
#include "fgts/diagnostics.hpp"
#include "fgts/envs.hpp"
#include "fgts/random.hpp"
#include "fgts/samplers.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fgts {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kExperimentSchema = "fgts.experiment/1";
inline constexpr const char* kSweepSchema = "fgts.sweep/1";
inline constexpr const char* kBenchSchema = "fgts.bench/1";
inline constexpr const char* kScalingSchema = "fgts.scaling/1";

/// 17 significant digits, enough to round-trip any double.
inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct EnvironmentSpec {
  std::string kind = "nchain";  // nchain | synthetic_linear | file
  Index n = 10;
  bool normalize_features = false;
  Index dim = 8;
  int horizon = 5;
  Index actions = 4;
  Index states = 20;
  std::uint64_t seed = 0;
  SyntheticMdpOptions synthetic{};
  std::string path;
};

struct ExperimentConfig {
  std::string name = "experiment";
  EnvironmentSpec environment{};
  AgentConfig agent{};
  std::optional<double> loss_weight;  // default 2 / (5 H^2)
  int episodes = 0;                   // one of episodes / env_steps
  std::uint64_t env_steps = 0;
  std::uint64_t eval_interval = 1000;
  std::vector<std::uint64_t> seeds{1};
  std::string output = "out";
  unsigned parallel = 1;
};

namespace detail {

/// Reads fields from a JSON object and records every problem instead of
/// stopping at the first one.
class Reader {
 public:
  Reader(const json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) fail("", "must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key) || j_.at(key).is_null()) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) return fail(key, "must be a boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) return fail(key, "must be a string");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) return fail(key, "must be an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
            return fail(key, "must be nonnegative");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) return fail(key, "must be a number");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      fail(key, e.what());
    }
  }

  template <class T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  const json* child(const char* key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void reject_unknown() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(it.key(), "unknown field");
  }

  void fail(const std::string& key, const std::string& msg) {
    errors_.push_back((key.empty() ? path_ : path_ + "." + key) + ": " + msg);
  }
  void check(bool ok, const std::string& key, const std::string& msg) {
    if (!ok) fail(key, msg);
  }
  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline void read_sampler(const json& j, SamplerConfig& s, std::vector<std::string>& errors, const std::string& path) {
  Reader r(j, path, errors);
  std::string kind(to_string(s.kind));
  r.get("kind", kind);
  try {
    s.kind = sampler_kind_from_string(kind);
  } catch (const ConfigError& e) {
    r.fail("kind", e.what());
  }
  r.get("step_size", s.step_size);
  r.get("inverse_temperature", s.inverse_temperature);
  r.get("friction", s.friction);
  r.get("noise", s.noise);
  r.get("bias_factor", s.bias.bias_factor);
  r.get("decay_mean", s.bias.decay_mean);
  r.get("decay_var", s.bias.decay_var);
  r.get("regularizer", s.bias.regularizer);
  r.reject_unknown();
  r.check(s.step_size > 0, "step_size", "must be positive");
  r.check(s.inverse_temperature > 0, "inverse_temperature", "must be positive");
  r.check(s.friction > 0, "friction", "must be positive");
  r.check(s.bias.bias_factor >= 0, "bias_factor", "must be nonnegative");
  r.check(s.bias.decay_mean >= 0 && s.bias.decay_mean < 1, "decay_mean", "must lie in [0, 1)");
  r.check(s.bias.decay_var >= 0 && s.bias.decay_var < 1, "decay_var", "must lie in [0, 1)");
  r.check(s.bias.regularizer > 0, "regularizer", "must be positive");
  if (s.kind == SamplerKind::ulmc_em || s.kind == SamplerKind::adaptive_ulmc)
    r.check(s.friction * s.step_size < 1, "friction", "friction * step_size must be < 1 for this sampler");
}

inline json write_sampler(const SamplerConfig& s) {
  return {{"kind", std::string(to_string(s.kind))},
          {"step_size", s.step_size},
          {"inverse_temperature", s.inverse_temperature},
          {"friction", s.friction},
          {"noise", s.noise},
          {"bias_factor", s.bias.bias_factor},
          {"decay_mean", s.bias.decay_mean},
          {"decay_var", s.bias.decay_var},
          {"regularizer", s.bias.regularizer}};
}

inline void read_environment(const json& j, EnvironmentSpec& e, std::vector<std::string>& errors) {
  Reader r(j, "environment", errors);
  r.get("kind", e.kind);
  if (e.kind == "nchain") {
    r.get("n", e.n);
    r.get("normalize_features", e.normalize_features);
    r.check(e.n > 3, "n", "must exceed 3");
  } else if (e.kind == "synthetic_linear") {
    r.get("dim", e.dim);
    r.get("horizon", e.horizon);
    r.get("actions", e.actions);
    r.get("states", e.states);
    r.get("seed", e.seed);
    r.get("anchor_concentration", e.synthetic.anchor_concentration);
    r.get("feature_concentration", e.synthetic.feature_concentration);
    r.get("reward_scale", e.synthetic.reward_scale);
    r.get("stationary", e.synthetic.stationary);
    r.check(e.dim >= 2, "dim", "must be >= 2");
    r.check(e.states >= e.dim, "states", "must be >= dim");
    r.check(e.horizon >= 1, "horizon", "must be >= 1");
    r.check(e.actions >= 1, "actions", "must be >= 1");
    r.check(e.synthetic.anchor_concentration > 0, "anchor_concentration", "must be positive");
    r.check(e.synthetic.feature_concentration > 0, "feature_concentration", "must be positive");
    r.check(e.synthetic.reward_scale > 0 && e.synthetic.reward_scale <= 1, "reward_scale", "must lie in (0, 1]");
  } else if (e.kind == "file") {
    r.get("path", e.path);
    r.check(!e.path.empty(), "path", "must name a model file");
  } else {
    r.fail("kind", "unknown environment kind '" + e.kind + "'");
  }
  r.reject_unknown();
}

inline json write_environment(const EnvironmentSpec& e) {
  json j{{"kind", e.kind}};
  if (e.kind == "nchain") {
    j["n"] = e.n;
    j["normalize_features"] = e.normalize_features;
  } else if (e.kind == "synthetic_linear") {
    j["dim"] = e.dim;
    j["horizon"] = e.horizon;
    j["actions"] = e.actions;
    j["states"] = e.states;
    j["seed"] = e.seed;
    j["anchor_concentration"] = e.synthetic.anchor_concentration;
    j["feature_concentration"] = e.synthetic.feature_concentration;
    j["reward_scale"] = e.synthetic.reward_scale;
    j["stationary"] = e.synthetic.stationary;
  } else {
    j["path"] = e.path;
  }
  return j;
}

inline void read_agent(const json& j, AgentConfig& a, std::optional<double>& loss_weight,
                       std::vector<std::string>& errors) {
  Reader r(j, "agent", errors);
  std::string kind(to_string(a.kind));
  r.get("kind", kind);
  try {
    a.kind = agent_kind_from_string(kind);
  } catch (const ConfigError& e) {
    r.fail("kind", e.what());
  }
  if (const json* s = r.child("sampler")) read_sampler(*s, a.sampler, errors, "agent.sampler");
  std::string schedule(to_string(a.schedule));
  r.get("schedule", schedule);
  try {
    a.schedule = schedule_preset_from_string(schedule);
  } catch (const ConfigError& e) {
    r.fail("schedule", e.what());
  }
  r.get("iterations", a.iterations);
  r.get("schedule_constant", a.schedule_constant);
  r.get("theory_tolerance", a.theory_tolerance);
  r.get("max_iterations", a.max_iterations);
  r.get_optional("loss_weight", loss_weight);
  r.get("feelgood_weight", a.weights.feelgood_weight);
  r.get_optional("prior_variance", a.prior_variance);
  r.get("warm_start", a.warm_start);
  r.get("truncation", a.truncation);
  r.get("ridge", a.ridge);
  r.get("ucb_bonus", a.ucb_bonus);
  r.get("epsilon", a.epsilon);
  r.get("clamp_divergence", a.clamp_divergence);
  r.reject_unknown();
  r.check(!loss_weight || *loss_weight > 0, "loss_weight", "must be positive");
  for (const auto& v : a.violations())
    if (v.find("loss_weight") == std::string::npos && v.find("sampler") == std::string::npos) errors.push_back(v);
}

inline json write_agent(const AgentConfig& a, const std::optional<double>& loss_weight) {
  return {{"kind", std::string(to_string(a.kind))},
          {"sampler", write_sampler(a.sampler)},
          {"schedule", std::string(to_string(a.schedule))},
          {"iterations", a.iterations},
          {"schedule_constant", a.schedule_constant},
          {"theory_tolerance", a.theory_tolerance},
          {"max_iterations", a.max_iterations},
          {"loss_weight", loss_weight ? json(*loss_weight) : json(nullptr)},
          {"feelgood_weight", a.weights.feelgood_weight},
          {"prior_variance", a.prior_variance ? json(*a.prior_variance) : json(nullptr)},
          {"warm_start", a.warm_start},
          {"truncation", a.truncation},
          {"ridge", a.ridge},
          {"ucb_bonus", a.ucb_bonus},
          {"epsilon", a.epsilon},
          {"clamp_divergence", a.clamp_divergence}};
}

inline std::string join_errors(const std::vector<std::string>& errors) {
  std::string msg = "invalid configuration (" + std::to_string(errors.size()) + " problem" +
                    (errors.size() == 1 ? "" : "s") + "):";
  for (const auto& e : errors) msg += "\n  - " + e;
  return msg;
}

inline void check_schema(const json& j, const char* expected, std::vector<std::string>& errors) {
  if (!j.is_object() || !j.contains("schema") || !j.at("schema").is_string())
    errors.push_back(std::string("schema: missing; expected \"") + expected + "\"");
  else if (j.at("schema").get<std::string>() != expected)
    errors.push_back("schema: \"" + j.at("schema").get<std::string>() + "\" is not supported; expected \"" +
                     expected + "\"");
}

}  // namespace detail

/// Parses and validates; throws ConfigError listing every violated constraint.
inline ExperimentConfig parse_experiment(const json& j) {
  std::vector<std::string> errors;
  ExperimentConfig c;
  detail::check_schema(j, kExperimentSchema, errors);
  detail::Reader r(j, "experiment", errors);
  std::string schema;
  r.get("schema", schema);
  r.get("name", c.name);
  if (const json* e = r.child("environment"))
    detail::read_environment(*e, c.environment, errors);
  else
    r.fail("environment", "missing");
  if (const json* a = r.child("agent"))
    detail::read_agent(*a, c.agent, c.loss_weight, errors);
  else
    r.fail("agent", "missing");
  r.get("episodes", c.episodes);
  r.get("env_steps", c.env_steps);
  r.get("eval_interval", c.eval_interval);
  r.get("seeds", c.seeds);
  r.get("output", c.output);
  r.get("parallel", c.parallel);
  r.reject_unknown();
  r.check((c.episodes >= 1) != (c.env_steps >= 1), "episodes", "exactly one of episodes / env_steps must be positive");
  r.check(c.episodes >= 0, "episodes", "must be nonnegative");
  r.check(!c.seeds.empty(), "seeds", "must be nonempty");
  r.check(std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() == c.seeds.size(), "seeds",
          "must not repeat");
  r.check(c.parallel >= 1, "parallel", "must be >= 1");
  if (!errors.empty()) throw ConfigError(detail::join_errors(errors));
  return c;
}

inline ExperimentConfig parse_experiment_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_experiment(j);
}

inline json serialize_experiment(const ExperimentConfig& c) {
  return {{"schema", kExperimentSchema},
          {"name", c.name},
          {"environment", detail::write_environment(c.environment)},
          {"agent", detail::write_agent(c.agent, c.loss_weight)},
          {"episodes", c.episodes},
          {"env_steps", c.env_steps},
          {"eval_interval", c.eval_interval},
          {"seeds", c.seeds},
          {"output", c.output},
          {"parallel", c.parallel}};
}

/// Hash of everything that influences per-seed results.
inline std::uint64_t experiment_hash(const ExperimentConfig& c) {
  json j = serialize_experiment(c);
  j.erase("seeds");
  j.erase("parallel");
  j.erase("output");
  j.erase("name");
  return fnv1a64(j.dump());
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

inline EpisodicModel build_environment(const EnvironmentSpec& e, const fs::path& base_dir = {}) {
  if (e.kind == "nchain") return nchain_model(e.n, e.normalize_features);
  if (e.kind == "synthetic_linear")
    return synthetic_linear_mdp(e.dim, e.horizon, e.actions, e.states, e.seed, e.synthetic).model;
  if (e.kind == "file") {
    fs::path p = e.path;
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    return load_model(read_file(p));
  }
  throw ConfigError("unknown environment kind '" + e.kind + "'");
}

/// Fills defaults that depend on the environment (loss weight).
inline AgentConfig resolve_agent(const ExperimentConfig& c, const EpisodicModel& m) {
  AgentConfig a = c.agent;
  a.weights.loss_weight = c.loss_weight.value_or(FGTSWeights::standard(m.horizon).loss_weight);
  return a;
}

inline int resolve_episodes(const ExperimentConfig& c, const EpisodicModel& m) {
  return c.episodes > 0 ? c.episodes : episodes_for_steps(m, c.env_steps);
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Runs task(i) for i in [0, n) on `workers` threads; rethrows the first
/// failure (by task index) after all workers stop.
inline void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& task) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  std::vector<std::exception_ptr> errors(n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            task(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Run
// ---------------------------------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  RunResult run;
};

inline std::string per_seed_csv(const RunResult& r) {
  std::string s = "episode,return,regret,cum_regret,grad_evals\n";
  for (const auto& rec : r.records)
    s += std::to_string(rec.episode) + "," + fmt_double(rec.episode_return) + "," + fmt_double(rec.regret) + "," +
         fmt_double(rec.cumulative_regret) + "," + std::to_string(rec.grad_evals) + "\n";
  return s;
}

inline std::string per_seed_eval_csv(const RunResult& r) {
  std::string s = "env_steps,episode,eval_return\n";
  for (const auto& e : r.evaluations)
    s += std::to_string(e.env_steps) + "," + std::to_string(e.episode) + "," + fmt_double(e.value) + "\n";
  return s;
}

struct MeanCI {
  double mean = 0, lo = 0, hi = 0;
};

/// Normal-approximation 95% interval over seeds.
inline MeanCI mean_ci95(const std::vector<double>& v) {
  MeanCI c;
  if (v.empty()) return c;
  const double n = static_cast<double>(v.size());
  for (double x : v) c.mean += x;
  c.mean /= n;
  double ss = 0;
  for (double x : v) ss += (x - c.mean) * (x - c.mean);
  const double half = v.size() > 1 ? 1.959963984540054 * std::sqrt(ss / (n - 1.0) / n) : 0.0;
  c.lo = c.mean - half;
  c.hi = c.mean + half;
  return c;
}

inline std::string aggregate_csv(const std::vector<SeedResult>& results) {
  std::string s = "episode,mean_return,ci_lo,ci_hi,mean_regret,mean_cum_regret,cum_regret_ci_lo,cum_regret_ci_hi\n";
  if (results.empty()) return s;
  const std::size_t K = results.front().run.records.size();
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> ret, reg, cum;
    for (const auto& r : results) {
      ret.push_back(r.run.records[k].episode_return);
      reg.push_back(r.run.records[k].regret);
      cum.push_back(r.run.records[k].cumulative_regret);
    }
    const auto a = mean_ci95(ret), b = mean_ci95(reg), c = mean_ci95(cum);
    s += std::to_string(k + 1) + "," + fmt_double(a.mean) + "," + fmt_double(a.lo) + "," + fmt_double(a.hi) + "," +
         fmt_double(b.mean) + "," + fmt_double(c.mean) + "," + fmt_double(c.lo) + "," + fmt_double(c.hi) + "\n";
  }
  return s;
}

inline std::string aggregate_eval_csv(const std::vector<SeedResult>& results) {
  std::string s = "env_steps,mean_eval_return,ci_lo,ci_hi\n";
  if (results.empty()) return s;
  const std::size_t E = results.front().run.evaluations.size();
  for (std::size_t i = 0; i < E; ++i) {
    std::vector<double> v;
    for (const auto& r : results) v.push_back(r.run.evaluations[i].value);
    const auto c = mean_ci95(v);
    s += std::to_string(results.front().run.evaluations[i].env_steps) + "," + fmt_double(c.mean) + "," +
         fmt_double(c.lo) + "," + fmt_double(c.hi) + "\n";
  }
  return s;
}

/// Mean cumulative regret over seeds, per episode.
inline std::vector<double> mean_cumulative_regret(const std::vector<SeedResult>& results) {
  std::vector<double> out;
  if (results.empty()) return out;
  const std::size_t K = results.front().run.records.size();
  out.assign(K, 0.0);
  for (const auto& r : results)
    for (std::size_t k = 0; k < K; ++k) out[k] += r.run.records[k].cumulative_regret;
  for (double& x : out) x /= static_cast<double>(results.size());
  return out;
}

struct RunSummary {
  fs::path output;
  std::vector<SeedResult> seeds;
  double final_eval_mean = 0.0;  // mean over seeds of the last-10 evaluation mean
  MeanCI final_eval_ci{};
  double regret_exponent = std::nan("");
};

inline RunResult run_seed(const ExperimentConfig& c, const EpisodicModel& m, std::uint64_t seed) {
  const std::uint64_t key = stream_key({experiment_hash(c), seed});
  return run_agent(m, resolve_agent(c, m), key, resolve_episodes(c, m), c.eval_interval);
}

inline std::string seed_file(std::uint64_t seed, const char* suffix = "") {
  return "seed_" + std::to_string(seed) + suffix + ".csv";
}

/// Writes per-seed files, aggregates and summary.json into `out`.
inline RunSummary write_run_outputs(const ExperimentConfig& c, std::vector<SeedResult> results, const fs::path& out) {
  RunSummary s;
  s.output = out;
  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });
  std::vector<double> finals;
  json per_seed = json::array();
  json events = json::array();
  for (const auto& r : results) {
    write_file(out / seed_file(r.seed), per_seed_csv(r.run));
    write_file(out / seed_file(r.seed, "_eval"), per_seed_eval_csv(r.run));
    finals.push_back(r.run.final_evaluation_mean(10));
    std::uint64_t evals = 0;
    for (const auto& rec : r.run.records) evals += rec.grad_evals;
    per_seed.push_back({{"seed", r.seed},
                        {"final_eval_mean", finals.back()},
                        {"cum_regret", r.run.records.empty() ? 0.0 : r.run.records.back().cumulative_regret},
                        {"grad_evals", evals}});
    for (const auto& e : r.run.events) events.push_back("seed " + std::to_string(r.seed) + ": " + e);
  }
  write_file(out / "aggregate.csv", aggregate_csv(results));
  write_file(out / "aggregate_eval.csv", aggregate_eval_csv(results));

  s.final_eval_ci = mean_ci95(finals);
  s.final_eval_mean = s.final_eval_ci.mean;
  const auto curve = mean_cumulative_regret(results);
  if (curve.size() >= 4) {
    try {
      s.regret_exponent = sqrt_t_fit(curve);
    } catch (const ConfigError&) {
    }
  }
  json summary{{"name", c.name},
               {"experiment_hash", experiment_hash(c)},
               {"seeds", per_seed},
               {"final_eval_mean", s.final_eval_mean},
               {"final_eval_ci", {s.final_eval_ci.lo, s.final_eval_ci.hi}},
               {"regret_exponent", std::isnan(s.regret_exponent) ? json(nullptr) : json(s.regret_exponent)},
               {"events", events}};
  write_file(out / "summary.json", summary.dump(2) + "\n");
  s.seeds = std::move(results);
  return s;
}

/// Runs every seed of `c` into c.output. A `_INCOMPLETE` marker exists
/// until all outputs are written.
inline RunSummary cmd_run(const ExperimentConfig& c, const fs::path& base_dir = {}) {
  const EpisodicModel model = build_environment(c.environment, base_dir);
  const fs::path out = c.output;
  fs::create_directories(out);
  const fs::path marker = out / "_INCOMPLETE";
  write_file(marker, "run in progress\n");
  write_file(out / "config.json", serialize_experiment(c).dump(2) + "\n");

  std::vector<SeedResult> results(c.seeds.size());
  try {
    parallel_for(c.seeds.size(), c.parallel, [&](std::size_t i) {
      results[i] = {c.seeds[i], run_seed(c, model, c.seeds[i])};
    });
  } catch (const std::exception& e) {
    write_file(marker, std::string("run failed: ") + e.what() + "\n");
    throw;
  }
  RunSummary s = write_run_outputs(c, std::move(results), out);
  fs::remove(marker);
  return s;
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepAxis {
  std::string path;  // dotted, e.g. "agent.sampler.step_size"
  std::vector<json> values;
};

struct SweepSpec {
  json base;
  std::vector<SweepAxis> axes;

  std::size_t size() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.values.size();
    return n;
  }
};

inline SweepSpec parse_sweep(const json& j) {
  std::vector<std::string> errors;
  detail::check_schema(j, kSweepSchema, errors);
  SweepSpec s;
  if (!j.is_object() || !j.contains("base") || !j.at("base").is_object())
    errors.push_back("sweep.base: missing experiment object");
  else
    s.base = j.at("base");
  if (!j.is_object() || !j.contains("grid") || !j.at("grid").is_object()) {
    errors.push_back("sweep.grid: missing object of value lists");
  } else {
    for (auto it = j.at("grid").begin(); it != j.at("grid").end(); ++it) {
      if (!it.value().is_array() || it.value().empty()) {
        errors.push_back("sweep.grid." + it.key() + ": must be a nonempty list");
        continue;
      }
      s.axes.push_back({it.key(), std::vector<json>(it.value().begin(), it.value().end())});
    }
  }
  for (auto it = j.begin(); j.is_object() && it != j.end(); ++it)
    if (it.key() != "schema" && it.key() != "base" && it.key() != "grid")
      errors.push_back("sweep." + it.key() + ": unknown field");
  if (!errors.empty()) throw ConfigError(detail::join_errors(errors));
  return s;
}

inline void set_dotted(json& j, const std::string& path, const json& value) {
  json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    if (!cur->contains(key)) (*cur)[key] = json::object();
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

struct SweepCell {
  std::size_t index = 0;
  json assignment;  // axis path -> value
  ExperimentConfig config;
  double score = 0.0;
};

/// Cells of the cross product, first axis varying slowest.
inline std::vector<SweepCell> expand_sweep(const SweepSpec& s) {
  std::vector<SweepCell> cells;
  const std::size_t n = s.size();
  std::vector<std::string> errors;
  for (std::size_t i = 0; i < n; ++i) {
    json cfg = s.base;
    json assignment = json::object();
    std::size_t rem = i;
    for (std::size_t a = s.axes.size(); a-- > 0;) {
      const auto& axis = s.axes[a];
      const json& v = axis.values[rem % axis.values.size()];
      rem /= axis.values.size();
      set_dotted(cfg, axis.path, v);
      assignment[axis.path] = v;
    }
    try {
      cells.push_back({i, assignment, parse_experiment(cfg), 0.0});
    } catch (const ConfigError& e) {
      errors.push_back("cell " + std::to_string(i) + " " + assignment.dump() + ": " + e.what());
    }
  }
  if (!errors.empty()) throw ConfigError(detail::join_errors(errors));
  return cells;
}

struct SweepReport {
  std::vector<SweepCell> ranked;  // best first
};

/// Runs every (cell, seed) pair through one worker pool and ranks cells by
/// the mean of their final-10 evaluation returns; ties go to the
/// lexicographically smaller canonical cell config.
inline SweepReport cmd_sweep(const SweepSpec& spec, const fs::path& out, unsigned parallel,
                             std::optional<std::vector<std::uint64_t>> seeds = std::nullopt,
                             const fs::path& base_dir = {}) {
  std::vector<SweepCell> cells = expand_sweep(spec);
  std::cerr << "sweep: " << cells.size() << " cells\n";
  fs::create_directories(out);
  const fs::path marker = out / "_INCOMPLETE";
  write_file(marker, "sweep in progress\n");

  struct Task {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  std::vector<EpisodicModel> models;
  for (auto& c : cells) {
    if (seeds) c.config.seeds = *seeds;
    c.config.output = (out / ("cell_" + std::to_string(c.index))).string();
    models.push_back(build_environment(c.config.environment, base_dir));
    for (auto s : c.config.seeds) tasks.push_back({static_cast<std::size_t>(&c - cells.data()), s});
  }
  std::vector<SeedResult> results(tasks.size());
  try {
    parallel_for(tasks.size(), parallel, [&](std::size_t t) {
      const auto& task = tasks[t];
      results[t] = {task.seed, run_seed(cells[task.cell].config, models[task.cell], task.seed)};
    });
  } catch (const std::exception& e) {
    write_file(marker, std::string("sweep failed: ") + e.what() + "\n");
    throw;
  }

  std::map<std::size_t, std::vector<SeedResult>> by_cell;
  for (std::size_t t = 0; t < tasks.size(); ++t) by_cell[tasks[t].cell].push_back(std::move(results[t]));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto& c = cells[i];
    write_file(fs::path(c.config.output) / "config.json", serialize_experiment(c.config).dump(2) + "\n");
    c.score = write_run_outputs(c.config, std::move(by_cell[i]), c.config.output).final_eval_mean;
  }

  SweepReport rep;
  rep.ranked = cells;
  std::stable_sort(rep.ranked.begin(), rep.ranked.end(), [](const SweepCell& a, const SweepCell& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.assignment.dump() < b.assignment.dump();
  });
  std::string csv = "rank,cell,score";
  for (const auto& axis : spec.axes) csv += "," + axis.path;
  csv += "\n";
  for (std::size_t r = 0; r < rep.ranked.size(); ++r) {
    const auto& c = rep.ranked[r];
    csv += std::to_string(r + 1) + "," + std::to_string(c.index) + "," + fmt_double(c.score);
    for (const auto& axis : spec.axes) csv += "," + c.assignment.at(axis.path).dump();
    csv += "\n";
  }
  write_file(out / "sweep_report.csv", csv);
  fs::remove(marker);
  return rep;
}

// ---------------------------------------------------------------------------
// Sampler benchmark
// ---------------------------------------------------------------------------

struct BenchSampler {
  SamplerKind kind = SamplerKind::lmc;
  double step_constant = 0.5;  // tau(eps) = step_constant * eps^step_power
  double step_power = 2.0;
  double friction = 2.0;
  double expected_slope = 2.0;
};

struct BenchSpec {
  std::string mode = "measured";  // measured | planted
  Index dim = 20;
  double condition = 10.0;
  double mean_offset = 30.0;  // target mean = mean_offset * ones; chains start at 0
  std::size_t replicates = 20000;
  std::vector<double> epsilons{0.4, 0.3, 0.22, 0.16, 0.12, 0.1};
  std::size_t grid_points = 48;
  std::uint64_t seed = 1;
  std::vector<BenchSampler> samplers{{SamplerKind::lmc, 0.5, 2.0, 2.0, 2.0},
                                     {SamplerKind::ulmc_exact, 0.2, 1.0, 2.0, 1.0}};
  unsigned parallel = 1;
};

inline BenchSpec parse_bench(const json& j) {
  std::vector<std::string> errors;
  detail::check_schema(j, kBenchSchema, errors);
  BenchSpec b;
  detail::Reader r(j, "bench", errors);
  std::string schema;
  r.get("schema", schema);
  r.get("mode", b.mode);
  r.get("dim", b.dim);
  r.get("condition", b.condition);
  r.get("mean_offset", b.mean_offset);
  r.get("replicates", b.replicates);
  r.get("epsilons", b.epsilons);
  r.get("grid_points", b.grid_points);
  r.get("seed", b.seed);
  r.get("parallel", b.parallel);
  if (const json* s = r.child("samplers")) {
    b.samplers.clear();
    if (!s->is_array()) r.fail("samplers", "must be a list");
    for (std::size_t i = 0; s->is_array() && i < s->size(); ++i) {
      BenchSampler bs;
      detail::Reader q((*s)[i], "bench.samplers[" + std::to_string(i) + "]", errors);
      std::string kind = "lmc";
      q.get("kind", kind);
      try {
        bs.kind = sampler_kind_from_string(kind);
      } catch (const ConfigError& e) {
        q.fail("kind", e.what());
      }
      q.get("step_constant", bs.step_constant);
      q.get("step_power", bs.step_power);
      q.get("friction", bs.friction);
      q.get("expected_slope", bs.expected_slope);
      q.reject_unknown();
      q.check(bs.step_constant > 0, "step_constant", "must be positive");
      q.check(bs.friction > 0, "friction", "must be positive");
      b.samplers.push_back(bs);
    }
  }
  r.reject_unknown();
  r.check(b.mode == "measured" || b.mode == "planted", "mode", "must be measured or planted");
  r.check(b.dim >= 1, "dim", "must be >= 1");
  r.check(b.condition >= 1, "condition", "must be >= 1");
  r.check(b.replicates >= static_cast<std::size_t>(b.dim) + 1, "replicates", "must exceed dim");
  r.check(b.epsilons.size() >= 2, "epsilons", "need at least two tolerances");
  for (double e : b.epsilons) r.check(e > 0 && e < 1, "epsilons", "must lie in (0, 1)");
  r.check(b.grid_points >= 4, "grid_points", "must be >= 4");
  r.check(!b.samplers.empty(), "samplers", "must be nonempty");
  if (!errors.empty()) throw ConfigError(detail::join_errors(errors));
  return b;
}

struct BenchPoint {
  double epsilon = 0;
  double step_size = 0;
  double iterations = 0;  // interpolated first crossing of tv_bound <= epsilon
  std::vector<SamplingErrorRecord> curve;
};

struct BenchResult {
  BenchSampler sampler;
  std::vector<BenchPoint> points;
  double slope = std::nan("");
};

/// Iteration count at which log tv_bound first crosses log eps, linearly
/// interpolated between grid points; nan when the curve never gets there.
inline double crossing_iterations(const std::vector<SamplingErrorRecord>& curve, double eps) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i].tv_bound > eps) continue;
    if (i == 0) return static_cast<double>(curve[0].iterations);
    const double x0 = static_cast<double>(curve[i - 1].iterations), x1 = static_cast<double>(curve[i].iterations);
    const double y0 = std::log(curve[i - 1].tv_bound), y1 = std::log(curve[i].tv_bound);
    if (!(y0 > y1)) return x1;
    return x0 + (x1 - x0) * (y0 - std::log(eps)) / (y0 - y1);
  }
  return std::nan("");
}

/// Continuous-time contraction rate of the slowest mode.
inline double chain_rate(SamplerKind kind, double m, double friction) {
  if (!is_underdamped(kind)) return m;
  return 0.5 * (friction - std::sqrt(std::max(0.0, friction * friction - 4.0 * m)));
}

inline BenchResult bench_one(const BenchSpec& spec, const BenchSampler& bs, const GaussianTarget& target) {
  BenchResult res;
  res.sampler = bs;
  const GaussianPosterior oracle(target.precision(), target.precision() * target.mean());
  const auto hb = target.hessian_bounds();
  const double kl0 = 0.5 * target.mean().dot(target.precision() * target.mean());
  for (std::size_t e = 0; e < spec.epsilons.size(); ++e) {
    const double eps = spec.epsilons[e];
    BenchPoint pt;
    pt.epsilon = eps;
    pt.step_size = bs.step_constant * std::pow(eps, bs.step_power);
    if (spec.mode == "planted") {
      pt.iterations = std::pow(1.0 / eps, bs.expected_slope);
      res.points.push_back(pt);
      continue;
    }
    // Predicted crossing from the slowest mode; the grid brackets it generously.
    const double rate = chain_rate(bs.kind, hb.lower, bs.friction) * pt.step_size;
    const double guess = std::log(std::max(kl0, 4.0) / (2.0 * eps * eps)) / (2.0 * rate);
    const double lo = std::max(1.0, 0.3 * guess), hi = std::max(lo + 8.0, 2.0 * guess);
    OracleBenchSpec ob;
    ob.sampler.kind = bs.kind;
    ob.sampler.step_size = pt.step_size;
    ob.sampler.friction = bs.friction;
    ob.replicates = spec.replicates;
    ob.threads = spec.parallel;
    ob.key = stream_key({spec.seed, static_cast<std::uint64_t>(bs.kind), e});
    for (std::size_t g = 0; g < spec.grid_points; ++g) {
      const double t = static_cast<double>(g) / static_cast<double>(spec.grid_points - 1);
      const auto J = static_cast<std::uint64_t>(std::llround(lo * std::pow(hi / lo, t)));
      if (ob.grid.empty() || J > ob.grid.back()) ob.grid.push_back(J);
    }
    pt.curve = sampler_error_vs_oracle(target, oracle, ob);
    pt.iterations = crossing_iterations(pt.curve, eps);
    res.points.push_back(std::move(pt));
  }
  std::vector<RatePoint> rp;
  bool complete = true;
  for (const auto& p : res.points) {
    if (std::isnan(p.iterations)) complete = false;
    rp.push_back({p.iterations, p.epsilon});
  }
  if (complete) res.slope = rate_fit(rp);
  return res;
}

/// Gradient evaluations to reach each tolerance and the fitted exponents.
inline std::vector<BenchResult> cmd_bench_sampler(const BenchSpec& spec, const fs::path& out) {
  fs::create_directories(out);
  const fs::path marker = out / "_INCOMPLETE";
  write_file(marker, "bench in progress\n");
  const GaussianTarget target =
      GaussianTarget::ill_conditioned(spec.dim, spec.condition, 1.0, Vector::Constant(spec.dim, spec.mean_offset));
  std::vector<BenchResult> results;
  std::string rates = "sampler,epsilon,step_size,grad_evals\n";
  std::string report = "sampler,slope,expected_slope,max_grad_evals\n";
  for (const auto& bs : spec.samplers) {
    results.push_back(bench_one(spec, bs, target));
    const auto& r = results.back();
    const std::string name(to_string(bs.kind));
    double budget = 0;
    for (std::size_t e = 0; e < r.points.size(); ++e) {
      const auto& p = r.points[e];
      rates += name + "," + fmt_double(p.epsilon) + "," + fmt_double(p.step_size) + "," + fmt_double(p.iterations) + "\n";
      budget = std::max(budget, std::isnan(p.iterations) ? 0.0 : p.iterations);
      if (p.curve.empty()) continue;
      std::string c = "iterations,kl,tv_bound\n";
      for (const auto& rec : p.curve)
        c += std::to_string(rec.iterations) + "," + fmt_double(rec.kl) + "," + fmt_double(rec.tv_bound) + "\n";
      write_file(out / ("bench_" + name + "_eps" + std::to_string(e) + ".csv"), c);
    }
    report += name + "," + fmt_double(r.slope) + "," + fmt_double(bs.expected_slope) + "," + fmt_double(budget) + "\n";
  }
  write_file(out / "rates.csv", rates);
  write_file(out / "rate_report.csv", report);
  fs::remove(marker);
  return results;
}

// ---------------------------------------------------------------------------
// Regret scaling
// ---------------------------------------------------------------------------

struct ScalingSpec {
  ExperimentConfig base;
  std::vector<Index> dims;  // empty: only base.environment.dim
};

inline ScalingSpec parse_scaling(const json& j) {
  std::vector<std::string> errors;
  detail::check_schema(j, kScalingSchema, errors);
  ScalingSpec s;
  if (!j.is_object() || !j.contains("experiment")) errors.push_back("scaling.experiment: missing");
  for (auto it = j.begin(); j.is_object() && it != j.end(); ++it)
    if (it.key() != "schema" && it.key() != "experiment" && it.key() != "dims")
      errors.push_back("scaling." + it.key() + ": unknown field");
  if (j.is_object() && j.contains("dims")) {
    if (!j.at("dims").is_array())
      errors.push_back("scaling.dims: must be a list");
    else
      for (const auto& d : j.at("dims")) {
        if (!d.is_number_integer() || d.get<Index>() < 2)
          errors.push_back("scaling.dims: entries must be integers >= 2");
        else
          s.dims.push_back(d.get<Index>());
      }
  }
  if (!errors.empty()) throw ConfigError(detail::join_errors(errors));
  s.base = parse_experiment(j.at("experiment"));
  if (s.base.environment.kind != "synthetic_linear")
    throw ConfigError(detail::join_errors({"scaling.experiment.environment.kind: must be synthetic_linear"}));
  return s;
}

struct ScalingResult {
  Index dim = 0;
  double exponent = std::nan("");
  std::vector<double> mean_cumulative_regret;
};

inline std::vector<ScalingResult> cmd_scaling(const ScalingSpec& spec) {
  std::vector<Index> dims = spec.dims;
  if (dims.empty()) dims.push_back(spec.base.environment.dim);
  const fs::path out = spec.base.output;
  fs::create_directories(out);
  const fs::path marker = out / "_INCOMPLETE";
  write_file(marker, "scaling in progress\n");
  std::vector<ScalingResult> results;
  std::string table = "dim,exponent,final_cum_regret\n";
  for (Index d : dims) {
    ExperimentConfig c = spec.base;
    c.environment.dim = d;
    c.environment.states = std::max(c.environment.states, d);
    c.output = (out / ("dim_" + std::to_string(d))).string();
    const RunSummary s = cmd_run(c);
    ScalingResult r;
    r.dim = d;
    r.mean_cumulative_regret = mean_cumulative_regret(s.seeds);
    r.exponent = s.regret_exponent;
    std::string curve = "T,cum_regret\n";
    for (std::size_t k = 0; k < r.mean_cumulative_regret.size(); ++k)
      curve += std::to_string(k + 1) + "," + fmt_double(r.mean_cumulative_regret[k]) + "\n";
    write_file(fs::path(c.output) / "regret_curve.csv", curve);
    table += std::to_string(d) + "," + fmt_double(r.exponent) + "," +
             fmt_double(r.mean_cumulative_regret.empty() ? 0.0 : r.mean_cumulative_regret.back()) + "\n";
    results.push_back(std::move(r));
  }
  write_file(out / "scaling.csv", table);
  fs::remove(marker);
  return results;
}

}  // namespace fgts
