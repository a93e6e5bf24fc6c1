#pragma once

// LSVI with approximate posterior sampling, plus baselines sharing its
// backward pass: exact conjugate Thompson sampling, ridge LSVI with an
// elliptical bonus, and epsilon-greedy ridge LSVI.

#include "fgts/core.hpp"
#include "fgts/envs.hpp"
#include "fgts/posterior.hpp"
#include "fgts/random.hpp"
#include "fgts/samplers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fgts {

enum class AgentKind { lsvi_ase, exact_ts, lsvi_ucb, epsilon_greedy };

inline std::string_view to_string(AgentKind k) {
  switch (k) {
    case AgentKind::lsvi_ase: return "lsvi_ase";
    case AgentKind::exact_ts: return "exact_ts";
    case AgentKind::lsvi_ucb: return "lsvi_ucb";
    case AgentKind::epsilon_greedy: return "epsilon_greedy";
  }
  return "?";
}

inline AgentKind agent_kind_from_string(std::string_view s) {
  for (auto k : {AgentKind::lsvi_ase, AgentKind::exact_ts, AgentKind::lsvi_ucb, AgentKind::epsilon_greedy})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown agent kind '" + std::string(s) + "'");
}

/// How J_k and tau_{k,h} are chosen.
enum class SchedulePreset { constant, theory, curvature };

inline std::string_view to_string(SchedulePreset p) {
  switch (p) {
    case SchedulePreset::constant: return "constant";
    case SchedulePreset::theory: return "theory";
    case SchedulePreset::curvature: return "curvature";
  }
  return "?";
}
inline SchedulePreset schedule_preset_from_string(std::string_view s) {
  if (s == "constant") return SchedulePreset::constant;
  if (s == "theory") return SchedulePreset::theory;
  if (s == "curvature") return SchedulePreset::curvature;
  throw ConfigError("unknown schedule preset '" + std::string(s) + "'");
}

struct AgentConfig {
  AgentKind kind = AgentKind::lsvi_ase;
  SamplerConfig sampler{};

  // constant: J_k = iterations and tau = sampler.step_size.
  // theory: tau from step_size_schedule (constant schedule_constant) and J_k
  // from contraction_iterations with theory_tolerance, capped at max_iterations.
  // curvature: J_k = iterations and tau = min(sampler.step_size,
  // schedule_constant / M_{k,h}), with M the Gershgorin bound on the stage Hessian.
  SchedulePreset schedule = SchedulePreset::constant;
  std::uint64_t iterations = 4;
  double schedule_constant = 1.0;
  double theory_tolerance = 0.1;
  std::uint64_t max_iterations = 100000;

  FGTSWeights weights{};
  std::optional<double> prior_variance;  // default sqrt(d) * H
  bool warm_start = true;
  bool truncation = true;

  double ridge = 1.0;      // lsvi_ucb and epsilon_greedy
  double ucb_bonus = 1.0;  // lsvi_ucb
  double epsilon = 0.1;    // epsilon_greedy

  bool clamp_divergence = false;

  /// Every violated constraint, empty when valid.
  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    auto check = [&](bool ok, const char* msg) {
      if (!ok) out.emplace_back(msg);
    };
    check(weights.loss_weight > 0, "agent.loss_weight must be positive");
    check(weights.feelgood_weight >= 0, "agent.feelgood_weight must be nonnegative");
    check(!prior_variance || *prior_variance > 0, "agent.prior_variance must be positive");
    check(sampler.step_size > 0, "agent.sampler.step_size must be positive");
    check(sampler.inverse_temperature > 0, "agent.sampler.inverse_temperature must be positive");
    check(sampler.friction > 0, "agent.sampler.friction must be positive");
    check(iterations >= 1 || kind != AgentKind::lsvi_ase, "agent.iterations must be >= 1");
    check(schedule_constant > 0, "agent.schedule_constant must be positive");
    check(theory_tolerance > 0 && theory_tolerance < 1, "agent.theory_tolerance must lie in (0, 1)");
    check(max_iterations >= 1, "agent.max_iterations must be >= 1");
    check(ridge > 0, "agent.ridge must be positive");
    check(ucb_bonus >= 0, "agent.ucb_bonus must be nonnegative");
    check(epsilon >= 0 && epsilon <= 1, "agent.epsilon must lie in [0, 1]");
    return out;
  }

  void validate() const {
    const auto v = violations();
    if (!v.empty()) throw ConfigError(v.front());
  }
};

struct RunRecord {
  int episode = 0;
  double episode_return = 0.0;  // realised reward of the executed episode
  double regret = 0.0;          // V*_1(x_1) - V_1^{pi_k}(x_1), exact
  double cumulative_regret = 0.0;
  std::uint64_t grad_evals = 0;
  double wall_seconds = 0.0;
};

/// max_i sum_j |A_ij|, an upper bound on the spectral radius.
inline double gershgorin_bound(const Matrix& a) { return a.cwiseAbs().rowwise().sum().maxCoeff(); }

/// Clip into [0, H - h + 1].
inline double truncate_q(double raw, int h, int horizon) {
  return std::clamp(raw, 0.0, static_cast<double>(horizon - h + 1));
}

class Agent {
 public:
  /// `run_key` seeds every stream the agent uses; `total_episodes` is the K
  /// fed to the theory step-size schedule.
  Agent(const EpisodicModel& model, AgentConfig cfg, std::uint64_t run_key, int total_episodes = 1)
      : model_(model), cfg_(std::move(cfg)), run_key_(run_key), total_episodes_(std::max(total_episodes, 1)) {
    cfg_.validate();
    model_.validate();
    const Index d = model_.features.dim();
    prior_ = {cfg_.prior_variance.value_or(PriorSpec::standard(d, model_.horizon).variance)};
    optimal_value_ = fgts::optimal_value(model_);
    for (int h = 1; h <= model_.horizon; ++h) {
      stats_.emplace_back(&model_.features, h);
      chains_.push_back(initial_state(cfg_.sampler.kind, Vector::Zero(d)));
      q_.push_back(Matrix::Zero(model_.states, model_.actions));
    }
  }

  const EpisodicModel& model() const { return model_; }
  const AgentConfig& config() const { return cfg_; }
  const PriorSpec& prior() const { return prior_; }
  int episodes_done() const { return episode_; }
  double optimal_value() const { return optimal_value_; }

  /// Q_h^k tables (S x A) from the latest backward pass.
  const std::vector<Matrix>& q_tables() const { return q_; }
  /// Latest per-stage weights.
  std::vector<Vector> weights() const {
    std::vector<Vector> w;
    for (const auto& c : chains_) w.push_back(c.position);
    return w;
  }
  const std::vector<SamplerState>& chain_states() const { return chains_; }
  const StageStatistics& statistics(int h) const { return stats_[static_cast<std::size_t>(h - 1)]; }
  PolicyTable greedy() const { return greedy_policy(q_); }
  /// Divergence events absorbed under clamp_divergence.
  const std::vector<std::string>& events() const { return events_; }
  /// Elliptical bonus per (x, a) row from the latest lsvi_ucb pass.
  const Vector& bonus() const { return bonus_; }

  /// Backward pass for episode k = episodes_done() + 1 without acting; returns gradient evaluations.
  std::uint64_t plan() {
    const int k = episode_ + 1;
    std::uint64_t evals = 0;
    Vector next_values;  // empty at h = H
    for (int h = model_.horizon; h >= 1; --h) {
      const auto i = static_cast<std::size_t>(h - 1);
      RandomStream rng(stream_key({run_key_, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(h)}));
      Vector w;
      switch (cfg_.kind) {
        case AgentKind::lsvi_ase: {
          std::optional<FeelGoodContext> fg;
          if (h == 1) fg = feelgood_context(model_.features, model_.initial_state);
          const auto post = StagePosterior::from_statistics(stats_[i], next_values, cfg_.weights, prior_, std::move(fg));
          evals += sample_stage(post, k, h, rng);
          w = chains_[i].position;
          break;
        }
        case AgentKind::exact_ts: {
          const auto post = StagePosterior::from_statistics(stats_[i], next_values, {cfg_.weights.loss_weight, 0.0}, prior_);
          w = exact_gaussian_posterior(post).sample(rng);
          chains_[i].position = w;
          break;
        }
        case AgentKind::lsvi_ucb:
        case AgentKind::epsilon_greedy: w = ridge_fit(i, next_values, h); break;
      }
      Vector raw = model_.features.rows() * w;
      if (cfg_.kind == AgentKind::lsvi_ucb && cfg_.ucb_bonus > 0) raw += cfg_.ucb_bonus * bonus_;
      Matrix q = raw.reshaped<Eigen::RowMajor>(model_.states, model_.actions);
      if (cfg_.truncation) q = q.unaryExpr([&](double v) { return truncate_q(v, h, model_.horizon); });
      q_[i] = q;
      next_values = q.rowwise().maxCoeff();
    }
    return evals;
  }

  /// Plans, acts for H steps, stores the transitions and logs exact regret.
  RunRecord run_episode() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t evals = plan();
    const int k = ++episode_;

    const PolicyTable pi = greedy_policy(q_);
    RandomStream env_rng(stream_key({run_key_, static_cast<std::uint64_t>(k), 0}));
    Episode ep;
    double value = 0.0;
    if (cfg_.kind == AgentKind::epsilon_greedy) {
      const double eps = cfg_.epsilon;
      const Index A = model_.actions;
      ep = rollout(
          model_,
          [&](int h, Index x, RandomStream& r) {
            if (eps > 0 && r.bernoulli(eps)) return static_cast<Index>(r.below(static_cast<std::uint64_t>(A)));
            return pi.at(h, x);
          },
          env_rng, k);
      value = policy_value(model_, StochasticPolicy::epsilon_greedy(model_, pi, eps));
    } else {
      ep = rollout(model_, pi, env_rng, k);
      value = policy_value(model_, pi);
    }
    for (const Transition& t : ep.trace) stats_[static_cast<std::size_t>(t.stage - 1)].add(t);

    RunRecord rec;
    rec.episode = k;
    rec.episode_return = ep.total_reward;
    rec.regret = std::max(0.0, optimal_value_ - value);
    cumulative_regret_ += rec.regret;
    rec.cumulative_regret = cumulative_regret_;
    rec.grad_evals = evals;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  /// Exact value of the greedy policy of the current Q tables.
  double greedy_value() const { return policy_value(model_, greedy_policy(q_)); }

 private:
  std::uint64_t sample_stage(const StagePosterior& post, int k, int h, RandomStream& rng) {
    const auto i = static_cast<std::size_t>(h - 1);
    SamplerConfig sc = cfg_.sampler;
    std::uint64_t J = cfg_.iterations;
    if (cfg_.schedule == SchedulePreset::theory) {
      const auto hb = hessian_bounds(post.precision());
      const auto family = schedule_family(sc.kind);
      sc.step_size = step_size_schedule(family, k, h, hb.upper, static_cast<double>(post.dim()), model_.horizon,
                                        total_episodes_, hb.condition, cfg_.schedule_constant);
      if (is_underdamped(sc.kind) && sc.kind != SamplerKind::ulmc_exact)
        sc.step_size = std::min(sc.step_size, 0.5 / sc.friction);
      J = contraction_iterations(family, sc.step_size, hb.lower, sc.friction, cfg_.theory_tolerance,
                                 cfg_.max_iterations);
    }
    if (cfg_.schedule == SchedulePreset::curvature) {
      sc.step_size = std::min(sc.step_size, cfg_.schedule_constant / gershgorin_bound(post.precision()));
      if (is_underdamped(sc.kind) && sc.kind != SamplerKind::ulmc_exact)
        sc.step_size = std::min(sc.step_size, 0.5 / sc.friction);
    }
    if (!cfg_.warm_start) chains_[i] = initial_state(sc.kind, Vector::Zero(post.dim()));

    SamplerState s = chains_[i];
    const std::uint64_t start = s.grad_evals;
    for (std::uint64_t j = 0; j < J; ++j) {
      try {
        s = sampler_step(std::move(s), post, sc, rng);
      } catch (const NumericalDivergence& e) {
        if (!cfg_.clamp_divergence)
          throw NumericalDivergence("episode " + std::to_string(k) + " stage " + std::to_string(h) + ": " + e.detail(),
                                    e.iteration());
        events_.push_back("episode " + std::to_string(k) + " stage " + std::to_string(h) +
                          ": divergence, chain reset to last finite iterate");
        s = chains_[i];
        break;
      }
      chains_[i] = s;
    }
    return chains_[i].grad_evals - start;
  }

  /// Ridge regression on the stage targets; also fills bonus_ for lsvi_ucb.
  Vector ridge_fit(std::size_t i, const Vector& next_values, int /*h*/) {
    const auto m = stats_[i].target_moments(next_values);
    Matrix lambda = stats_[i].gram();
    lambda.diagonal().array() += cfg_.ridge;
    const Eigen::LLT<Matrix> llt(lambda);
    if (cfg_.kind == AgentKind::lsvi_ucb) {
      const Matrix& phi = model_.features.rows();
      const Matrix solved = llt.solve(phi.transpose());
      bonus_ = (phi.transpose().cwiseProduct(solved)).colwise().sum().transpose().cwiseMax(0.0).cwiseSqrt();
    }
    return llt.solve(m.linear);
  }

  EpisodicModel model_;
  AgentConfig cfg_;
  std::uint64_t run_key_;
  int total_episodes_;
  PriorSpec prior_;
  double optimal_value_ = 0.0;
  std::vector<StageStatistics> stats_;
  std::vector<SamplerState> chains_;
  std::vector<Matrix> q_;
  Vector bonus_;
  std::vector<std::string> events_;
  int episode_ = 0;
  double cumulative_regret_ = 0.0;
};

struct Evaluation {
  std::uint64_t env_steps = 0;
  int episode = 0;
  double value = 0.0;  // exact greedy-policy return
};

struct RunResult {
  std::vector<RunRecord> records;
  std::vector<Evaluation> evaluations;
  std::vector<std::string> events;

  /// Mean of the last `n` evaluation returns (all of them when fewer).
  double final_evaluation_mean(std::size_t n = 10) const {
    if (evaluations.empty()) return 0.0;
    const std::size_t take = std::min(n, evaluations.size());
    double s = 0.0;
    for (std::size_t i = evaluations.size() - take; i < evaluations.size(); ++i) s += evaluations[i].value;
    return s / static_cast<double>(take);
  }
};

/// Runs `episodes` episodes and evaluates the greedy policy every
/// `eval_interval` environment steps (0 disables evaluation).
inline RunResult run_agent(const EpisodicModel& model, const AgentConfig& cfg, std::uint64_t run_key, int episodes,
                           std::uint64_t eval_interval = 1000) {
  require(episodes >= 1, "run_agent: episodes must be >= 1");
  Agent agent(model, cfg, run_key, episodes);
  RunResult out;
  out.records.reserve(static_cast<std::size_t>(episodes));
  std::uint64_t steps = 0;
  std::uint64_t next_eval = eval_interval;
  for (int k = 1; k <= episodes; ++k) {
    out.records.push_back(agent.run_episode());
    steps += static_cast<std::uint64_t>(model.horizon);
    if (eval_interval == 0 || steps < next_eval) continue;
    const double v = agent.greedy_value();
    while (steps >= next_eval) {
      out.evaluations.push_back({next_eval, k, v});
      next_eval += eval_interval;
    }
  }
  out.events = agent.events();
  return out;
}

/// Episodes needed to cover `env_steps` interactions.
inline int episodes_for_steps(const EpisodicModel& model, std::uint64_t env_steps) {
  return static_cast<int>((env_steps + static_cast<std::uint64_t>(model.horizon) - 1) /
                          static_cast<std::uint64_t>(model.horizon));
}

}  // namespace fgts
