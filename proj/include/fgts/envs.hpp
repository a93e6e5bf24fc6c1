#pragma once

// Finite episodic MDPs with known models: the N-chain, synthetic linear MDPs,
// exact dynamic programming, exact occupancy measures and sampled rollouts.
//
// Stages are 1-based in the public API (h = 1..H). Per-stage containers are
// 0-based vectors, so stage h lives at index h - 1.

#include "fgts/core.hpp"
#include "fgts/posterior.hpp"
#include "fgts/random.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace fgts {

struct EpisodicModel {
  int horizon = 1;
  Index states = 1;
  Index actions = 1;
  FeatureTable features;
  std::vector<Matrix> transitions;  // per stage: (S * A) x S, row x * A + a
  std::vector<Matrix> rewards;      // per stage: S x A
  Index initial_state = 0;

  double reward(int h, Index x, Index a) const { return rewards[static_cast<std::size_t>(h - 1)](x, a); }
  auto next_distribution(int h, Index x, Index a) const {
    return transitions[static_cast<std::size_t>(h - 1)].row(x * actions + a);
  }

  void validate(double tol = 1e-12) const {
    require(horizon >= 1, "model: horizon must be >= 1");
    require(states >= 1 && actions >= 1, "model: need at least one state and one action");
    require(initial_state >= 0 && initial_state < states, "model: initial state out of range");
    require(features.states() == states && features.actions() == actions, "model: feature table shape mismatch");
    require(transitions.size() == static_cast<std::size_t>(horizon), "model: one transition matrix per stage");
    require(rewards.size() == static_cast<std::size_t>(horizon), "model: one reward table per stage");
    for (int h = 1; h <= horizon; ++h) {
      const Matrix& P = transitions[static_cast<std::size_t>(h - 1)];
      const Matrix& r = rewards[static_cast<std::size_t>(h - 1)];
      const std::string at = " at stage " + std::to_string(h);
      require(P.rows() == states * actions && P.cols() == states, "model: transition shape" + at);
      require(r.rows() == states && r.cols() == actions, "model: reward shape" + at);
      require(P.allFinite() && r.allFinite(), "model: non-finite entry" + at);
      require(P.minCoeff() >= 0.0, "model: negative transition probability" + at);
      for (Index i = 0; i < P.rows(); ++i)
        require(std::abs(P.row(i).sum() - 1.0) <= tol, "model: transition row does not sum to 1" + at);
      require(r.minCoeff() >= 0.0 && r.maxCoeff() <= 1.0, "model: reward outside [0, 1]" + at);
    }
  }
};

/// Deterministic Markov policy: action[h - 1][x].
struct PolicyTable {
  std::vector<std::vector<Index>> action;

  Index at(int h, Index x) const { return action[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(x)]; }

  static PolicyTable constant(const EpisodicModel& m, Index a) {
    return {std::vector<std::vector<Index>>(static_cast<std::size_t>(m.horizon),
                                            std::vector<Index>(static_cast<std::size_t>(m.states), a))};
  }
};

/// Randomised Markov policy: prob[h - 1](x, a).
struct StochasticPolicy {
  std::vector<Matrix> prob;

  static StochasticPolicy from(const EpisodicModel& m, const PolicyTable& pi) {
    StochasticPolicy s;
    for (int h = 1; h <= m.horizon; ++h) {
      Matrix p = Matrix::Zero(m.states, m.actions);
      for (Index x = 0; x < m.states; ++x) p(x, pi.at(h, x)) = 1.0;
      s.prob.push_back(std::move(p));
    }
    return s;
  }

  /// Greedy action with probability 1 - eps, uniform otherwise.
  static StochasticPolicy epsilon_greedy(const EpisodicModel& m, const PolicyTable& pi, double eps) {
    StochasticPolicy s = from(m, pi);
    for (auto& p : s.prob) p = (1.0 - eps) * p + Matrix::Constant(p.rows(), p.cols(), eps / static_cast<double>(m.actions));
    return s;
  }
};

// ---------------------------------------------------------------------------
// Dynamic programming
// ---------------------------------------------------------------------------

struct ValueTables {
  std::vector<Vector> V;  // V[h - 1], h = 1..H+1 (last entry is zero)
  std::vector<Matrix> Q;  // Q[h - 1], S x A, h = 1..H
};

/// (P_h v)(x, a) as an S x A table.
inline Matrix expected_next(const EpisodicModel& m, int h, const Vector& v) {
  const Vector flat = m.transitions[static_cast<std::size_t>(h - 1)] * v;
  return flat.reshaped<Eigen::RowMajor>(m.states, m.actions);
}

inline ValueTables optimal_values(const EpisodicModel& m) {
  ValueTables t;
  t.V.assign(static_cast<std::size_t>(m.horizon + 1), Vector::Zero(m.states));
  t.Q.assign(static_cast<std::size_t>(m.horizon), Matrix::Zero(m.states, m.actions));
  for (int h = m.horizon; h >= 1; --h) {
    const auto i = static_cast<std::size_t>(h - 1);
    t.Q[i] = m.rewards[i] + expected_next(m, h, t.V[i + 1]);
    t.V[i] = t.Q[i].rowwise().maxCoeff();
  }
  return t;
}

inline ValueTables policy_values(const EpisodicModel& m, const StochasticPolicy& pi) {
  require(pi.prob.size() == static_cast<std::size_t>(m.horizon), "policy_values: one table per stage required");
  ValueTables t;
  t.V.assign(static_cast<std::size_t>(m.horizon + 1), Vector::Zero(m.states));
  t.Q.assign(static_cast<std::size_t>(m.horizon), Matrix::Zero(m.states, m.actions));
  for (int h = m.horizon; h >= 1; --h) {
    const auto i = static_cast<std::size_t>(h - 1);
    t.Q[i] = m.rewards[i] + expected_next(m, h, t.V[i + 1]);
    t.V[i] = t.Q[i].cwiseProduct(pi.prob[i]).rowwise().sum();
  }
  return t;
}

inline ValueTables policy_values(const EpisodicModel& m, const PolicyTable& pi) {
  return policy_values(m, StochasticPolicy::from(m, pi));
}

/// V_1^pi(x_1).
inline double policy_value(const EpisodicModel& m, const PolicyTable& pi) {
  return policy_values(m, pi).V[0](m.initial_state);
}
inline double policy_value(const EpisodicModel& m, const StochasticPolicy& pi) {
  return policy_values(m, pi).V[0](m.initial_state);
}

inline double optimal_value(const EpisodicModel& m) { return optimal_values(m).V[0](m.initial_state); }

/// Largest |Q_h - r_h - P_h max_a Q_{h+1}| over all (h, x, a).
inline double bellman_optimality_residual(const EpisodicModel& m, const ValueTables& t) {
  double worst = 0.0;
  for (int h = 1; h <= m.horizon; ++h) {
    const auto i = static_cast<std::size_t>(h - 1);
    const Vector next = h == m.horizon ? Vector::Zero(m.states) : Vector(t.Q[i + 1].rowwise().maxCoeff());
    worst = std::max(worst, (t.Q[i] - m.rewards[i] - expected_next(m, h, next)).cwiseAbs().maxCoeff());
  }
  return worst;
}

/// argmax_a Q[h - 1](x, a), ties to the lowest index.
inline PolicyTable greedy_policy(const std::vector<Matrix>& Q) {
  PolicyTable pi;
  for (const Matrix& q : Q) {
    std::vector<Index> row(static_cast<std::size_t>(q.rows()));
    for (Index x = 0; x < q.rows(); ++x) row[static_cast<std::size_t>(x)] = argmax_lowest(q.row(x).transpose());
    pi.action.push_back(std::move(row));
  }
  return pi;
}

/// State distribution d_h(x) at every stage when following pi from x_1.
inline std::vector<Vector> occupancy(const EpisodicModel& m, const StochasticPolicy& pi) {
  std::vector<Vector> d(static_cast<std::size_t>(m.horizon), Vector::Zero(m.states));
  d[0](m.initial_state) = 1.0;
  for (int h = 1; h < m.horizon; ++h) {
    const auto i = static_cast<std::size_t>(h - 1);
    // Joint (x, a) mass, flattened row-major to match the transition rows.
    const Matrix joint = pi.prob[i].array().colwise() * d[i].array();
    const Vector flat = joint.reshaped<Eigen::RowMajor>();
    d[i + 1] = m.transitions[i].transpose() * flat;
  }
  return d;
}

inline std::vector<Vector> occupancy(const EpisodicModel& m, const PolicyTable& pi) {
  return occupancy(m, StochasticPolicy::from(m, pi));
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct Episode {
  std::vector<Transition> trace;
  double total_reward = 0.0;
};

/// Draws x' ~ P_h(. | x, a) by inversion.
inline Index sample_next_state(const EpisodicModel& m, int h, Index x, Index a, RandomStream& rng) {
  const auto row = m.next_distribution(h, x, a);
  const double u = rng.uniform();
  double acc = 0.0;
  Index last = 0;
  for (Index j = 0; j < m.states; ++j) {
    if (row(j) <= 0.0) continue;
    last = j;
    acc += row(j);
    if (u < acc) return j;
  }
  return last;
}

/// choose(h, x, rng) -> action.
using ActionChooser = std::function<Index(int, Index, RandomStream&)>;

inline Episode rollout(const EpisodicModel& m, const ActionChooser& choose, RandomStream& rng, int episode = 0) {
  Episode ep;
  ep.trace.reserve(static_cast<std::size_t>(m.horizon));
  Index x = m.initial_state;
  for (int h = 1; h <= m.horizon; ++h) {
    const Index a = choose(h, x, rng);
    require(a >= 0 && a < m.actions, "rollout: action out of range");
    const Index xn = sample_next_state(m, h, x, a, rng);
    const double r = m.reward(h, x, a);
    ep.trace.push_back({x, a, r, xn, episode, h});
    ep.total_reward += r;
    x = xn;
  }
  return ep;
}

inline Episode rollout(const EpisodicModel& m, const PolicyTable& pi, RandomStream& rng, int episode = 0) {
  return rollout(m, [&](int h, Index x, RandomStream&) { return pi.at(h, x); }, rng, episode);
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// Indicator vector 1{j <= s}, j = 0..n-1.
inline Vector thermometer(Index n, Index s) {
  Vector v = Vector::Zero(n);
  v.head(s + 1).setOnes();
  return v;
}

/// Per-action block stacking: phi(x, a) has base(x) in block a and zeros elsewhere.
inline FeatureTable block_features(const Matrix& base, Index actions) {
  const Index S = base.rows();
  const Index k = base.cols();
  Matrix rows = Matrix::Zero(S * actions, k * actions);
  for (Index x = 0; x < S; ++x)
    for (Index a = 0; a < actions; ++a) rows.block(x * actions + a, a * k, 1, k) = base.row(x);
  return FeatureTable(S, actions, std::move(rows));
}

inline constexpr Index kLeft = 0;
inline constexpr Index kRight = 1;

/// Chain s_1..s_N (indices 0..N-1), actions left/right with clamped moves,
/// H = N + 9, start at s_2. Being at s_1 pays 0.001 and being at s_N pays 1
/// at stages 1..H-1; the last stage pays nothing, so the best return is 10.
inline EpisodicModel nchain_model(Index n, bool normalize_features = false) {
  require(n > 3, "nchain_model: N must exceed 3");
  EpisodicModel m;
  m.horizon = static_cast<int>(n) + 9;
  m.states = n;
  m.actions = 2;
  m.initial_state = 1;

  Matrix therm(n, n);
  for (Index s = 0; s < n; ++s) therm.row(s) = thermometer(n, s).transpose();
  if (normalize_features) therm /= std::sqrt(static_cast<double>(n));
  m.features = block_features(therm, 2);

  Matrix P = Matrix::Zero(n * 2, n);
  for (Index x = 0; x < n; ++x) {
    P(x * 2 + kLeft, std::max<Index>(x - 1, 0)) = 1.0;
    P(x * 2 + kRight, std::min<Index>(x + 1, n - 1)) = 1.0;
  }
  Matrix r = Matrix::Zero(n, 2);
  r.row(0).setConstant(0.001);
  r.row(n - 1).setConstant(1.0);
  for (int h = 1; h <= m.horizon; ++h) {
    m.transitions.push_back(P);
    m.rewards.push_back(h < m.horizon ? r : Matrix::Zero(n, 2));
  }
  m.validate();
  return m;
}

struct LinearMdp {
  EpisodicModel model;
  std::vector<Matrix> mu;     // per stage: d x S, row i = anchor distribution i
  std::vector<Vector> theta;  // per stage: length d
};

/// P_h(x' | x, a) = <phi(x, a), mu_h(x')> and r_h(x, a) = <phi(x, a), theta_h>.
inline LinearMdp linear_mdp_from_factors(FeatureTable features, std::vector<Matrix> mu, std::vector<Vector> theta,
                                         Index initial_state) {
  require(!mu.empty() && mu.size() == theta.size(), "linear_mdp: need one (mu, theta) pair per stage");
  LinearMdp out;
  EpisodicModel& m = out.model;
  m.horizon = static_cast<int>(mu.size());
  m.states = features.states();
  m.actions = features.actions();
  m.initial_state = initial_state;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    require(mu[i].rows() == features.dim() && mu[i].cols() == m.states, "linear_mdp: mu must be d x S");
    require(theta[i].size() == features.dim(), "linear_mdp: theta must have length d");
    m.transitions.push_back(features.rows() * mu[i]);
    const Vector r = features.rows() * theta[i];
    m.rewards.push_back(r.reshaped<Eigen::RowMajor>(m.states, m.actions));
  }
  m.features = std::move(features);
  m.validate(1e-12);
  out.mu = std::move(mu);
  out.theta = std::move(theta);
  return out;
}

/// Largest entrywise gap between the stored model and its (phi, mu, theta) factors.
inline double linear_factorization_error(const LinearMdp& lm) {
  double worst = 0.0;
  const EpisodicModel& m = lm.model;
  for (int h = 1; h <= m.horizon; ++h) {
    const auto i = static_cast<std::size_t>(h - 1);
    worst = std::max(worst, (m.features.rows() * lm.mu[i] - m.transitions[i]).cwiseAbs().maxCoeff());
    const Vector r = m.features.rows() * lm.theta[i];
    const Matrix rt = r.reshaped<Eigen::RowMajor>(m.states, m.actions);
    worst = std::max(worst, (rt - m.rewards[i]).cwiseAbs().maxCoeff());
  }
  return worst;
}

/// Exact linear representation of any tabular model: one-hot features over
/// (x, a), anchors = transition rows, theta = rewards.
inline LinearMdp tabular_as_linear(const EpisodicModel& tab) {
  const Index S = tab.states, A = tab.actions;
  FeatureTable onehot(S, A, Matrix::Identity(S * A, S * A));
  std::vector<Matrix> mu;
  std::vector<Vector> theta;
  for (int h = 1; h <= tab.horizon; ++h) {
    const auto i = static_cast<std::size_t>(h - 1);
    mu.push_back(tab.transitions[i]);
    theta.push_back(tab.rewards[i].reshaped<Eigen::RowMajor>());
  }
  return linear_mdp_from_factors(std::move(onehot), std::move(mu), std::move(theta), tab.initial_state);
}

inline Vector sample_dirichlet(Index n, double concentration, RandomStream& rng) {
  Vector v(n);
  std::gamma_distribution<double> g(concentration, 1.0);
  for (Index i = 0; i < n; ++i) v(i) = g(rng);
  const double s = v.sum();
  if (!(s > 0.0)) {
    v.setZero();
    v(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)))) = 1.0;
    return v;
  }
  return v / s;
}

struct SyntheticMdpOptions {
  double anchor_concentration = 1.0;   // Dirichlet parameter of each anchor distribution over states
  double feature_concentration = 1.0;  // Dirichlet parameter of phi(x, a) over anchors
  double reward_scale = 1.0;           // theta ~ reward_scale * U[0, 1]^d
  bool stationary = false;             // share (mu, theta) across stages
};

/// Simplex construction: d anchor distributions per stage, phi(x, a) a random
/// point of the d-simplex, theta_h uniform in [0, reward_scale]^d. Convexity
/// keeps every kernel stochastic and every reward in [0, 1].
inline LinearMdp synthetic_linear_mdp(Index d, int horizon, Index actions, Index states, std::uint64_t seed,
                                      const SyntheticMdpOptions& opt = {}) {
  require(d >= 2, "synthetic_linear_mdp: d must be >= 2");
  require(states >= d, "synthetic_linear_mdp: need at least d states");
  require(horizon >= 1 && actions >= 1, "synthetic_linear_mdp: bad horizon or action count");
  require(opt.anchor_concentration > 0 && opt.feature_concentration > 0, "synthetic_linear_mdp: bad concentration");
  require(opt.reward_scale > 0 && opt.reward_scale <= 1.0, "synthetic_linear_mdp: reward_scale must lie in (0, 1]");

  RandomStream rng(stream_key({0x53594E4D4450ULL, seed}));
  Matrix rows(states * actions, d);
  for (Index i = 0; i < rows.rows(); ++i) rows.row(i) = sample_dirichlet(d, opt.feature_concentration, rng).transpose();
  FeatureTable features(states, actions, std::move(rows));

  std::vector<Matrix> mu;
  std::vector<Vector> theta;
  for (int h = 1; h <= horizon; ++h) {
    if (opt.stationary && h > 1) {
      mu.push_back(mu.front());
      theta.push_back(theta.front());
      continue;
    }
    Matrix m(d, states);
    for (Index i = 0; i < d; ++i) m.row(i) = sample_dirichlet(states, opt.anchor_concentration, rng).transpose();
    Vector t(d);
    for (Index i = 0; i < d; ++i) t(i) = opt.reward_scale * rng.uniform();
    mu.push_back(std::move(m));
    theta.push_back(std::move(t));
  }
  return linear_mdp_from_factors(std::move(features), std::move(mu), std::move(theta), 0);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline constexpr const char* kModelSchema = "fgts.model/1";

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& a) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < a.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < a.cols(); ++j) row.push_back(a(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& rows, Index expect_rows, Index expect_cols, const std::string& what) {
  require(rows.is_array() && static_cast<Index>(rows.size()) == expect_rows, "model json: " + what + " row count");
  Matrix a(expect_rows, expect_cols);
  for (Index i = 0; i < expect_rows; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    require(row.is_array() && static_cast<Index>(row.size()) == expect_cols, "model json: " + what + " column count");
    for (Index j = 0; j < expect_cols; ++j) {
      require(row[static_cast<std::size_t>(j)].is_number(), "model json: " + what + " entry is not a number");
      a(i, j) = row[static_cast<std::size_t>(j)].get<double>();
    }
  }
  return a;
}

}  // namespace detail

inline nlohmann::json model_to_json(const EpisodicModel& m) {
  nlohmann::json j;
  j["schema"] = kModelSchema;
  j["horizon"] = m.horizon;
  j["states"] = m.states;
  j["actions"] = m.actions;
  j["initial_state"] = m.initial_state;
  j["features"] = detail::matrix_to_json(m.features.rows());
  j["transitions"] = nlohmann::json::array();
  j["rewards"] = nlohmann::json::array();
  for (int h = 1; h <= m.horizon; ++h) {
    j["transitions"].push_back(detail::matrix_to_json(m.transitions[static_cast<std::size_t>(h - 1)]));
    j["rewards"].push_back(detail::matrix_to_json(m.rewards[static_cast<std::size_t>(h - 1)]));
  }
  return j;
}

inline EpisodicModel model_from_json(const nlohmann::json& j) {
  require(j.is_object(), "model json: expected an object");
  require(j.value("schema", std::string{}) == kModelSchema, std::string("model json: schema must be ") + kModelSchema);
  for (const char* key : {"horizon", "states", "actions", "initial_state", "features", "transitions", "rewards"})
    require(j.contains(key), std::string("model json: missing field '") + key + "'");
  EpisodicModel m;
  m.horizon = j.at("horizon").get<int>();
  m.states = j.at("states").get<Index>();
  m.actions = j.at("actions").get<Index>();
  m.initial_state = j.at("initial_state").get<Index>();
  require(m.horizon >= 1 && m.states >= 1 && m.actions >= 1, "model json: sizes must be positive");
  const auto& f = j.at("features");
  require(f.is_array() && !f.empty() && f[0].is_array(), "model json: features must be a non-empty matrix");
  m.features = FeatureTable(m.states, m.actions,
                            detail::matrix_from_json(f, m.states * m.actions, static_cast<Index>(f[0].size()), "features"));
  const auto& P = j.at("transitions");
  const auto& r = j.at("rewards");
  require(P.is_array() && static_cast<int>(P.size()) == m.horizon, "model json: one transition matrix per stage");
  require(r.is_array() && static_cast<int>(r.size()) == m.horizon, "model json: one reward table per stage");
  for (int h = 0; h < m.horizon; ++h) {
    m.transitions.push_back(detail::matrix_from_json(P[static_cast<std::size_t>(h)], m.states * m.actions, m.states,
                                                     "transitions"));
    m.rewards.push_back(detail::matrix_from_json(r[static_cast<std::size_t>(h)], m.states, m.actions, "rewards"));
  }
  m.validate();
  return m;
}

inline std::string save_model(const EpisodicModel& m) { return model_to_json(m).dump(); }

inline EpisodicModel load_model(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("model json: ") + e.what());
  }
  return model_from_json(j);
}

}  // namespace fgts
