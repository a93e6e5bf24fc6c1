#pragma once

// Per-stage FGTS posterior over linear Q weights.
//
// Stage energy for weights w (Q(x, a) = <w, phi(x, a)>):
//   E(w) = |w|^2 / (2 s2) + eta * sum_t (y_t - <w, phi_t>)^2 - [h = 1] lambda * max_a <w, phi(x1, a)>
// with prior variance s2, loss weight eta, feel-good weight lambda and
// regression targets y_t = r_t + max_a Q_{h+1}(x'_t, a).

#include "fgts/core.hpp"
#include "fgts/random.hpp"
#include "fgts/samplers.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

namespace fgts {

struct Transition {
  Index state = 0;
  Index action = 0;
  double reward = 0.0;
  Index next_state = 0;
  int episode = 0;
  int stage = 0;  // 1-based
};

/// Append-only replay for one stage.
class StageDataset {
 public:
  explicit StageDataset(int stage) : stage_(stage) { require(stage >= 1, "StageDataset: stage must be >= 1"); }

  void append(const Transition& t) {
    require(t.stage == stage_, "StageDataset: transition for stage " + std::to_string(t.stage) +
                                   " appended to stage " + std::to_string(stage_));
    require(t.reward >= 0.0 && t.reward <= 1.0, "StageDataset: reward outside [0, 1]");
    items_.push_back(t);
  }

  int stage() const { return stage_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::vector<Transition>& transitions() const { return items_; }
  const Transition& operator[](std::size_t i) const { return items_[i]; }

 private:
  int stage_;
  std::vector<Transition> items_;
};

struct PriorSpec {
  double variance = 1.0;

  /// sqrt(d) * H.
  static PriorSpec standard(Index dim, int horizon) { return {std::sqrt(static_cast<double>(dim)) * horizon}; }
  void validate() const { require(variance > 0.0 && std::isfinite(variance), "prior variance must be positive"); }
};

struct FGTSWeights {
  double loss_weight = 1.0;      // eta
  double feelgood_weight = 0.0;  // lambda; 0 gives plain Thompson sampling

  /// eta = 2 / (5 H^2).
  static FGTSWeights standard(int horizon, double feelgood = 0.0) {
    return {2.0 / (5.0 * horizon * horizon), feelgood};
  }
  void validate() const {
    require(loss_weight > 0.0 && std::isfinite(loss_weight), "loss_weight must be positive");
    require(feelgood_weight >= 0.0 && std::isfinite(feelgood_weight), "feelgood_weight must be nonnegative");
  }
};

/// phi(x, a) for a finite state-action space, stored row-major as row x * A + a.
class FeatureTable {
 public:
  FeatureTable() = default;
  FeatureTable(Index states, Index actions, Matrix rows) : states_(states), actions_(actions), rows_(std::move(rows)) {
    require(states >= 1 && actions >= 1, "FeatureTable: need at least one state and action");
    require(rows_.rows() == states * actions, "FeatureTable: expected states * actions rows");
    require(rows_.cols() >= 1, "FeatureTable: feature dimension must be positive");
    require(rows_.allFinite(), "FeatureTable: non-finite feature");
  }

  Index states() const { return states_; }
  Index actions() const { return actions_; }
  Index dim() const { return rows_.cols(); }
  const Matrix& rows() const { return rows_; }

  auto phi(Index x, Index a) const { return rows_.row(x * actions_ + a).transpose(); }
  /// Rows phi(x, .) as an A x d block.
  auto state_block(Index x) const { return rows_.middleRows(x * actions_, actions_); }
  /// Q(x, .) for weights w.
  Vector q_values(Index x, const Vector& w) const { return state_block(x) * w; }

 private:
  Index states_ = 0;
  Index actions_ = 0;
  Matrix rows_;
};

/// Lowest index among maximisers.
inline Index argmax_lowest(const Vector& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

/// Features of the current episode's initial state; only stage 1 carries it.
struct FeelGoodContext {
  Matrix action_features;  // A x d, row a = phi(x1, a)
};

inline FeelGoodContext feelgood_context(const FeatureTable& features, Index initial_state) {
  return {features.state_block(initial_state)};
}

/// y_t = r_t + V_{h+1}(x'_t), where next_values[x'] = max_a Q_{h+1}(x', a) of
/// the truncated next-stage Q. Pass an empty vector at the last stage.
inline Vector regression_targets(const StageDataset& data, int horizon, const Vector& next_values) {
  require(data.stage() <= horizon, "regression_targets: stage beyond horizon");
  const bool terminal = data.stage() == horizon;
  require(terminal == (next_values.size() == 0),
          "regression_targets: next-stage values must be given exactly when h < H");
  Vector y(static_cast<Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Transition& t = data[i];
    double v = 0.0;
    if (!terminal) {
      require(t.next_state >= 0 && t.next_state < next_values.size(), "regression_targets: next state out of range");
      v = next_values(t.next_state);
    }
    y(static_cast<Index>(i)) = t.reward + v;
  }
  return y;
}

namespace detail {

inline void check_posterior_inputs(const Vector& w, const StageDataset& data, const Vector& targets,
                                   const FeatureTable& features, const std::optional<FeelGoodContext>& fg) {
  require(w.size() == features.dim(), "posterior: weight dimension does not match features");
  require(targets.size() == static_cast<Index>(data.size()), "posterior: one target per transition required");
  require(fg.has_value() == (data.stage() == 1), "posterior: feel-good context must be given exactly at stage 1");
  if (fg) require(fg->action_features.cols() == features.dim(), "posterior: feel-good features have wrong width");
}

}  // namespace detail

/// Direct-sum evaluation of the stage energy.
inline double neg_log_posterior(const Vector& w, const StageDataset& data, const Vector& targets,
                                const FeatureTable& features, const FGTSWeights& weights, const PriorSpec& prior,
                                const std::optional<FeelGoodContext>& fg) {
  detail::check_posterior_inputs(w, data, targets, features, fg);
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Transition& t = data[i];
    const double r = targets(static_cast<Index>(i)) - features.phi(t.state, t.action).dot(w);
    loss += r * r;
  }
  double e = w.squaredNorm() / (2.0 * prior.variance) + weights.loss_weight * loss;
  if (fg && weights.feelgood_weight > 0.0) e -= weights.feelgood_weight * (fg->action_features * w).maxCoeff();
  return e;
}

inline Vector neg_log_posterior_grad(const Vector& w, const StageDataset& data, const Vector& targets,
                                     const FeatureTable& features, const FGTSWeights& weights, const PriorSpec& prior,
                                     const std::optional<FeelGoodContext>& fg) {
  detail::check_posterior_inputs(w, data, targets, features, fg);
  Vector g = w / prior.variance;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Transition& t = data[i];
    const auto phi = features.phi(t.state, t.action);
    g -= 2.0 * weights.loss_weight * (targets(static_cast<Index>(i)) - phi.dot(w)) * phi;
  }
  if (fg && weights.feelgood_weight > 0.0) {
    const Index best = argmax_lowest(fg->action_features * w);
    g -= weights.feelgood_weight * fg->action_features.row(best).transpose();
  }
  return g;
}

/// Sufficient statistics of one stage's replay: the Gram matrix sum phi phi'
/// and transition counts keyed by (x, a, x'). Targets change every episode
/// while the data only grows, so the linear term is rebuilt from the counts.
class StageStatistics {
 public:
  StageStatistics() = default;
  StageStatistics(const FeatureTable* features, int stage)
      : features_(features), stage_(stage), gram_(Matrix::Zero(features->dim(), features->dim())) {}

  void add(const Transition& t) {
    require(t.stage == stage_, "StageStatistics: stage mismatch");
    const auto phi = features_->phi(t.state, t.action);
    gram_.selfadjointView<Eigen::Lower>().rankUpdate(phi);
    Cell& c = cells_[key(t)];
    c.count += 1;
    c.reward_sum += t.reward;
    c.reward_sq_sum += t.reward * t.reward;
    ++size_;
  }

  int stage() const { return stage_; }
  std::size_t size() const { return size_; }
  Index dim() const { return gram_.rows(); }
  const FeatureTable& features() const { return *features_; }

  /// Full symmetric Gram matrix.
  Matrix gram() const {
    Matrix g = gram_.selfadjointView<Eigen::Lower>();
    return g;
  }

  struct TargetMoments {
    Vector linear;       // sum_t y_t phi_t
    double square = 0;   // sum_t y_t^2
  };

  /// Moments of y_t = r_t + next_values[x'_t] (empty next_values: y_t = r_t).
  TargetMoments target_moments(const Vector& next_values) const {
    TargetMoments m{Vector::Zero(dim()), 0.0};
    const Index S = features_->states();
    const Index A = features_->actions();
    for (const auto& [k, c] : cells_) {
      const Index xn = static_cast<Index>(k % static_cast<std::uint64_t>(S));
      const Index xa = static_cast<Index>(k / static_cast<std::uint64_t>(S));
      const double v = next_values.size() == 0 ? 0.0 : next_values(xn);
      const double ysum = c.reward_sum + c.count * v;
      m.linear += ysum * features_->phi(xa / A, xa % A);
      m.square += c.reward_sq_sum + 2.0 * v * c.reward_sum + c.count * v * v;
    }
    return m;
  }

  /// Visit counts per (x, a), row-major like FeatureTable.
  std::vector<double> visit_counts() const {
    std::vector<double> n(static_cast<std::size_t>(features_->states() * features_->actions()), 0.0);
    const auto S = static_cast<std::uint64_t>(features_->states());
    for (const auto& [k, c] : cells_) n[static_cast<std::size_t>(k / S)] += c.count;
    return n;
  }

 private:
  struct Cell {
    double count = 0;
    double reward_sum = 0;
    double reward_sq_sum = 0;
  };

  std::uint64_t key(const Transition& t) const {
    const auto S = static_cast<std::uint64_t>(features_->states());
    const auto A = static_cast<std::uint64_t>(features_->actions());
    require(t.state >= 0 && static_cast<std::uint64_t>(t.state) < S && t.action >= 0 &&
                static_cast<std::uint64_t>(t.action) < A && t.next_state >= 0 &&
                static_cast<std::uint64_t>(t.next_state) < S,
            "StageStatistics: transition indices out of range");
    return (static_cast<std::uint64_t>(t.state) * A + static_cast<std::uint64_t>(t.action)) * S +
           static_cast<std::uint64_t>(t.next_state);
  }

  const FeatureTable* features_ = nullptr;
  int stage_ = 1;
  Matrix gram_;  // lower triangle only
  std::map<std::uint64_t, Cell> cells_;
  std::size_t size_ = 0;
};

/// The stage energy in quadratic form, usable as a sampler target:
///   E(w) = w'(I/s2 + 2 eta G)w / 2 - 2 eta b'w + eta yy - lambda max_a <w, phi(x1, a)>
/// Each gradient costs O(d^2) regardless of the dataset size.
class StagePosterior {
 public:
  StagePosterior(const Matrix& gram, Vector linear, double square, const FGTSWeights& weights,
                 const PriorSpec& prior, std::optional<FeelGoodContext> fg = std::nullopt)
      : weights_(weights), prior_(prior), fg_(std::move(fg)) {
    weights.validate();
    prior.validate();
    require(gram.rows() == gram.cols() && gram.rows() == linear.size(), "StagePosterior: shape mismatch");
    if (fg_) require(fg_->action_features.cols() == gram.rows(), "StagePosterior: feel-good width mismatch");
    precision_ = 2.0 * weights.loss_weight * gram;
    precision_.diagonal().array() += 1.0 / prior.variance;
    shift_ = 2.0 * weights.loss_weight * linear;
    constant_ = weights.loss_weight * square;
  }

  static StagePosterior from_statistics(const StageStatistics& stats, const Vector& next_values,
                                        const FGTSWeights& weights, const PriorSpec& prior,
                                        std::optional<FeelGoodContext> fg = std::nullopt) {
    const auto m = stats.target_moments(next_values);
    return StagePosterior(stats.gram(), m.linear, m.square, weights, prior, std::move(fg));
  }

  static StagePosterior from_dataset(const StageDataset& data, const Vector& targets, const FeatureTable& features,
                                     const FGTSWeights& weights, const PriorSpec& prior,
                                     std::optional<FeelGoodContext> fg = std::nullopt) {
    require(targets.size() == static_cast<Index>(data.size()), "StagePosterior: one target per transition");
    Matrix gram = Matrix::Zero(features.dim(), features.dim());
    Vector linear = Vector::Zero(features.dim());
    double square = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Transition& t = data[i];
      const Vector phi = features.phi(t.state, t.action);
      const double y = targets(static_cast<Index>(i));
      gram.noalias() += phi * phi.transpose();
      linear += y * phi;
      square += y * y;
    }
    return StagePosterior(gram, linear, square, weights, prior, std::move(fg));
  }

  Index dim() const { return shift_.size(); }

  double value(const Vector& w) const {
    double e = 0.5 * w.dot(precision_ * w) - shift_.dot(w) + constant_;
    if (feelgood_active()) e -= weights_.feelgood_weight * (fg_->action_features * w).maxCoeff();
    return e;
  }

  Vector gradient(const Vector& w) const {
    Vector g = precision_ * w - shift_;
    if (feelgood_active()) {
      const Index best = argmax_lowest(fg_->action_features * w);
      g -= weights_.feelgood_weight * fg_->action_features.row(best).transpose();
    }
    return g;
  }

  /// Hessian of the smooth part; also the conjugate posterior precision.
  const Matrix& precision() const { return precision_; }
  /// Right-hand side of the conjugate normal equations, 2 eta sum y phi.
  const Vector& shift() const { return shift_; }
  bool feelgood_active() const { return fg_.has_value() && weights_.feelgood_weight > 0.0; }

 private:
  FGTSWeights weights_;
  PriorSpec prior_;
  std::optional<FeelGoodContext> fg_;
  Matrix precision_;
  Vector shift_;
  double constant_ = 0.0;
};

static_assert(EnergyTarget<StagePosterior>);

/// Gaussian with a cached Cholesky factor of its precision.
class GaussianPosterior {
 public:
  /// Conditioning above this is reported through ill_conditioned().
  static constexpr double kConditionWarning = 1e12;

  explicit GaussianPosterior(const Matrix& precision, const Vector& shift) {
    require(precision.rows() == precision.cols() && precision.rows() == shift.size(),
            "GaussianPosterior: shape mismatch");
    llt_.compute(precision);
    if (llt_.info() != Eigen::Success) throw NumericalError("posterior precision is not positive definite",
                                                            spd_condition_number(precision));
    precision_ = precision;
    mean_ = llt_.solve(shift);
    condition_ = spd_condition_number(precision);
  }

  const Vector& mean() const { return mean_; }
  const Matrix& precision() const { return precision_; }
  Matrix covariance() const { return llt_.solve(Matrix::Identity(dim(), dim())); }
  double condition_number() const { return condition_; }
  bool ill_conditioned() const { return condition_ > kConditionWarning; }
  Index dim() const { return mean_.size(); }

  /// mean + L^{-T} z where precision = L L'.
  template <GaussianSource R>
  Vector sample(R& rng) const {
    Vector z(dim());
    for (Index i = 0; i < dim(); ++i) z(i) = rng.normal();
    return mean_ + llt_.matrixU().solve(z);
  }

 private:
  Eigen::LLT<Matrix> llt_;
  Matrix precision_;
  Vector mean_;
  double condition_ = 1.0;
};

/// Conjugate posterior of the stage energy with lambda = 0:
/// precision I/s2 + 2 eta sum phi phi', mean = precision^{-1} (2 eta sum y phi).
inline GaussianPosterior exact_gaussian_posterior(const StageDataset& data, const Vector& targets,
                                                  const FeatureTable& features, double loss_weight,
                                                  const PriorSpec& prior) {
  const auto post = StagePosterior::from_dataset(data, targets, features, {loss_weight, 0.0}, prior);
  return GaussianPosterior(post.precision(), post.shift());
}

inline GaussianPosterior exact_gaussian_posterior(const StagePosterior& post) {
  return GaussianPosterior(post.precision(), post.shift());
}

struct PosteriorCurvature {
  double lower;      // m
  double upper;      // M
  double condition;  // M / m
};

inline PosteriorCurvature hessian_bounds(const Matrix& precision) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(precision, Eigen::EigenvaluesOnly);
  const double m = eig.eigenvalues().minCoeff();
  const double M = eig.eigenvalues().maxCoeff();
  return {m, M, M / m};
}

inline PosteriorCurvature hessian_bounds(const StageDataset& data, const FeatureTable& features, double loss_weight,
                                         const PriorSpec& prior) {
  const Vector zero_targets = Vector::Zero(static_cast<Index>(data.size()));
  return hessian_bounds(StagePosterior::from_dataset(data, zero_targets, features, {loss_weight, 0.0}, prior).precision());
}

}  // namespace fgts
