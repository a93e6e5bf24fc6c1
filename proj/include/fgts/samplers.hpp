#pragma once

// Approximate posterior samplers for densities p ∝ exp(-L(w)).
//
// Every sampler is a pure single-step map
//     (SamplerState, target, config, noise source) -> SamplerState
// that evaluates the gradient of L exactly once. Chains are built by
// run_chain(); nothing here keeps hidden state, so independent chains can run
// on different threads as long as each owns its state and its stream.

#include "fgts/core.hpp"
#include "fgts/random.hpp"

#include <cmath>
#include <concepts>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

namespace fgts {

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

template <class T>
concept GradientTarget = requires(const T& t, const Vector& w) {
  { t.dim() } -> std::convertible_to<Index>;
  { t.gradient(w) } -> std::convertible_to<Vector>;
};

template <class T>
concept EnergyTarget = GradientTarget<T> && requires(const T& t, const Vector& w) {
  { t.value(w) } -> std::convertible_to<double>;
};

struct HessianBounds {
  double lower = 1.0;  // m
  double upper = 1.0;  // M
  double condition() const { return upper / lower; }
};

/// L(w) = (w - mean)' A (w - mean) / 2 with symmetric positive definite A.
class GaussianTarget {
 public:
  GaussianTarget(Vector mean, Matrix precision) : mean_(std::move(mean)), precision_(std::move(precision)) {
    require(precision_.rows() == precision_.cols() && precision_.rows() == mean_.size(),
            "GaussianTarget: precision must be square and match the mean");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(precision_);
    require(eig.eigenvalues().minCoeff() > 0.0, "GaussianTarget: precision must be positive definite");
    bounds_ = {eig.eigenvalues().minCoeff(), eig.eigenvalues().maxCoeff()};
    covariance_ = eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
    covariance_ = 0.5 * (covariance_ + covariance_.transpose()).eval();
  }

  /// Diagonal precision with eigenvalues spread geometrically from `lower` to `lower * condition`.
  static GaussianTarget ill_conditioned(Index dim, double condition, double lower = 1.0, Vector mean = {}) {
    require(dim >= 1 && condition >= 1.0 && lower > 0.0, "GaussianTarget: bad shape");
    Vector diag(dim);
    for (Index i = 0; i < dim; ++i) {
      const double frac = dim == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(dim - 1);
      diag(i) = lower * std::pow(condition, frac);
    }
    if (mean.size() == 0) mean = Vector::Zero(dim);
    return GaussianTarget(std::move(mean), diag.asDiagonal().toDenseMatrix());
  }

  Index dim() const { return mean_.size(); }
  double value(const Vector& w) const {
    const Vector d = w - mean_;
    return 0.5 * d.dot(precision_ * d);
  }
  Vector gradient(const Vector& w) const { return precision_ * (w - mean_); }

  const Vector& mean() const { return mean_; }
  const Matrix& precision() const { return precision_; }
  const Matrix& covariance() const { return covariance_; }
  HessianBounds hessian_bounds() const { return bounds_; }

 private:
  Vector mean_;
  Matrix precision_;
  Matrix covariance_;
  HessianBounds bounds_;
};

/// Ad-hoc target from callables; `value` may be empty.
class FunctionTarget {
 public:
  using Grad = std::function<Vector(const Vector&)>;
  using Value = std::function<double(const Vector&)>;

  FunctionTarget(Index dim, Grad grad, Value value = {})
      : dim_(dim), grad_(std::move(grad)), value_(std::move(value)) {}

  Index dim() const { return dim_; }
  Vector gradient(const Vector& w) const { return grad_(w); }
  double value(const Vector& w) const {
    require(static_cast<bool>(value_), "FunctionTarget: no value function");
    return value_(w);
  }
  bool has_value() const { return static_cast<bool>(value_); }

 private:
  Index dim_;
  Grad grad_;
  Value value_;
};

// ---------------------------------------------------------------------------
// Configuration and state
// ---------------------------------------------------------------------------

struct LangevinConfig {
  double step_size = 0.01;
  double inverse_temperature = 1.0;
  bool noise = true;  // false is the beta = infinity limit

  void validate() const {
    require(step_size > 0.0 && std::isfinite(step_size), "step_size must be positive");
    require(inverse_temperature > 0.0, "inverse_temperature must be positive");
  }
};

struct UnderdampedConfig {
  double step_size = 0.01;
  double inverse_temperature = 1.0;
  double friction = 1.0;
  bool noise = true;

  void validate() const {
    require(step_size > 0.0 && std::isfinite(step_size), "step_size must be positive");
    require(inverse_temperature > 0.0, "inverse_temperature must be positive");
    require(friction > 0.0 && std::isfinite(friction), "friction must be positive");
  }
  /// The explicit schemes need 0 < 1 - friction * step_size < 1.
  void validate_explicit() const {
    validate();
    require(friction * step_size < 1.0, "friction * step_size must be < 1 for the Euler-Maruyama scheme");
  }
};

struct AdaptiveBiasConfig {
  double bias_factor = 0.1;
  double decay_mean = 0.9;
  double decay_var = 0.99;
  double regularizer = 1e-8;

  void validate() const {
    require(bias_factor >= 0.0, "bias_factor must be nonnegative");
    require(decay_mean >= 0.0 && decay_mean < 1.0, "decay_mean must lie in [0, 1)");
    require(decay_var >= 0.0 && decay_var < 1.0, "decay_var must lie in [0, 1)");
    require(regularizer > 0.0, "regularizer must be positive");
  }
};

enum class SamplerKind { lmc, adaptive_lmc, ulmc_em, ulmc_exact, adaptive_ulmc };

inline bool is_underdamped(SamplerKind k) {
  return k == SamplerKind::ulmc_em || k == SamplerKind::ulmc_exact || k == SamplerKind::adaptive_ulmc;
}
inline bool is_adaptive(SamplerKind k) { return k == SamplerKind::adaptive_lmc || k == SamplerKind::adaptive_ulmc; }

inline std::string_view to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::lmc: return "lmc";
    case SamplerKind::adaptive_lmc: return "adaptive_lmc";
    case SamplerKind::ulmc_em: return "ulmc_em";
    case SamplerKind::ulmc_exact: return "ulmc_exact";
    case SamplerKind::adaptive_ulmc: return "adaptive_ulmc";
  }
  return "?";
}

inline SamplerKind sampler_kind_from_string(std::string_view s) {
  for (auto k : {SamplerKind::lmc, SamplerKind::adaptive_lmc, SamplerKind::ulmc_em, SamplerKind::ulmc_exact,
                 SamplerKind::adaptive_ulmc})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown sampler kind '" + std::string(s) + "'");
}

struct SamplerState {
  Vector position;
  std::optional<Vector> momentum;   // underdamped variants only
  std::optional<Vector> bias_mean;  // adaptive variants only
  std::optional<Vector> bias_var;
  std::uint64_t iteration = 0;
  std::uint64_t grad_evals = 0;

  Index dim() const { return position.size(); }
};

/// Zero momentum and accumulators, shaped for `kind`.
inline SamplerState initial_state(SamplerKind kind, Vector position) {
  SamplerState s;
  const Index d = position.size();
  s.position = std::move(position);
  if (is_underdamped(kind)) s.momentum = Vector::Zero(d);
  if (is_adaptive(kind)) {
    s.bias_mean = Vector::Zero(d);
    s.bias_var = Vector::Zero(d);
  }
  return s;
}

/// One bundle covering every sampler kind; the step functions take the relevant slice.
struct SamplerConfig {
  SamplerKind kind = SamplerKind::lmc;
  double step_size = 0.01;
  double inverse_temperature = 1.0;
  double friction = 1.0;
  bool noise = true;
  AdaptiveBiasConfig bias{};

  LangevinConfig langevin() const { return {step_size, inverse_temperature, noise}; }
  UnderdampedConfig underdamped() const { return {step_size, inverse_temperature, friction, noise}; }
};

// ---------------------------------------------------------------------------
// Single steps
// ---------------------------------------------------------------------------

namespace detail {

template <GradientTarget T>
Vector checked_gradient(const T& target, const SamplerState& state) {
  require(target.dim() == state.dim(), "sampler: state dimension " + std::to_string(state.dim()) +
                                           " does not match target dimension " + std::to_string(target.dim()));
  Vector g = target.gradient(state.position);
  require(g.size() == state.dim(), "sampler: gradient has wrong length");
  if (!g.allFinite()) throw NumericalDivergence("non-finite gradient", state.iteration + 1);
  return g;
}

template <GaussianSource R>
void add_noise(Vector& v, double scale, R& rng) {
  for (Index i = 0; i < v.size(); ++i) v(i) += scale * rng.normal();
}

inline void finish(SamplerState& s) {
  ++s.iteration;
  ++s.grad_evals;
  if (!s.position.allFinite() || (s.momentum && !s.momentum->allFinite()))
    throw NumericalDivergence("non-finite iterate", s.iteration);
}

inline void require_momentum(const SamplerState& s) {
  require(s.momentum.has_value(), "underdamped sampler needs a momentum vector");
  require(s.momentum->size() == s.dim(), "momentum dimension mismatch");
}

inline void require_accumulators(const SamplerState& s) {
  require(s.bias_mean.has_value() && s.bias_var.has_value(), "adaptive sampler needs bias accumulators");
  require(s.bias_mean->size() == s.dim() && s.bias_var->size() == s.dim(), "bias accumulator dimension mismatch");
}

/// Updates (m, v) in place and returns g + a * m / sqrt(v + reg).
inline Vector adaptive_drift(SamplerState& s, const Vector& g, const AdaptiveBiasConfig& b) {
  Vector& m = *s.bias_mean;
  Vector& v = *s.bias_var;
  m = b.decay_mean * m + (1.0 - b.decay_mean) * g;
  v = b.decay_var * v + (1.0 - b.decay_var) * g.cwiseProduct(g);
  return g + b.bias_factor * m.cwiseQuotient((v.array() + b.regularizer).sqrt().matrix());
}

}  // namespace detail

/// w' = w - tau grad L(w) + sqrt(2 tau / beta) xi.
template <GradientTarget T, GaussianSource R>
SamplerState lmc_step(SamplerState state, const T& target, const LangevinConfig& cfg, R& rng) {
  cfg.validate();
  require(!state.momentum.has_value(), "lmc_step: state carries a momentum vector");
  const Vector g = detail::checked_gradient(target, state);
  state.position -= cfg.step_size * g;
  if (cfg.noise) detail::add_noise(state.position, std::sqrt(2.0 * cfg.step_size / cfg.inverse_temperature), rng);
  detail::finish(state);
  return state;
}

/// Euler-Maruyama discretisation of the underdamped diffusion. The position
/// moves with the pre-update momentum:
///   w' = w + tau P
///   P' = P - tau grad L(w) - gamma tau P + sqrt(2 gamma tau / beta) xi
template <GradientTarget T, GaussianSource R>
SamplerState ulmc_step_em(SamplerState state, const T& target, const UnderdampedConfig& cfg, R& rng) {
  cfg.validate_explicit();
  detail::require_momentum(state);
  const Vector g = detail::checked_gradient(target, state);
  Vector& p = *state.momentum;
  const double tau = cfg.step_size;
  state.position += tau * p;
  p = (1.0 - cfg.friction * tau) * p - tau * g;
  if (cfg.noise) detail::add_noise(p, std::sqrt(2.0 * cfg.friction * tau / cfg.inverse_temperature), rng);
  detail::finish(state);
  return state;
}

/// Below this value of friction * step_size the closed-form integrals are
/// treated as degenerate and ulmc_step_exact refuses to run.
inline constexpr double kMinFrictionStep = 1e-8;

/// Moments of one exact step of the damped diffusion with the gradient frozen
/// at its start value. Coordinates decouple, so one 2x2 law serves all of them.
struct UlmcStepLaw {
  double pos_from_momentum;  // (1 - e^{-x}) / gamma
  double pos_from_gradient;  // (x - (1 - e^{-x})) / gamma^2, enters with a minus sign
  double mom_decay;          // e^{-x}
  double mom_from_gradient;  // (1 - e^{-x}) / gamma, enters with a minus sign
  double var_pos;
  double cov_pos_mom;
  double var_mom;
};

inline UlmcStepLaw ulmc_exact_law(const UnderdampedConfig& cfg) {
  const double gamma = cfg.friction;
  const double tau = cfg.step_size;
  const double beta = cfg.inverse_temperature;
  const double x = gamma * tau;
  require(x >= kMinFrictionStep, "ulmc_step_exact: friction * step_size below " + std::to_string(kMinFrictionStep));

  const double e1 = -std::expm1(-x);      // 1 - e^{-x}
  const double e2 = -std::expm1(-2 * x);  // 1 - e^{-2x}
  double x_minus_e1;                      // x - (1 - e^{-x})
  double pos_integral;                    // x - 2(1 - e^{-x}) + (1 - e^{-2x}) / 2
  if (x < 1e-2) {
    const double x2 = x * x, x3 = x2 * x;
    x_minus_e1 = x2 / 2 - x3 / 6 + x2 * x2 / 24 - x2 * x3 / 120;
    pos_integral = x3 / 3 - x2 * x2 / 4 + 7 * x2 * x3 / 60 - x3 * x3 / 24;
  } else {
    x_minus_e1 = x - e1;
    pos_integral = x - 2 * e1 + e2 / 2;
  }

  UlmcStepLaw law{};
  law.pos_from_momentum = e1 / gamma;
  law.pos_from_gradient = x_minus_e1 / (gamma * gamma);
  law.mom_decay = std::exp(-x);
  law.mom_from_gradient = e1 / gamma;
  if (cfg.noise) {
    // Diffusion coefficient sigma^2 = 2 gamma / beta.
    law.var_mom = e2 / beta;
    law.cov_pos_mom = e1 * e1 / (beta * gamma);
    law.var_pos = 2.0 * pos_integral / (beta * gamma * gamma);
  }
  return law;
}

/// Exact draw from the damped diffusion over [0, tau] with the gradient held
/// at grad L(w).
template <GradientTarget T, GaussianSource R>
SamplerState ulmc_step_exact(SamplerState state, const T& target, const UnderdampedConfig& cfg, R& rng) {
  cfg.validate();
  detail::require_momentum(state);
  const UlmcStepLaw law = ulmc_exact_law(cfg);
  const Vector g = detail::checked_gradient(target, state);
  Vector& w = state.position;
  Vector& p = *state.momentum;

  w += law.pos_from_momentum * p - law.pos_from_gradient * g;
  p = law.mom_decay * p - law.mom_from_gradient * g;

  if (cfg.noise) {
    const double sd_w = std::sqrt(law.var_pos);
    const double c = sd_w > 0 ? law.cov_pos_mom / sd_w : 0.0;
    const double sd_p_cond = std::sqrt(std::max(0.0, law.var_mom - c * c));
    for (Index i = 0; i < w.size(); ++i) {
      const double z1 = rng.normal();
      const double z2 = rng.normal();
      w(i) += sd_w * z1;
      p(i) += c * z1 + sd_p_cond * z2;
    }
  }
  detail::finish(state);
  return state;
}

/// Underdamped step with the adaptive bias term:
///   m' = a1 m + (1 - a1) g,   v' = a2 v + (1 - a2) g*g
///   P' = (1 - gamma tau) P + tau (g + a m' / sqrt(v' + reg)) + sqrt(2 gamma tau / beta) xi
///   w' = w - tau P'
/// Note the sign convention: here P tracks the ascent direction and the
/// position moves with the freshly updated momentum.
template <GradientTarget T, GaussianSource R>
SamplerState adaptive_ulmc_step(SamplerState state, const T& target, const UnderdampedConfig& cfg,
                                const AdaptiveBiasConfig& bias, R& rng) {
  cfg.validate_explicit();
  bias.validate();
  detail::require_momentum(state);
  detail::require_accumulators(state);
  const Vector g = detail::checked_gradient(target, state);
  const Vector drift = detail::adaptive_drift(state, g, bias);
  const double tau = cfg.step_size;
  Vector& p = *state.momentum;
  p = (1.0 - cfg.friction * tau) * p + tau * drift;
  if (cfg.noise) detail::add_noise(p, std::sqrt(2.0 * cfg.friction * tau / cfg.inverse_temperature), rng);
  state.position -= tau * p;
  detail::finish(state);
  return state;
}

/// Overdamped counterpart of adaptive_ulmc_step:
///   w' = w - tau (g + a m' / sqrt(v' + reg)) + sqrt(2 tau / beta) xi
template <GradientTarget T, GaussianSource R>
SamplerState adaptive_lmc_step(SamplerState state, const T& target, const LangevinConfig& cfg,
                               const AdaptiveBiasConfig& bias, R& rng) {
  cfg.validate();
  bias.validate();
  require(!state.momentum.has_value(), "adaptive_lmc_step: state carries a momentum vector");
  detail::require_accumulators(state);
  const Vector g = detail::checked_gradient(target, state);
  const Vector drift = detail::adaptive_drift(state, g, bias);
  state.position -= cfg.step_size * drift;
  if (cfg.noise) detail::add_noise(state.position, std::sqrt(2.0 * cfg.step_size / cfg.inverse_temperature), rng);
  detail::finish(state);
  return state;
}

template <GradientTarget T, GaussianSource R>
SamplerState sampler_step(SamplerState state, const T& target, const SamplerConfig& cfg, R& rng) {
  switch (cfg.kind) {
    case SamplerKind::lmc: return lmc_step(std::move(state), target, cfg.langevin(), rng);
    case SamplerKind::adaptive_lmc: return adaptive_lmc_step(std::move(state), target, cfg.langevin(), cfg.bias, rng);
    case SamplerKind::ulmc_em: return ulmc_step_em(std::move(state), target, cfg.underdamped(), rng);
    case SamplerKind::ulmc_exact: return ulmc_step_exact(std::move(state), target, cfg.underdamped(), rng);
    case SamplerKind::adaptive_ulmc:
      return adaptive_ulmc_step(std::move(state), target, cfg.underdamped(), cfg.bias, rng);
  }
  throw ConfigError("unknown sampler kind");
}

/// Applies `iterations` steps. grad_evals grows by exactly `iterations`.
template <GradientTarget T, GaussianSource R>
SamplerState run_chain(SamplerState state, const T& target, const SamplerConfig& cfg, std::uint64_t iterations,
                       R& rng) {
  for (std::uint64_t j = 0; j < iterations; ++j) state = sampler_step(std::move(state), target, cfg, rng);
  return state;
}

// ---------------------------------------------------------------------------
// Step sizes and iteration counts
// ---------------------------------------------------------------------------

enum class ScheduleFamily { lmc, ulmc };

inline ScheduleFamily schedule_family(SamplerKind k) {
  return is_underdamped(k) ? ScheduleFamily::ulmc : ScheduleFamily::lmc;
}

/// Step size tau_{k,h} for episode k from the sampling-complexity analysis:
///   LMC:  c d ln(d H K) / (M H^2 k^2 kappa)
///   ULMC: c sqrt(d ln(d H K)) / (M H k)
/// The analysis fixes rates only, so the constant c is a free multiplier.
inline double step_size_schedule(ScheduleFamily family, double episode, double stage, double hessian_upper,
                                 double dim, double horizon, double episodes, double condition, double c = 1.0) {
  require(episode > 0 && stage > 0 && hessian_upper > 0 && dim > 0 && horizon > 0 && episodes > 0 && c > 0,
          "step_size_schedule: all inputs must be positive");
  const double log_term = std::log(dim * horizon * episodes);
  require(log_term > 0, "step_size_schedule: d * H * K must exceed 1");
  double tau = 0.0;
  if (family == ScheduleFamily::lmc) {
    require(condition >= 1.0, "step_size_schedule: condition number must be >= 1");
    tau = c * dim * log_term / (hessian_upper * horizon * horizon * episode * episode * condition);
  } else {
    tau = c * std::sqrt(dim * log_term) / (hessian_upper * horizon * episode);
  }
  return tau;
}

/// Iterations for the slowest mode of a strongly log-concave target to
/// contract by `tolerance`: LMC contracts at rate tau m per step; underdamped
/// chains at tau (gamma - sqrt(gamma^2 - 4m)) / 2 (gamma / 2 when underdamped).
inline std::uint64_t contraction_iterations(ScheduleFamily family, double step_size, double hessian_lower,
                                            double friction, double tolerance, std::uint64_t max_iterations) {
  require(step_size > 0 && hessian_lower > 0 && tolerance > 0 && tolerance < 1, "contraction_iterations: bad input");
  double rate = step_size * hessian_lower;
  if (family == ScheduleFamily::ulmc) {
    require(friction > 0, "contraction_iterations: friction must be positive");
    const double disc = friction * friction - 4.0 * hessian_lower;
    rate = step_size * 0.5 * (friction - std::sqrt(std::max(0.0, disc)));
  }
  const double n = std::ceil(std::log(1.0 / tolerance) / rate);
  if (!(n < static_cast<double>(max_iterations))) return max_iterations;
  return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(n));
}

}  // namespace fgts
