#pragma once

// Sampling-error measurement against Gaussian oracles, convergence-rate fits,
// the regret decomposition identity and regret-growth fits.

#include "fgts/core.hpp"
#include "fgts/envs.hpp"
#include "fgts/posterior.hpp"
#include "fgts/random.hpp"
#include "fgts/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>
#include <vector>

namespace fgts {

/// KL(N(m1, S1) || N(m2, S2)).
inline double gaussian_kl(const Vector& m1, const Matrix& s1, const Vector& m2, const Matrix& s2) {
  const Index d = m1.size();
  require(m2.size() == d && s1.rows() == d && s1.cols() == d && s2.rows() == d && s2.cols() == d,
          "gaussian_kl: shape mismatch");
  const Eigen::LLT<Matrix> l1(s1);
  if (l1.info() != Eigen::Success) throw NumericalError("gaussian_kl: first covariance not positive definite",
                                                        spd_condition_number(s1));
  const Eigen::LLT<Matrix> l2(s2);
  if (l2.info() != Eigen::Success) throw NumericalError("gaussian_kl: second covariance not positive definite",
                                                        spd_condition_number(s2));
  const Vector diff = m2 - m1;
  const double trace = l2.solve(s1).trace();
  const double quad = diff.dot(l2.solve(diff));
  const double logdet2 = 2.0 * l2.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double logdet1 = 2.0 * l1.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return std::max(0.0, 0.5 * (trace + quad - static_cast<double>(d) + logdet2 - logdet1));
}

/// TV <= min(1, sqrt(KL / 2)).
inline double pinsker(double kl) { return std::min(1.0, std::sqrt(std::max(0.0, kl) / 2.0)); }

struct SamplingErrorRecord {
  int episode = 0;
  int stage = 0;
  std::uint64_t iterations = 0;
  double kl = 0.0;
  double tv_bound = 0.0;
};

enum class ChainInit {
  zero,    // w = 0, P = 0
  oracle,  // w ~ oracle, P ~ N(0, I / beta)
};

struct OracleBenchSpec {
  SamplerConfig sampler{};
  std::vector<std::uint64_t> grid;  // iteration counts, ascending
  std::size_t replicates = 1000;
  ChainInit init = ChainInit::zero;
  std::uint64_t key = 0;
  unsigned threads = 1;
  int episode = 0;  // labels only
  int stage = 0;
};

/// Empirical moments of the chain's J-th iterate across replicates, per grid point.
struct ReplicateMoments {
  std::vector<Vector> mean;
  std::vector<Matrix> covariance;
};

/// Runs `spec.replicates` independent chains on `target` and returns the
/// empirical mean and covariance at each grid point. Replicate r uses stream
/// stream_key({key, r}); sums are reduced in a fixed order so the result does
/// not depend on the thread count.
template <GradientTarget T>
ReplicateMoments replicate_moments(const T& target, const GaussianPosterior& oracle, const OracleBenchSpec& spec) {
  const Index d = target.dim();
  require(!spec.grid.empty(), "sampler_error_vs_oracle: empty iteration grid");
  require(std::is_sorted(spec.grid.begin(), spec.grid.end()), "sampler_error_vs_oracle: grid must be ascending");
  require(spec.replicates >= static_cast<std::size_t>(d) + 1,
          "sampler_error_vs_oracle: need at least dim + 1 replicates for a covariance estimate");
  require(oracle.dim() == d, "sampler_error_vs_oracle: oracle dimension mismatch");

  const std::size_t G = spec.grid.size();
  const Vector& centre = oracle.mean();
  constexpr std::size_t kBlock = 64;
  const std::size_t blocks = (spec.replicates + kBlock - 1) / kBlock;

  struct Sums {
    std::vector<Vector> s1;
    std::vector<Matrix> s2;
  };
  auto empty_sums = [&] {
    return Sums{std::vector<Vector>(G, Vector::Zero(d)), std::vector<Matrix>(G, Matrix::Zero(d, d))};
  };
  std::vector<Sums> block_sums(blocks);

  auto run_block = [&](std::size_t b) {
    Sums s = empty_sums();
    const std::size_t lo = b * kBlock, hi = std::min(spec.replicates, lo + kBlock);
    for (std::size_t r = lo; r < hi; ++r) {
      RandomStream init_rng(stream_key({spec.key, static_cast<std::uint64_t>(r), 1}));
      RandomStream rng(stream_key({spec.key, static_cast<std::uint64_t>(r), 0}));
      Vector w0 = spec.init == ChainInit::oracle ? oracle.sample(init_rng) : Vector::Zero(d);
      SamplerState st = initial_state(spec.sampler.kind, std::move(w0));
      if (spec.init == ChainInit::oracle && st.momentum) {
        const double sd = 1.0 / std::sqrt(spec.sampler.inverse_temperature);
        for (Index i = 0; i < d; ++i) (*st.momentum)(i) = sd * init_rng.normal();
      }
      std::uint64_t done = 0;
      for (std::size_t g = 0; g < G; ++g) {
        st = run_chain(std::move(st), target, spec.sampler, spec.grid[g] - done, rng);
        done = spec.grid[g];
        const Vector x = st.position - centre;
        s.s1[g] += x;
        s.s2[g].template selfadjointView<Eigen::Lower>().rankUpdate(x);
      }
    }
    block_sums[b] = std::move(s);
  };

  const unsigned threads = std::max(1u, spec.threads);
  if (threads == 1) {
    for (std::size_t b = 0; b < blocks; ++b) run_block(b);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t b = t; b < blocks; b += threads) run_block(b);
      });
    for (auto& th : pool) th.join();
  }

  Sums total = empty_sums();
  for (const auto& s : block_sums)
    for (std::size_t g = 0; g < G; ++g) {
      total.s1[g] += s.s1[g];
      total.s2[g] += s.s2[g];
    }

  ReplicateMoments out;
  const double n = static_cast<double>(spec.replicates);
  for (std::size_t g = 0; g < G; ++g) {
    const Vector delta = total.s1[g] / n;
    Matrix s2 = total.s2[g].template selfadjointView<Eigen::Lower>();
    Matrix cov = (s2 - n * delta * delta.transpose()) / (n - 1.0);
    out.mean.push_back(centre + delta);
    out.covariance.push_back(0.5 * (cov + cov.transpose()));
  }
  return out;
}

/// Per grid point: KL of the empirical Gaussian fit of the sampler's law to
/// the oracle, and its Pinsker bound. The oracle is tempered to match the
/// sampler (covariance scaled by 1 / beta).
template <GradientTarget T>
std::vector<SamplingErrorRecord> sampler_error_vs_oracle(const T& target, const GaussianPosterior& oracle,
                                                         const OracleBenchSpec& spec) {
  const double beta = spec.sampler.inverse_temperature;
  const GaussianPosterior tempered(beta * oracle.precision(), beta * oracle.precision() * oracle.mean());
  const auto mom = replicate_moments(target, tempered, spec);
  const Matrix oracle_cov = tempered.covariance();
  std::vector<SamplingErrorRecord> out;
  for (std::size_t g = 0; g < spec.grid.size(); ++g) {
    SamplingErrorRecord r;
    r.episode = spec.episode;
    r.stage = spec.stage;
    r.iterations = spec.grid[g];
    try {
      r.kl = gaussian_kl(mom.mean[g], mom.covariance[g], tempered.mean(), oracle_cov);
    } catch (const NumericalError&) {
      // Degenerate empirical law, e.g. every replicate still at its start point.
      r.kl = std::numeric_limits<double>::infinity();
    }
    r.tv_bound = pinsker(r.kl);
    out.push_back(r);
  }
  return out;
}

/// Frozen-dataset form: the stage posterior with lambda = 0 and its conjugate oracle.
inline std::vector<SamplingErrorRecord> sampler_error_vs_oracle(const StageDataset& data, const Vector& targets,
                                                                const FeatureTable& features, double loss_weight,
                                                                const PriorSpec& prior, const OracleBenchSpec& spec) {
  const auto post = StagePosterior::from_dataset(data, targets, features, {loss_weight, 0.0}, prior);
  return sampler_error_vs_oracle(post, exact_gaussian_posterior(post), spec);
}

/// Smallest grid iteration count whose tv_bound is <= eps, or 0 when none is.
inline std::uint64_t iterations_to_reach(const std::vector<SamplingErrorRecord>& curve, double eps) {
  for (const auto& r : curve)
    if (r.tv_bound <= eps) return r.iterations;
  return 0;
}

struct RatePoint {
  double cost;   // N, e.g. gradient evaluations
  double error;  // eps
};

inline double least_squares_slope(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "least_squares_slope: need at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  require(sxx > 0, "least_squares_slope: degenerate abscissae");
  return sxy / sxx;
}

/// Slope of log N against log(1 / eps), after dropping the first
/// `burn_in` fraction of the points.
inline double rate_fit(const std::vector<RatePoint>& curve, double burn_in = 0.2) {
  const auto skip = static_cast<std::size_t>(std::floor(burn_in * static_cast<double>(curve.size())));
  std::vector<double> x, y;
  for (std::size_t i = skip; i < curve.size(); ++i) {
    require(curve[i].cost > 0 && curve[i].error > 0, "rate_fit: costs and errors must be positive");
    x.push_back(std::log(1.0 / curve[i].error));
    y.push_back(std::log(curve[i].cost));
  }
  return least_squares_slope(x, y);
}

/// Slope of log cumulative regret against log T over the second half of the
/// curve; curve[t - 1] is the cumulative regret after t episodes.
inline double sqrt_t_fit(const std::vector<double>& cumulative) {
  const std::size_t n = cumulative.size();
  require(n >= 4, "sqrt_t_fit: need at least four points");
  std::vector<double> x, y;
  for (std::size_t t = n / 2 + 1; t <= n; ++t) {
    if (!(cumulative[t - 1] > 0)) continue;
    x.push_back(std::log(static_cast<double>(t)));
    y.push_back(std::log(cumulative[t - 1]));
  }
  return least_squares_slope(x, y);
}

struct DecompositionCheck {
  double regret = 0.0;          // V*_1(x_1) - V^pi_1(x_1)
  double bellman_sum = 0.0;     // sum_h E_pi[Q_h - r_h - P_h max_a Q_{h+1}]
  double optimism_gap = 0.0;    // V^k_1(x_1) - V*_1(x_1), V^k_1 = max_a Q_1(x_1, a)
  double residual = 0.0;        // |regret - (bellman_sum - optimism_gap)|
};

/// Both sides of the regret decomposition for Q tables Q[h - 1] (S x A) and
/// the policy pi that acts greedily on them, with exact occupancies.
inline DecompositionCheck regret_decomposition_check(const EpisodicModel& m, const std::vector<Matrix>& Q,
                                                     const PolicyTable& pi) {
  require(Q.size() == static_cast<std::size_t>(m.horizon), "regret_decomposition_check: one Q table per stage");
  const StochasticPolicy sp = StochasticPolicy::from(m, pi);
  const auto occ = occupancy(m, sp);
  DecompositionCheck c;
  c.regret = optimal_value(m) - policy_value(m, sp);
  for (int h = 1; h <= m.horizon; ++h) {
    const auto i = static_cast<std::size_t>(h - 1);
    const Vector next = h == m.horizon ? Vector::Zero(m.states) : Vector(Q[i + 1].rowwise().maxCoeff());
    const Matrix err = Q[i] - m.rewards[i] - expected_next(m, h, next);
    c.bellman_sum += (err.cwiseProduct(sp.prob[i]).rowwise().sum()).dot(occ[i]);
  }
  c.optimism_gap = Q[0].row(m.initial_state).maxCoeff() - optimal_value(m);
  c.residual = std::abs(c.regret - (c.bellman_sum - c.optimism_gap));
  return c;
}

}  // namespace fgts
