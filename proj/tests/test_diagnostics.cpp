#include "fgts/diagnostics.hpp"
#include "models.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace fgts {
namespace {

Matrix random_spd(Index d, RandomStream& rng) {
  Matrix a(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) a(i, j) = rng.normal();
  return a * a.transpose() + 0.1 * Matrix::Identity(d, d);
}

TEST(GaussianKl, Examples) {
  const Matrix one = Matrix::Identity(1, 1);
  EXPECT_NEAR(gaussian_kl(Vector::Zero(1), one, Vector::Ones(1), one), 0.5, 1e-14);
  EXPECT_NEAR(pinsker(0.5), 0.5, 1e-14);
  RandomStream rng(1);
  const Matrix s = random_spd(4, rng);
  const Vector m = Vector::LinSpaced(4, -1, 2);
  EXPECT_NEAR(gaussian_kl(m, s, m, s), 0.0, 1e-12);
  // Variance ratio 2 in one dimension: (2 - 1 - ln 2) / 2.
  EXPECT_NEAR(gaussian_kl(Vector::Zero(1), 2 * one, Vector::Zero(1), one), 0.5 * (1.0 - std::log(2.0)), 1e-14);
}

TEST(GaussianKl, NonnegativeOnRandomPairs) {
  RandomStream rng(7);
  for (int i = 0; i < 1000; ++i) {
    const Index d = 1 + static_cast<Index>(rng.below(5));
    Vector m1(d), m2(d);
    for (Index j = 0; j < d; ++j) {
      m1(j) = rng.normal();
      m2(j) = rng.normal();
    }
    const double kl = gaussian_kl(m1, random_spd(d, rng), m2, random_spd(d, rng));
    EXPECT_GE(kl, 0.0);
    EXPECT_TRUE(std::isfinite(kl));
  }
}

TEST(GaussianKl, RejectsBadCovariances) {
  const Matrix singular = Matrix::Zero(2, 2);
  EXPECT_THROW(gaussian_kl(Vector::Zero(2), singular, Vector::Zero(2), Matrix::Identity(2, 2)), NumericalError);
  EXPECT_THROW(gaussian_kl(Vector::Zero(2), Matrix::Identity(2, 2), Vector::Zero(2), singular), NumericalError);
  EXPECT_THROW(gaussian_kl(Vector::Zero(3), Matrix::Identity(2, 2), Vector::Zero(2), Matrix::Identity(2, 2)),
               ConfigError);
}

TEST(Pinsker, CapsAtOne) {
  EXPECT_EQ(pinsker(0.0), 0.0);
  EXPECT_EQ(pinsker(2.0), 1.0);
  EXPECT_EQ(pinsker(50.0), 1.0);
  for (double kl : {0.01, 0.3, 1.9}) EXPECT_NEAR(pinsker(kl), std::sqrt(kl / 2), 1e-15);
}

GaussianTarget small_target() {
  Matrix p(3, 3);
  p << 2.0, 0.3, 0.0, 0.3, 1.5, 0.2, 0.0, 0.2, 1.0;
  return GaussianTarget(Vector::Constant(3, 2.0), p);
}

TEST(SamplerError, OracleInitAtZeroIterations) {
  const auto target = small_target();
  const GaussianPosterior oracle(target.precision(), target.precision() * target.mean());
  OracleBenchSpec spec;
  spec.sampler.kind = SamplerKind::lmc;
  spec.grid = {0};
  spec.replicates = 8000;
  spec.init = ChainInit::oracle;
  spec.key = 5;
  const auto rec = sampler_error_vs_oracle(target, oracle, spec);
  ASSERT_EQ(rec.size(), 1u);
  EXPECT_EQ(rec[0].iterations, 0u);
  EXPECT_LT(rec[0].tv_bound, 0.05);
}

TEST(SamplerError, DecreasesAlongTheChain) {
  const auto target = small_target();
  const GaussianPosterior oracle(target.precision(), target.precision() * target.mean());
  OracleBenchSpec spec;
  spec.sampler.kind = SamplerKind::lmc;
  spec.sampler.step_size = 0.02;
  spec.grid = {1, 4, 16, 64, 256, 1024};
  spec.replicates = 2000;
  spec.key = 6;
  spec.threads = 4;
  const auto rec = sampler_error_vs_oracle(target, oracle, spec);
  for (std::size_t g = 1; g < rec.size(); ++g) EXPECT_LE(rec[g].tv_bound, rec[g - 1].tv_bound + 0.02);
  EXPECT_GT(rec.front().tv_bound, 0.9);
  EXPECT_LT(rec.back().tv_bound, 0.1);
  for (const auto& r : rec) {
    EXPECT_GE(r.kl, 0.0);
    EXPECT_NEAR(r.tv_bound, pinsker(r.kl), 1e-15);
  }
  EXPECT_GT(iterations_to_reach(rec, 0.1), 16u);
  EXPECT_EQ(iterations_to_reach(rec, 1e-9), 0u);
}

TEST(SamplerError, ThreadCountDoesNotChangeResults) {
  const auto target = small_target();
  const GaussianPosterior oracle(target.precision(), target.precision() * target.mean());
  OracleBenchSpec spec;
  spec.sampler.kind = SamplerKind::ulmc_exact;
  spec.sampler.step_size = 0.2;
  spec.sampler.friction = 2.0;
  spec.grid = {3, 10, 30};
  spec.replicates = 500;
  spec.key = 12;
  const auto one = sampler_error_vs_oracle(target, oracle, spec);
  spec.threads = 5;
  const auto five = sampler_error_vs_oracle(target, oracle, spec);
  for (std::size_t g = 0; g < one.size(); ++g) EXPECT_EQ(one[g].kl, five[g].kl);
}

TEST(SamplerError, TemperedOracleMatchesTemperedChain) {
  const auto target = small_target();
  const GaussianPosterior oracle(target.precision(), target.precision() * target.mean());
  OracleBenchSpec spec;
  spec.sampler.kind = SamplerKind::lmc;
  spec.sampler.step_size = 0.02;
  spec.sampler.inverse_temperature = 4.0;
  spec.grid = {800};
  spec.replicates = 3000;
  spec.key = 3;
  spec.threads = 4;
  EXPECT_LT(sampler_error_vs_oracle(target, oracle, spec).back().tv_bound, 0.08);
}

TEST(SamplerError, NeedsEnoughReplicates) {
  const auto target = small_target();
  const GaussianPosterior oracle(target.precision(), target.precision() * target.mean());
  OracleBenchSpec spec;
  spec.grid = {1};
  spec.replicates = 3;
  EXPECT_THROW(sampler_error_vs_oracle(target, oracle, spec), ConfigError);
  spec.replicates = 100;
  spec.grid = {};
  EXPECT_THROW(sampler_error_vs_oracle(target, oracle, spec), ConfigError);
  spec.grid = {5, 2};
  EXPECT_THROW(sampler_error_vs_oracle(target, oracle, spec), ConfigError);
}

TEST(SamplerError, FrozenDatasetForm) {
  const auto m = nchain_model(4);
  StageDataset data(m.horizon);
  Vector y(6);
  for (int i = 0; i < 6; ++i) {
    data.append({static_cast<Index>(i % 4), static_cast<Index>(i % 2), 0.5, 0, 1, m.horizon});
    y(i) = 0.1 * i;
  }
  OracleBenchSpec spec;
  spec.sampler.step_size = 0.02;
  spec.grid = {0, 600};
  spec.replicates = 2000;
  spec.key = 2;
  spec.threads = 4;
  const auto rec = sampler_error_vs_oracle(data, y, m.features, 1.0, PriorSpec{1.0}, spec);
  ASSERT_EQ(rec.size(), 2u);
  EXPECT_TRUE(std::isinf(rec[0].kl));
  EXPECT_EQ(rec[0].tv_bound, 1.0);
  EXPECT_LT(rec[1].tv_bound, 0.15);
}

TEST(RateFit, PlantedSlopes) {
  std::vector<RatePoint> sq, lin;
  for (double n = 10; n < 1e6; n *= 1.7) {
    sq.push_back({n, 1.0 / std::sqrt(n)});
    lin.push_back({n, 1.0 / n});
  }
  EXPECT_NEAR(rate_fit(sq), 2.0, 0.01);
  EXPECT_NEAR(rate_fit(lin), 1.0, 0.01);
  // A transient prefix is dropped by the burn-in.
  std::vector<RatePoint> bent = sq;
  bent[0].error = 0.9;
  bent[1].error = 0.8;
  EXPECT_NEAR(rate_fit(bent, 0.2), 2.0, 0.01);
  EXPECT_THROW(rate_fit({{1, 0.5}}), ConfigError);
  EXPECT_THROW(rate_fit({{1, 0.5}, {2, 0.0}}, 0.0), ConfigError);
}

TEST(SqrtTFit, PlantedExponents) {
  std::vector<double> root, linear, flat;
  for (int t = 1; t <= 2000; ++t) {
    root.push_back(3.0 * std::sqrt(t));
    linear.push_back(0.2 * t);
    flat.push_back(7.0);
  }
  EXPECT_NEAR(sqrt_t_fit(root), 0.5, 1e-9);
  EXPECT_NEAR(sqrt_t_fit(linear), 1.0, 1e-9);
  EXPECT_NEAR(sqrt_t_fit(flat), 0.0, 1e-9);
  EXPECT_THROW(sqrt_t_fit({1, 2, 3}), ConfigError);
}

TEST(Decomposition, OptimalQGivesZero) {
  const auto m = testing::random_tabular_mdp(5, 3, 3, 1);
  const auto vt = optimal_values(m);
  const auto c = regret_decomposition_check(m, vt.Q, greedy_policy(vt.Q));
  EXPECT_NEAR(c.regret, 0.0, 1e-12);
  EXPECT_NEAR(c.bellman_sum, 0.0, 1e-12);
  EXPECT_NEAR(c.optimism_gap, 0.0, 1e-12);
  EXPECT_LE(c.residual, 1e-12);
}

TEST(Decomposition, RandomQTables) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = testing::random_tabular_mdp(5, 3, 3, 100 + seed);
    RandomStream rng(seed);
    for (int i = 0; i < 20; ++i) {
      const auto Q = testing::random_truncated_q(m, rng);
      const auto c = regret_decomposition_check(m, Q, greedy_policy(Q));
      EXPECT_LE(c.residual, 1e-8);
      EXPECT_GE(c.regret, -1e-12);
    }
  }
}

TEST(Decomposition, ShiftingTheFirstStage) {
  const auto m = testing::random_tabular_mdp(4, 2, 3, 9);
  RandomStream rng(4);
  auto Q = testing::random_truncated_q(m, rng);
  const PolicyTable pi = greedy_policy(Q);
  const auto base = regret_decomposition_check(m, Q, pi);
  Q[0].array() += 1.25;
  const auto shifted = regret_decomposition_check(m, Q, pi);
  EXPECT_NEAR(shifted.bellman_sum - base.bellman_sum, 1.25, 1e-12);
  EXPECT_NEAR(shifted.optimism_gap - base.optimism_gap, 1.25, 1e-12);
  EXPECT_NEAR(shifted.regret, base.regret, 1e-14);
  EXPECT_LE(shifted.residual, 1e-8);
}

TEST(Decomposition, NeedsOneTablePerStage) {
  const auto m = testing::random_tabular_mdp(3, 2, 3, 2);
  const auto vt = optimal_values(m);
  std::vector<Matrix> short_q(vt.Q.begin(), vt.Q.begin() + 2);
  EXPECT_THROW(regret_decomposition_check(m, short_q, greedy_policy(vt.Q)), ConfigError);
}

}  // namespace
}  // namespace fgts
