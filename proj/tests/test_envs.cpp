#include "fgts/envs.hpp"
#include "models.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace fgts;
using fgts::testing::random_tabular_mdp;

TEST(Thermometer, IndicatorPrefix) {
  Vector expected(5);
  expected << 1, 1, 1, 0, 0;
  EXPECT_EQ(thermometer(5, 2), expected);  // s_3
  EXPECT_EQ(thermometer(5, 0).sum(), 1.0);
  EXPECT_EQ(thermometer(5, 4).sum(), 5.0);
}

TEST(NChain, ShapeAndFeatures) {
  const auto m = nchain_model(5);
  EXPECT_EQ(m.horizon, 14);
  EXPECT_EQ(m.states, 5);
  EXPECT_EQ(m.actions, 2);
  EXPECT_EQ(m.initial_state, 1);
  EXPECT_EQ(m.features.dim(), 10);
  const Vector phi = m.features.phi(2, kRight);
  EXPECT_EQ(phi.head(5).sum(), 0.0);
  EXPECT_EQ(phi.tail(5), thermometer(5, 2));
  const auto norm = nchain_model(5, true);
  EXPECT_NEAR(norm.features.phi(4, kLeft).norm(), 1.0, 1e-15);
}

TEST(NChain, RejectsShortChain) { EXPECT_THROW(nchain_model(3), ConfigError); }

TEST(NChain, OptimalReturnIsTenForEveryLength) {
  for (Index n : {4, 5, 10, 25, 50, 100}) {
    const auto m = nchain_model(n);
    const auto v = optimal_values(m);
    EXPECT_NEAR(v.V[0](m.initial_state), 10.0, 1e-12) << "N=" << n;
    EXPECT_LE(bellman_optimality_residual(m, v), 1e-10);
    EXPECT_NEAR(policy_value(m, PolicyTable::constant(m, kRight)), 10.0, 1e-12);
  }
}

TEST(NChain, AlwaysLeftCollectsSmallReward) {
  for (Index n : {4, 10, 50}) {
    const auto m = nchain_model(n);
    const auto left = PolicyTable::constant(m, kLeft);
    // Stage 1 is spent at s_2 and the last stage pays nothing.
    EXPECT_NEAR(policy_value(m, left), 0.001 * (m.horizon - 2), 1e-12);
    RandomStream rng(1);
    const auto ep = rollout(m, left, rng);
    EXPECT_NEAR(ep.total_reward, 0.001 * (m.horizon - 2), 1e-12);
  }
}

TEST(OptimalValues, OneStageMdp) {
  EpisodicModel m;
  m.horizon = 1;
  m.states = 1;
  m.actions = 2;
  m.features = FeatureTable(1, 2, Matrix::Identity(2, 2));
  m.transitions = {Matrix::Ones(2, 1)};
  Matrix r(1, 2);
  r << 0.2, 0.7;
  m.rewards = {r};
  m.validate();
  EXPECT_DOUBLE_EQ(optimal_value(m), 0.7);
  EXPECT_EQ(greedy_policy(optimal_values(m).Q).at(1, 0), 1);
}

TEST(OptimalValues, BoundedAndFixedPoint) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = random_tabular_mdp(6, 3, 5, seed);
    const auto v = optimal_values(m);
    EXPECT_LE(bellman_optimality_residual(m, v), 1e-10);
    for (int h = 1; h <= m.horizon; ++h) {
      EXPECT_LE(v.V[static_cast<std::size_t>(h - 1)].maxCoeff(), m.horizon - h + 1 + 1e-12);
      EXPECT_GE(v.V[static_cast<std::size_t>(h - 1)].minCoeff(), 0.0);
    }
  }
}

TEST(PolicyValue, OptimalPolicyAttainsOptimum) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = random_tabular_mdp(5, 2, 4, seed);
    const auto v = optimal_values(m);
    EXPECT_NEAR(policy_value(m, greedy_policy(v.Q)), v.V[0](m.initial_state), 1e-12);
  }
}

TEST(PolicyValue, NeverExceedsOptimum) {
  RandomStream rng(2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = random_tabular_mdp(5, 3, 4, seed);
    const double best = optimal_value(m);
    for (int trial = 0; trial < 20; ++trial) {
      PolicyTable pi = PolicyTable::constant(m, 0);
      for (auto& stage : pi.action)
        for (auto& a : stage) a = static_cast<Index>(rng.below(3));
      EXPECT_LE(policy_value(m, pi), best + 1e-12);
      EXPECT_LE(policy_value(m, StochasticPolicy::epsilon_greedy(m, pi, 0.3)), best + 1e-12);
    }
  }
}

TEST(PolicyValue, EpsilonOneIsUniform) {
  const auto m = random_tabular_mdp(4, 3, 3, 7);
  StochasticPolicy uniform;
  for (int h = 1; h <= m.horizon; ++h) uniform.prob.push_back(Matrix::Constant(4, 3, 1.0 / 3.0));
  const auto any = PolicyTable::constant(m, 2);
  EXPECT_NEAR(policy_value(m, StochasticPolicy::epsilon_greedy(m, any, 1.0)), policy_value(m, uniform), 1e-14);
  EXPECT_EQ(policy_value(m, StochasticPolicy::epsilon_greedy(m, any, 0.0)), policy_value(m, any));
}

TEST(Occupancy, SumsToOneAndMatchesValue) {
  const auto m = random_tabular_mdp(6, 2, 4, 3);
  const auto pi = greedy_policy(optimal_values(m).Q);
  const auto d = occupancy(m, pi);
  double value = 0.0;
  for (int h = 1; h <= m.horizon; ++h) {
    const auto& dh = d[static_cast<std::size_t>(h - 1)];
    EXPECT_NEAR(dh.sum(), 1.0, 1e-12);
    for (Index x = 0; x < m.states; ++x) value += dh(x) * m.reward(h, x, pi.at(h, x));
  }
  EXPECT_NEAR(value, policy_value(m, pi), 1e-12);
}

TEST(Rollout, DeterministicModelIgnoresSeed) {
  const auto m = nchain_model(6);
  const auto pi = PolicyTable::constant(m, kRight);
  RandomStream a(1), b(999);
  const auto ea = rollout(m, pi, a);
  const auto eb = rollout(m, pi, b);
  ASSERT_EQ(ea.trace.size(), static_cast<std::size_t>(m.horizon));
  ASSERT_EQ(eb.trace.size(), ea.trace.size());
  for (std::size_t i = 0; i < ea.trace.size(); ++i) {
    EXPECT_EQ(ea.trace[i].state, eb.trace[i].state);
    EXPECT_EQ(ea.trace[i].next_state, eb.trace[i].next_state);
    EXPECT_EQ(ea.trace[i].stage, static_cast<int>(i) + 1);
  }
  EXPECT_NEAR(ea.total_reward, 10.0, 1e-12);
}

TEST(Rollout, MonteCarloMatchesPolicyValue) {
  const auto m = random_tabular_mdp(5, 3, 4, 11);
  RandomStream prng(5);
  PolicyTable pi = PolicyTable::constant(m, 0);
  for (auto& stage : pi.action)
    for (auto& a : stage) a = static_cast<Index>(prng.below(3));
  RandomStream rng(stream_key({8, 8}));
  const int n = 40000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double r = rollout(m, pi, rng).total_reward;
    s += r;
    s2 += r * r;
  }
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_NEAR(mean, policy_value(m, pi), 3.0 * se);
}

TEST(SyntheticLinearMdp, ValidAndFactorised) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto lm = synthetic_linear_mdp(8, 5, 4, 20, seed);
    EXPECT_NO_THROW(lm.model.validate(1e-12));
    EXPECT_LE(linear_factorization_error(lm), 1e-12);
    for (Index i = 0; i < lm.model.features.rows().rows(); ++i) {
      EXPECT_LE(lm.model.features.rows().row(i).norm(), 1.0 + 1e-15);
      EXPECT_NEAR(lm.model.features.rows().row(i).sum(), 1.0, 1e-12);
    }
  }
}

TEST(SyntheticLinearMdp, SeedDeterminism) {
  const auto a = synthetic_linear_mdp(4, 3, 2, 6, 42);
  const auto b = synthetic_linear_mdp(4, 3, 2, 6, 42);
  const auto c = synthetic_linear_mdp(4, 3, 2, 6, 43);
  EXPECT_EQ(save_model(a.model), save_model(b.model));
  EXPECT_NE(save_model(a.model), save_model(c.model));
}

TEST(SyntheticLinearMdp, StationaryOptionSharesFactors) {
  SyntheticMdpOptions opt;
  opt.stationary = true;
  const auto lm = synthetic_linear_mdp(3, 4, 2, 5, 1, opt);
  for (int h = 2; h <= 4; ++h) {
    EXPECT_EQ(lm.mu[static_cast<std::size_t>(h - 1)], lm.mu[0]);
    EXPECT_EQ(lm.model.rewards[static_cast<std::size_t>(h - 1)], lm.model.rewards[0]);
  }
}

TEST(SyntheticLinearMdp, RejectsInfeasibleShapes) {
  EXPECT_THROW(synthetic_linear_mdp(1, 3, 2, 5, 0), ConfigError);
  EXPECT_THROW(synthetic_linear_mdp(6, 3, 2, 5, 0), ConfigError);
  SyntheticMdpOptions opt;
  opt.reward_scale = 2.0;
  EXPECT_THROW(synthetic_linear_mdp(3, 3, 2, 5, 0, opt), ConfigError);
}

TEST(TabularAsLinear, ReproducesArbitraryTabularModel) {
  const auto tab = random_tabular_mdp(5, 3, 4, 9);
  const auto lm = tabular_as_linear(tab);
  EXPECT_LE(linear_factorization_error(lm), 1e-12);
  for (int h = 1; h <= tab.horizon; ++h) {
    const auto i = static_cast<std::size_t>(h - 1);
    EXPECT_EQ(lm.model.transitions[i], tab.transitions[i]);
    EXPECT_EQ(lm.model.rewards[i], tab.rewards[i]);
  }
  EXPECT_DOUBLE_EQ(optimal_value(lm.model), optimal_value(tab));
}

TEST(ModelJson, RoundTripIsBitExact) {
  for (const auto& m : {nchain_model(7), synthetic_linear_mdp(4, 3, 3, 9, 5).model, random_tabular_mdp(4, 2, 3, 1)}) {
    const std::string text = save_model(m);
    const auto back = load_model(text);
    EXPECT_EQ(back.horizon, m.horizon);
    EXPECT_EQ(back.initial_state, m.initial_state);
    EXPECT_EQ(back.features.rows(), m.features.rows());
    for (int h = 0; h < m.horizon; ++h) {
      EXPECT_EQ(back.transitions[static_cast<std::size_t>(h)], m.transitions[static_cast<std::size_t>(h)]);
      EXPECT_EQ(back.rewards[static_cast<std::size_t>(h)], m.rewards[static_cast<std::size_t>(h)]);
    }
    EXPECT_EQ(save_model(back), text);
  }
}

TEST(ModelJson, RejectsInvalidModels) {
  auto j = model_to_json(nchain_model(4));
  j["transitions"][0][0][0] = 0.5;  // row no longer sums to 1
  EXPECT_THROW(model_from_json(j), ConfigError);

  j = model_to_json(nchain_model(4));
  j["rewards"][2][0][0] = 1.5;
  EXPECT_THROW(model_from_json(j), ConfigError);

  j = model_to_json(nchain_model(4));
  j.erase("horizon");
  EXPECT_THROW(model_from_json(j), ConfigError);

  j = model_to_json(nchain_model(4));
  j["schema"] = "something/else";
  EXPECT_THROW(model_from_json(j), ConfigError);

  EXPECT_THROW(load_model("{not json"), ConfigError);
}
