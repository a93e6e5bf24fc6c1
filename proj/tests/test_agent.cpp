#include "fgts/agent.hpp"
#include "models.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace fgts {
namespace {

AgentConfig lmc_agent(double tau, std::uint64_t J) {
  AgentConfig c;
  c.sampler.kind = SamplerKind::lmc;
  c.sampler.step_size = tau;
  c.iterations = J;
  return c;
}

TEST(TruncateQ, Examples) {
  // H - h + 1 = 3
  EXPECT_DOUBLE_EQ(truncate_q(5.3, 3, 5), 3.0);
  EXPECT_DOUBLE_EQ(truncate_q(-0.2, 3, 5), 0.0);
  EXPECT_DOUBLE_EQ(truncate_q(1.7, 3, 5), 1.7);
  EXPECT_DOUBLE_EQ(truncate_q(7.0, 1, 5), 5.0);
}

TEST(AgentConfig, ViolationsListEveryProblem) {
  AgentConfig c;
  c.weights.loss_weight = 0;
  c.sampler.step_size = -1;
  c.epsilon = 2;
  c.ridge = 0;
  EXPECT_EQ(c.violations().size(), 4u);
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_TRUE(AgentConfig{}.violations().empty());
}

TEST(AgentConfig, KindAndPresetNames) {
  for (auto k : {AgentKind::lsvi_ase, AgentKind::exact_ts, AgentKind::lsvi_ucb, AgentKind::epsilon_greedy})
    EXPECT_EQ(agent_kind_from_string(to_string(k)), k);
  for (auto p : {SchedulePreset::constant, SchedulePreset::theory, SchedulePreset::curvature})
    EXPECT_EQ(schedule_preset_from_string(to_string(p)), p);
  EXPECT_THROW(agent_kind_from_string("dqn"), ConfigError);
  EXPECT_THROW(schedule_preset_from_string("cosine"), ConfigError);
}

TEST(Agent, DegenerateFirstEpisodeActsLeft) {
  // No data, noise off: the chain sits at the prior mode 0, so Q is 0 and ties go to action 0.
  const auto m = nchain_model(6);
  AgentConfig c = lmc_agent(0.1, 50);
  c.sampler.noise = false;
  Agent agent(m, c, 1);
  const RunRecord r = agent.run_episode();
  for (const Matrix& q : agent.q_tables()) EXPECT_EQ(q.cwiseAbs().maxCoeff(), 0.0);
  const PolicyTable pi = agent.greedy();
  for (int h = 1; h <= m.horizon; ++h)
    for (Index x = 0; x < m.states; ++x) EXPECT_EQ(pi.at(h, x), kLeft);
  const double left = policy_value(m, PolicyTable::constant(m, kLeft));
  EXPECT_NEAR(left, 0.001 * (m.horizon - 2), 1e-12);
  EXPECT_NEAR(r.episode_return, left, 1e-12);
  EXPECT_NEAR(r.regret, 10.0 - left, 1e-12);
}

TEST(Agent, GradientEvaluationsPerEpisode) {
  const auto m = nchain_model(5);
  for (auto kind : {SamplerKind::lmc, SamplerKind::ulmc_exact, SamplerKind::adaptive_ulmc}) {
    AgentConfig c = lmc_agent(0.01, 7);
    c.sampler.kind = kind;
    Agent agent(m, c, 3);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(agent.run_episode().grad_evals, 7u * static_cast<std::uint64_t>(m.horizon));
  }
}

TEST(Agent, SameKeySameRun) {
  const auto m = nchain_model(5);
  AgentConfig c = lmc_agent(0.05, 4);
  c.sampler.kind = SamplerKind::ulmc_exact;
  c.weights.feelgood_weight = 0.5;
  const auto a = run_agent(m, c, 42, 30, 14);
  const auto b = run_agent(m, c, 42, 30, 14);
  const auto other = run_agent(m, c, 43, 30, 14);
  ASSERT_EQ(a.records.size(), b.records.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].episode_return, b.records[i].episode_return);
    EXPECT_EQ(a.records[i].cumulative_regret, b.records[i].cumulative_regret);
    differs = differs || a.records[i].regret != other.records[i].regret ||
              a.records[i].episode_return != other.records[i].episode_return;
  }
  ASSERT_EQ(a.evaluations.size(), b.evaluations.size());
  for (std::size_t i = 0; i < a.evaluations.size(); ++i) EXPECT_EQ(a.evaluations[i].value, b.evaluations[i].value);
  EXPECT_TRUE(differs);
}

TEST(Agent, WarmStartCarriesChains) {
  const auto m = nchain_model(4);
  AgentConfig c = lmc_agent(0.01, 5);
  c.sampler.kind = SamplerKind::adaptive_ulmc;
  Agent warm(m, c, 9);
  c.warm_start = false;
  Agent cold(m, c, 9);
  for (int k = 0; k < 3; ++k) {
    warm.run_episode();
    cold.run_episode();
  }
  for (int h = 1; h <= m.horizon; ++h) {
    const auto i = static_cast<std::size_t>(h - 1);
    EXPECT_EQ(warm.chain_states()[i].grad_evals, 15u);
    EXPECT_EQ(cold.chain_states()[i].grad_evals, 5u);
    EXPECT_TRUE(warm.chain_states()[i].momentum.has_value());
    EXPECT_TRUE(warm.chain_states()[i].bias_var.has_value());
  }
}

TEST(Agent, QTablesStayInsideTruncationBounds) {
  const auto m = testing::random_tabular_mdp(4, 3, 4, 5);
  AgentConfig c = lmc_agent(0.05, 10);
  c.prior_variance = 100.0;
  c.weights.loss_weight = 1.0;
  Agent agent(m, c, 2);
  for (int k = 0; k < 40; ++k) {
    agent.run_episode();
    for (int h = 1; h <= m.horizon; ++h) {
      const Matrix& q = agent.q_tables()[static_cast<std::size_t>(h - 1)];
      EXPECT_GE(q.minCoeff(), 0.0);
      EXPECT_LE(q.maxCoeff(), m.horizon - h + 1.0);
    }
  }
}

TEST(Agent, UntruncatedQIsLinear) {
  const auto m = nchain_model(5);
  AgentConfig c = lmc_agent(0.05, 4);
  c.truncation = false;
  Agent agent(m, c, 4);
  agent.run_episode();
  agent.plan();
  const auto w = agent.weights();
  for (int h = 1; h <= m.horizon; ++h) {
    const Vector raw = m.features.rows() * w[static_cast<std::size_t>(h - 1)];
    const Matrix q = raw.reshaped<Eigen::RowMajor>(m.states, m.actions);
    EXPECT_EQ(q, agent.q_tables()[static_cast<std::size_t>(h - 1)]);
  }
}

TEST(Agent, ExactTsWithoutDataDrawsFromThePrior) {
  const auto m = nchain_model(4);
  AgentConfig c;
  c.kind = AgentKind::exact_ts;
  c.prior_variance = 2.5;
  const int reps = 4000;
  const Index d = m.features.dim();
  Vector s1 = Vector::Zero(d), s2 = Vector::Zero(d);
  for (int r = 0; r < reps; ++r) {
    Agent agent(m, c, static_cast<std::uint64_t>(r));
    EXPECT_EQ(agent.plan(), 0u);
    const Vector w = agent.weights().back();
    s1 += w;
    s2 += w.cwiseProduct(w);
  }
  const Vector mean = s1 / reps;
  const Vector var = s2 / reps - mean.cwiseProduct(mean);
  const double se_mean = std::sqrt(2.5 / reps);
  for (Index i = 0; i < d; ++i) {
    EXPECT_LT(std::abs(mean(i)), 4 * se_mean);
    EXPECT_NEAR(var(i), 2.5, 4 * 2.5 * std::sqrt(2.0 / reps));
  }
}

TEST(Agent, NoiselessLmcReachesThePosteriorMean) {
  // Noise off, curvature-limited steps: the chain is gradient descent on the stage energy.
  const auto m = nchain_model(5);
  AgentConfig g = lmc_agent(1e3, 20000);
  g.sampler.noise = false;
  g.schedule = SchedulePreset::curvature;
  g.schedule_constant = 1.0;
  g.weights.loss_weight = 1.0;
  Agent agent(m, g, 11);
  for (int k = 0; k < 8; ++k) agent.run_episode();
  agent.plan();

  const int H = m.horizon;
  const auto post = StagePosterior::from_statistics(agent.statistics(H), Vector(), g.weights, agent.prior());
  const Vector exact = exact_gaussian_posterior(post).mean();
  const Vector got = agent.weights()[static_cast<std::size_t>(H - 1)];
  EXPECT_LT((got - exact).norm(), 1e-6 * std::max(1.0, exact.norm()));
}

TEST(Agent, CurvaturePresetTamesLargeSteps) {
  const auto m = nchain_model(6);
  AgentConfig c = lmc_agent(1e4, 8);
  c.weights.loss_weight = 1.0;
  Agent loose(m, c, 5);
  EXPECT_THROW(
      {
        for (int k = 0; k < 20; ++k) loose.run_episode();
      },
      NumericalDivergence);

  c.schedule = SchedulePreset::curvature;
  c.schedule_constant = 1.0;
  Agent tamed(m, c, 5);
  for (int k = 0; k < 20; ++k) tamed.run_episode();
  for (const Vector& w : tamed.weights()) EXPECT_TRUE(w.allFinite());
}

TEST(Agent, DivergenceClampRecordsEvents) {
  const auto m = nchain_model(4);
  AgentConfig c = lmc_agent(1e6, 200);
  c.clamp_divergence = true;
  Agent agent(m, c, 8);
  const RunRecord r = agent.run_episode();
  EXPECT_FALSE(agent.events().empty());
  EXPECT_NE(agent.events().front().find("episode 1"), std::string::npos);
  for (const Vector& w : agent.weights()) EXPECT_TRUE(w.allFinite());
  EXPECT_GE(r.regret, 0.0);

  c.clamp_divergence = false;
  Agent strict(m, c, 8);
  EXPECT_THROW(strict.run_episode(), NumericalDivergence);
}

TEST(Agent, RegretIsNonnegativeAndAccumulates) {
  const auto m = testing::random_tabular_mdp(5, 3, 4, 17);
  for (auto kind : {AgentKind::lsvi_ase, AgentKind::exact_ts, AgentKind::lsvi_ucb, AgentKind::epsilon_greedy}) {
    AgentConfig c = lmc_agent(0.05, 4);
    c.kind = kind;
    const auto res = run_agent(m, c, 6, 60, 0);
    double total = 0.0;
    double prev = 0.0;
    for (const auto& r : res.records) {
      EXPECT_GE(r.regret, 0.0);
      total += r.regret;
      EXPECT_NEAR(r.cumulative_regret, total, 1e-9);
      EXPECT_GE(r.cumulative_regret, prev);
      prev = r.cumulative_regret;
    }
    EXPECT_TRUE(res.evaluations.empty());
  }
}

TEST(Agent, EpsilonZeroMatchesUcbWithoutBonus) {
  const auto m = testing::random_tabular_mdp(4, 2, 3, 23);
  AgentConfig greedy;
  greedy.kind = AgentKind::epsilon_greedy;
  greedy.epsilon = 0.0;
  AgentConfig ucb;
  ucb.kind = AgentKind::lsvi_ucb;
  ucb.ucb_bonus = 0.0;
  Agent a(m, greedy, 31), b(m, ucb, 31);
  for (int k = 0; k < 25; ++k) {
    const RunRecord ra = a.run_episode();
    const RunRecord rb = b.run_episode();
    EXPECT_EQ(ra.episode_return, rb.episode_return);
    EXPECT_EQ(ra.regret, rb.regret);
    for (std::size_t h = 0; h < a.q_tables().size(); ++h) EXPECT_EQ(a.q_tables()[h], b.q_tables()[h]);
  }
}

TEST(Agent, EpsilonOneIsUniform) {
  const auto m = testing::random_tabular_mdp(4, 3, 3, 29);
  AgentConfig c;
  c.kind = AgentKind::epsilon_greedy;
  c.epsilon = 1.0;
  Agent agent(m, c, 2);
  const double uniform = policy_value(m, StochasticPolicy::epsilon_greedy(m, PolicyTable::constant(m, 0), 1.0));
  for (int k = 0; k < 10; ++k) EXPECT_NEAR(agent.run_episode().regret, agent.optimal_value() - uniform, 1e-12);
}

TEST(Agent, UcbBonusShrinksWithData) {
  const auto m = nchain_model(5);
  AgentConfig c;
  c.kind = AgentKind::lsvi_ucb;
  Agent agent(m, c, 3);
  agent.plan();
  const Vector first = agent.bonus();
  ASSERT_EQ(first.size(), m.states * m.actions);
  for (int k = 0; k < 30; ++k) agent.run_episode();
  agent.plan();
  const Vector later = agent.bonus();
  EXPECT_TRUE((later.array() <= first.array() + 1e-12).all());
  // Stage 1 always starts at s_2, so its pairs have been seen 30 times.
  const Index visited = m.initial_state * m.actions + agent.greedy().at(1, m.initial_state);
  EXPECT_LT(later(visited), 0.5 * first(visited));
}

TEST(RunAgent, EvaluationSchedule) {
  const auto m = nchain_model(4);  // H = 13
  AgentConfig c = lmc_agent(0.05, 2);
  const auto res = run_agent(m, c, 1, 20, 50);  // 260 steps
  ASSERT_EQ(res.evaluations.size(), 5u);
  for (std::size_t i = 0; i < res.evaluations.size(); ++i) {
    EXPECT_EQ(res.evaluations[i].env_steps, 50u * (i + 1));
    EXPECT_EQ(res.evaluations[i].episode, static_cast<int>((50 * (i + 1) + 12) / 13));
    EXPECT_GE(res.evaluations[i].value, 0.0);
  }
  EXPECT_DOUBLE_EQ(res.final_evaluation_mean(2), (res.evaluations[3].value + res.evaluations[4].value) / 2);
  EXPECT_THROW(run_agent(m, c, 1, 0), ConfigError);
}

TEST(RunAgent, EpisodesForSteps) {
  EXPECT_EQ(episodes_for_steps(nchain_model(50), 100000), 1695);
  EXPECT_EQ(episodes_for_steps(nchain_model(4), 26), 2);
  EXPECT_EQ(episodes_for_steps(nchain_model(4), 27), 3);
}

}  // namespace
}  // namespace fgts
