#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "pscm/effects.hpp"
#include "test_util.hpp"

using namespace pscm;

namespace {

EffectSeries series(const std::string& unit, std::vector<double> tau, TreatmentSpell spell, int t0) {
  EffectSeries e;
  e.unit = unit;
  e.tau = Eigen::Map<Eigen::VectorXd>(tau.data(), static_cast<Eigen::Index>(tau.size()));
  e.windows = align_spell(unit, spell, t0, static_cast<int>(tau.size()) - 1);
  return e;
}

}  // namespace

TEST(UnitEffect, ZeroWhenCounterfactualMatches) {
  Eigen::MatrixXd y(3, 6);
  y << 10, 11, 12, 13, 14, 15, 10, 11, 12, 13, 14, 15, 30, 31, 32, 33, 34, 35;
  const auto panel = fixtures::make_panel(y);
  TreatmentSchedule s;
  s.add("u0", 3, 4);
  const auto e = unit_effect(panel, {{"u1", "u2"}, Eigen::Vector2d(1.0, 0.0)}, align(panel, s, "u0"));
  EXPECT_EQ(e.tau, Eigen::VectorXd::Zero(6));
}

TEST(UnitEffect, TauIsObservedMinusCounterfactual) {
  Eigen::MatrixXd y(3, 5);
  y << 20, 22, 24, 30, 32, 10, 12, 14, 16, 18, 30, 32, 34, 36, 38;
  const auto panel = fixtures::make_panel(y);
  TreatmentSchedule s;
  s.add("u0", 3, 4);
  const auto e = unit_effect(panel, {{"u1", "u2"}, Eigen::Vector2d(0.5, 0.5)}, align(panel, s, "u0"));
  Eigen::VectorXd expected(5);
  expected << 0, 0, 0, 4, 4;
  EXPECT_TRUE(e.tau.isApprox(expected) || (e.tau - expected).norm() < 1e-12);
}

TEST(WindowAverage, Examples) {
  const std::vector<double> c(5, 3.25), s{1, 2, 3};
  EXPECT_EQ(window_average(c, {0, 5}), 3.25);
  EXPECT_EQ(window_average(s, {0, 3}), 2.0);
  try {
    window_average(s, {3, 3});
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("empty post-window"), std::string::npos);
  }
}

TEST(PooledEffect, SingleUnitIsIdentity) {
  const auto e = series("a", {0.1, -0.1, 0.2, 1.0, 2.0, 3.0, 5.0, 7.0}, {3, 5}, 3);
  const std::vector<double> eta{1.0};
  const auto p = pooled_effect(std::span(&e, 1), eta, Pooling::calendar);
  EXPECT_EQ(p.psi, e.tau);
  EXPECT_EQ(p.psi_treatment, 2.0);
  ASSERT_TRUE(p.psi_post);
  EXPECT_EQ(*p.psi_post, 6.0);
}

TEST(PooledEffect, TwoUnitWeightedMean) {
  std::vector<EffectSeries> es{series("a", {0, 0, 0, 1, 1, 1}, {3, 5}, 3),
                               series("b", {0, 0, 0, 3, 3, 3}, {3, 5}, 3)};
  const std::vector<double> eta{0.5, 0.5};
  const auto p = pooled_effect(es, eta, Pooling::calendar);
  EXPECT_EQ(p.psi_treatment, 2.0);
  EXPECT_FALSE(p.psi_post);
}

TEST(PooledEffect, Linearity) {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> z;
  std::vector<EffectSeries> es, scaled;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> tau(10);
    for (auto& v : tau) v = z(gen);
    es.push_back(series("u" + std::to_string(i), tau, {5, 7}, 5));
    for (auto& v : tau) v *= 2.5;
    scaled.push_back(series("u" + std::to_string(i), tau, {5, 7}, 5));
  }
  const std::vector<double> eta{0.1, 0.2, 0.3, 0.4};
  const auto p = pooled_effect(es, eta, Pooling::calendar);
  const auto q = pooled_effect(scaled, eta, Pooling::calendar);
  EXPECT_TRUE(((2.5 * p.psi) - q.psi).cwiseAbs().maxCoeff() < 1e-12);
  EXPECT_NEAR(2.5 * p.psi_treatment, q.psi_treatment, 1e-12);
  EXPECT_NEAR(2.5 * *p.psi_post, *q.psi_post, 1e-12);
}

TEST(PooledEffect, PermutationInvariantBitIdentical) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> z;
  std::vector<EffectSeries> es;
  std::vector<double> eta;
  for (int i = 0; i < 7; ++i) {
    std::vector<double> tau(12);
    for (auto& v : tau) v = z(gen);
    es.push_back(series("u" + std::to_string(i), tau, {4 + i % 3, 10}, 4));
    eta.push_back(0.01 + 0.1 * i);
  }
  for (auto mode : {Pooling::event_time}) {
    const auto p = pooled_effect(es, eta, mode);
    std::vector<std::size_t> idx(es.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int rep = 0; rep < 5; ++rep) {
      std::shuffle(idx.begin(), idx.end(), gen);
      std::vector<EffectSeries> es2;
      std::vector<double> eta2;
      for (auto i : idx) {
        es2.push_back(es[i]);
        eta2.push_back(eta[i]);
      }
      const auto q = pooled_effect(es2, eta2, mode);
      EXPECT_EQ(p.psi, q.psi);
      EXPECT_EQ(p.psi_treatment, q.psi_treatment);
      EXPECT_EQ(p.units, q.units);
    }
  }
}

TEST(PooledEffect, DecompositionIntoUnitMeans) {
  std::mt19937_64 gen(4);
  std::normal_distribution<double> z;
  std::vector<EffectSeries> es;
  const std::vector<double> eta{0.2, 0.5, 0.3};
  double expected_t = 0.0, expected_p = 0.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> tau(14);
    for (auto& v : tau) v = z(gen);
    es.push_back(series("u" + std::to_string(i), tau, {6, 9}, 6));
    expected_t += eta[i] * (tau[6] + tau[7] + tau[8] + tau[9]) / 4.0;
    expected_p += eta[i] * (tau[10] + tau[11] + tau[12] + tau[13]) / 4.0;
  }
  const auto p = pooled_effect(es, eta, Pooling::calendar);
  EXPECT_NEAR(p.psi_treatment, expected_t, 1e-12);
  EXPECT_NEAR(*p.psi_post, expected_p, 1e-12);
}

TEST(PooledEffect, CalendarRejectsStaggeredWindows) {
  std::vector<EffectSeries> es{series("a", std::vector<double>(8, 0.0), {3, 7}, 3),
                               series("b", std::vector<double>(8, 0.0), {4, 7}, 3)};
  const std::vector<double> eta{0.5, 0.5};
  EXPECT_THROW(pooled_effect(es, eta, Pooling::calendar), PoolingError);
}

TEST(PooledEffect, EventTimeAlignsAtAdoption) {
  // T = 9; adoptions 4 and 6; common fit lead = 4 weeks, horizon = 9 - 6 = 3.
  std::vector<double> ta(10), tb(10);
  for (int t = 0; t < 10; ++t) {
    ta[static_cast<std::size_t>(t)] = t;
    tb[static_cast<std::size_t>(t)] = 100 + t;
  }
  std::vector<EffectSeries> es{series("a", ta, {4, 9}, 4), series("b", tb, {6, 9}, 4)};
  const std::vector<double> eta{0.25, 0.75};
  const auto p = pooled_effect(es, eta, Pooling::event_time);
  ASSERT_EQ(p.psi.size(), 8);
  EXPECT_EQ(p.weeks.front(), -4);
  EXPECT_EQ(p.weeks.back(), 3);
  for (int k = 0; k < 8; ++k) {
    const int e = k - 4;
    EXPECT_DOUBLE_EQ(p.psi[k], 0.25 * (4 + e) + 0.75 * (100 + 6 + e));
  }
  EXPECT_EQ(p.treat, (Window{4, 8}));
  EXPECT_FALSE(p.psi_post);
}

TEST(PooledEffect, EventTimeWithoutOverlapFails) {
  std::vector<EffectSeries> es{series("a", std::vector<double>(6, 0.0), {2, 5}, 2)};
  es[0].windows.adoption = 6;
  const std::vector<double> eta{1.0};
  EXPECT_THROW(pooled_effect(es, eta, Pooling::event_time), PoolingError);
}

TEST(PersistenceLabel, SignsWithDeadband) {
  EXPECT_EQ(persistence_label(1.0, 0.5), "persistent_supporter");
  EXPECT_EQ(persistence_label(1.0, 0.05), "anticipator");
  EXPECT_EQ(persistence_label(-1.0, 0.5), "latecomer");
  EXPECT_EQ(persistence_label(-1.0, -0.5), "persistent_opponent");
  EXPECT_EQ(persistence_label(0.05, 3.0), "no_effect");
  EXPECT_EQ(persistence_label(1.0, std::nullopt), "no_post_window");
}

TEST(SummarizeUnit, WindowMeansAndFit) {
  const auto e = series("a", {0.3, -0.4, 0.0, 2.0, 2.0, 0.0, 0.0}, {3, 4}, 3);
  const auto s = summarize_unit(e);
  EXPECT_NEAR(s.rmspe_pre, std::sqrt((0.09 + 0.16) / 3.0), 1e-15);
  EXPECT_EQ(s.treatment_mean, 2.0);
  EXPECT_EQ(*s.post_mean, 0.0);
  EXPECT_EQ(s.label, "anticipator");
}
