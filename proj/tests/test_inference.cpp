#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "pscm/inference.hpp"
#include "test_util.hpp"

using namespace pscm;

TEST(Theta, EqualResidualsGiveOne) {
  const std::vector<double> tau{0.5, -0.5, 0.5, 0.5, -0.5, 0.5};
  EXPECT_EQ(theta(tau, {0, 3}, {3, 6}).theta, 1.0);
}

TEST(Theta, HandComputedRatio) {
  const std::vector<double> tau{0.5, -0.5, 0.5, 0.5, 2.0, -2.0, 2.0};
  const auto s = theta(tau, {0, 4}, {4, 7});
  EXPECT_EQ(s.rmspe_pre, 0.5);
  EXPECT_EQ(s.rmspe_eval, 2.0);
  EXPECT_EQ(s.theta, 4.0);
}

TEST(Theta, ResidualsAreSquared) {
  // Alternating residuals average to zero but still have RMS 1.
  const std::vector<double> tau{1, -1, 1, -1, 3, -3};
  EXPECT_EQ(theta(tau, {0, 4}, {4, 6}).theta, 3.0);
}

TEST(Theta, PerfectPreFitIsDegenerate) {
  const std::vector<double> tau{0, 0, 0, 1};
  EXPECT_THROW(theta(tau, {0, 3}, {3, 4}), DegenerateFitError);
}

TEST(PValue, Unweighted) {
  const std::vector<double> ctl{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  EXPECT_EQ(p_value_unweighted(0.5, ctl), 0.0);
  EXPECT_EQ(p_value_unweighted(11.0, ctl), 1.0);
  EXPECT_EQ(p_value_unweighted(9.5, ctl), 0.9);
  EXPECT_EQ(p_value_unweighted(9.0, ctl), 0.8);
  EXPECT_THROW(p_value_unweighted(1.0, std::vector<double>{}), DomainError);
}

TEST(PValue, WeightedReducesToUnweighted) {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> z;
  for (int n : {3, 10, 37, 1000}) {
    std::vector<double> ctl(static_cast<std::size_t>(n));
    for (auto& v : ctl) v = z(gen);
    const std::vector<double> kappa(ctl.size(), 1.0 / n);
    for (double t : {-1.0, 0.0, 0.3, 2.0}) {
      EXPECT_EQ(p_value_weighted(t, ctl, kappa), p_value_unweighted(t, ctl));
    }
  }
}

TEST(PValue, WeightedSingleMass) {
  const std::vector<double> ctl{1.0, 5.0, 9.0};
  EXPECT_EQ(p_value_weighted(2.0, ctl, std::vector<double>{1.0, 0.0, 0.0}), 1.0);
  EXPECT_EQ(p_value_weighted(2.0, ctl, std::vector<double>{0.0, 1.0, 0.0}), 0.0);
  EXPECT_NEAR(p_value_weighted(6.0, ctl, std::vector<double>{0.2, 0.3, 0.5}), 0.5, 1e-15);
  EXPECT_THROW(p_value_weighted(2.0, ctl, std::vector<double>{0.5, 0.5, 0.5}), DomainError);
  EXPECT_THROW(p_value_weighted(2.0, ctl, std::vector<double>{0.5, 0.5}), ReferenceError);
}

TEST(Quantile, TypeSevenInterpolation) {
  EXPECT_DOUBLE_EQ(quantile({4, 1, 3, 2}, 0.05), 1.15);
  EXPECT_DOUBLE_EQ(quantile({4, 1, 3, 2}, 0.95), 3.85);
  EXPECT_EQ(quantile({7}, 0.3), 7.0);
  EXPECT_EQ(quantile({1, 2, 3}, 0.5), 2.0);
}

namespace {

struct PlaceboFixture {
  PanelData panel;
  std::vector<std::size_t> donor_rows;
  std::vector<double> donor_pi;
  std::vector<PlaceboSlot> slots;
  PooledEffect treated;

  PlaceboSetup setup(std::size_t replicates, std::uint64_t seed, int jobs = 1) const {
    PlaceboSetup s;
    s.panel = &panel;
    s.donor_rows = donor_rows;
    s.donor_pi = donor_pi;
    s.slots = slots;
    s.t0 = 10;
    s.mode = Pooling::calendar;
    s.replicates = replicates;
    s.seed = seed;
    s.jobs = jobs;
    return s;
  }
};

// Units 0..2 are treated at week 10 (lottery ends at week 13) with an added
// effect; units 3..19 form the donor pool.
PlaceboFixture make_fixture(double effect, bool equal_pi) {
  Eigen::MatrixXd y = fixtures::factor_outcomes(20, 18, 99, 0.5);
  for (int i = 0; i < 3; ++i) y.row(i).segment(10, 4).array() += effect;
  std::vector<double> pop;
  for (int i = 0; i < 20; ++i) pop.push_back(1000.0 + 37.0 * i);
  PlaceboFixture f{fixtures::make_panel(y, pop), {}, {}, {}, {}};
  for (std::size_t r = 3; r < 20; ++r) {
    f.donor_rows.push_back(r);
    f.donor_pi.push_back(equal_pi ? 0.4 : 0.2 + 0.03 * static_cast<double>(r));
  }
  for (int k = 0; k < 3; ++k) f.slots.push_back({10, 13, 0.1});
  TreatmentSchedule s;
  for (int i = 0; i < 3; ++i) s.add("u" + std::to_string(i), 10, 13);
  std::vector<EffectSeries> es;
  Eigen::MatrixXd donors(17, 18);
  for (int j = 0; j < 17; ++j) donors.row(j) = y.row(j + 3);
  for (int i = 0; i < 3; ++i) {
    const auto a = align(f.panel, s, "u" + std::to_string(i));
    const auto fit = fit_weights({y.row(i).segment(a.pre.begin, a.pre.size()).transpose(),
                                  donors.middleCols(a.pre.begin, a.pre.size()).transpose(), 0.1});
    es.push_back({a.unit, y.row(i).transpose() - donors.transpose() * fit.omega, a});
  }
  const double total = pop[0] + pop[1] + pop[2];
  const std::vector<double> eta{pop[0] / total, pop[1] / total, pop[2] / total};
  f.treated = pooled_effect(es, eta, Pooling::calendar, "T");
  return f;
}

}  // namespace

TEST(Placebo, ReplicateCountAndBounds) {
  const auto f = make_fixture(0.0, false);
  const auto inf = placebo_inference(f.setup(1000, 5), f.treated);
  ASSERT_EQ(inf.distribution.draws.size(), 1000u);
  EXPECT_GE(inf.rho_treatment, 0.0);
  EXPECT_LE(inf.rho_treatment, 1.0);
  EXPECT_NEAR(inf.rho_treatment + inf.p_tail_treatment, 1.0, 1e-12);
  ASSERT_TRUE(inf.rho_post);
  EXPECT_NEAR(*inf.rho_post + *inf.p_tail_post, 1.0, 1e-12);
  double total = 0.0;
  for (double w : inf.distribution.normalized_weights) total += w;
  EXPECT_NEAR(total, 1.0, 1e-12);
  for (Eigen::Index t = 0; t < inf.band.q05.size(); ++t) EXPECT_LE(inf.band.q05[t], inf.band.q95[t]);
}

TEST(Placebo, Deterministic) {
  const auto f = make_fixture(0.0, false);
  const auto a = placebo_inference(f.setup(300, 77), f.treated);
  const auto b = placebo_inference(f.setup(300, 77), f.treated);
  const auto c = placebo_inference(f.setup(300, 77, 3), f.treated);
  for (std::size_t r = 0; r < 300; ++r) {
    EXPECT_EQ(a.distribution.draws[r].members, b.distribution.draws[r].members);
    EXPECT_EQ(a.distribution.draws[r].psi, b.distribution.draws[r].psi);
    EXPECT_EQ(a.distribution.draws[r].psi, c.distribution.draws[r].psi);
    EXPECT_EQ(a.distribution.draws[r].log_likelihood, c.distribution.draws[r].log_likelihood);
  }
  EXPECT_EQ(a.rho_treatment, c.rho_treatment);
  EXPECT_EQ(a.band.q05, c.band.q05);
  const auto d = placebo_inference(f.setup(300, 78), f.treated);
  EXPECT_NE(a.distribution.draws[0].members, d.distribution.draws[0].members);
}

TEST(Placebo, EqualScoresMatchCountingFormula) {
  const auto f = make_fixture(0.0, true);
  const auto inf = placebo_inference(f.setup(500, 3), f.treated);
  std::vector<double> thetas;
  for (const auto& d : inf.distribution.draws) thetas.push_back(d.theta_treatment);
  EXPECT_EQ(inf.rho_treatment, p_value_unweighted(inf.theta_treatment.theta, thetas));
}

TEST(Placebo, UniformOptionIgnoresScores) {
  const auto f = make_fixture(0.0, false);
  auto setup = f.setup(500, 3);
  setup.likelihood_weights = false;
  const auto inf = placebo_inference(setup, f.treated);
  std::vector<double> thetas;
  for (const auto& d : inf.distribution.draws) thetas.push_back(d.theta_treatment);
  EXPECT_EQ(inf.rho_treatment, p_value_unweighted(inf.theta_treatment.theta, thetas));
}

TEST(Placebo, LikelihoodWeightsAreProductOfScores) {
  const auto f = make_fixture(0.0, false);
  const auto inf = placebo_inference(f.setup(200, 11), f.treated);
  std::vector<double> raw;
  double total = 0.0;
  for (const auto& d : inf.distribution.draws) {
    double l = 1.0;
    for (auto m : d.members) l *= f.donor_pi[m];
    raw.push_back(l);
    total += l;
  }
  for (std::size_t r = 0; r < raw.size(); ++r) {
    EXPECT_NEAR(inf.distribution.normalized_weights[r], raw[r] / total, 1e-12);
  }
}

TEST(Placebo, DrawMatchesIndependentRecomputation) {
  const auto f = make_fixture(0.0, false);
  const auto inf = placebo_inference(f.setup(20, 21), f.treated);
  const Eigen::MatrixXd& y = f.panel.outcomes();
  for (std::size_t r = 0; r < 3; ++r) {
    const auto& draw = inf.distribution.draws[r];
    Eigen::VectorXd psi = Eigen::VectorXd::Zero(18);
    double total = 0.0;
    for (auto m : draw.members) total += f.panel.population()[f.donor_rows[m]];
    for (auto m : draw.members) {
      // Fit the placebo unit on weeks 0..9 against every other donor.
      const auto row = static_cast<Eigen::Index>(f.donor_rows[m]);
      Eigen::MatrixXd others(16, 18);
      for (std::size_t k = 0, o = 0; k < 17; ++k) {
        if (k != m) others.row(static_cast<Eigen::Index>(o++)) = y.row(static_cast<Eigen::Index>(f.donor_rows[k]));
      }
      const auto fit = oracle::exact_minimum(y.row(row).head(10).transpose(),
                                             others.leftCols(10).transpose(), 0.1);
      const Eigen::VectorXd tau = y.row(row).transpose() - others.transpose() * fit.w;
      psi += f.panel.population()[f.donor_rows[m]] / total * tau;
    }
    EXPECT_LT((psi - draw.psi).cwiseAbs().maxCoeff(), 1e-6);
    const double pre = std::sqrt(psi.head(10).squaredNorm() / 10);
    const double eval = std::sqrt(psi.segment(10, 4).squaredNorm() / 4);
    EXPECT_NEAR(draw.theta_treatment, eval / pre, 1e-6);
  }
}

TEST(Placebo, LargeEffectLandsInUpperTail) {
  const auto f = make_fixture(8.0, false);
  const auto inf = placebo_inference(f.setup(1000, 9), f.treated);
  EXPECT_GT(inf.rho_treatment, 0.95);
  EXPECT_LT(inf.p_tail_treatment, 0.05);
}

TEST(Placebo, InputErrors) {
  const auto f = make_fixture(0.0, false);
  auto s = f.setup(10, 1);
  s.donor_pi.pop_back();
  EXPECT_THROW(placebo_inference(s, f.treated), ReferenceError);
  s = f.setup(0, 1);
  EXPECT_THROW(placebo_inference(s, f.treated), DomainError);
  s = f.setup(10, 1);
  s.donor_rows.resize(1);
  s.donor_pi.resize(1);
  EXPECT_THROW(placebo_inference(s, f.treated), DomainError);
}
