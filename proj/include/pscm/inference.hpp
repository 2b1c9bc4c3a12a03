#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "pscm/effects.hpp"
#include "pscm/error.hpp"
#include "pscm/panel.hpp"
#include "pscm/parallel.hpp"
#include "pscm/rng.hpp"
#include "pscm/solver.hpp"

namespace pscm {

struct ThetaStat {
  std::string id;
  double theta = 0.0;
  double rmspe_eval = 0.0;
  double rmspe_pre = 0.0;
};

// theta = RMS(tau over eval) / RMS(tau over pre). The RMS squares tau.
inline ThetaStat theta(std::span<const double> tau, Window pre, Window eval, std::string id = {}) {
  ThetaStat s;
  s.id = std::move(id);
  s.rmspe_pre = rms(tau, pre);
  s.rmspe_eval = rms(tau, eval);
  if (!(s.rmspe_pre > 0.0)) {
    throw DegenerateFitError("pre-window RMSPE is zero; theta is undefined" +
                             (s.id.empty() ? std::string{} : " for " + s.id));
  }
  s.theta = s.rmspe_eval / s.rmspe_pre;
  return s;
}

// Fraction of control statistics strictly below theta_i.
inline double p_value_unweighted(double theta_i, std::span<const double> theta_controls) {
  if (theta_controls.empty()) throw DomainError("p-value needs at least one control statistic");
  std::size_t count = 0;
  for (double t : theta_controls) count += theta_i > t ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(theta_controls.size());
}

// sum_j kappa_j * 1[theta_i > theta_j].
inline double p_value_weighted(double theta_i, std::span<const double> theta_controls,
                               std::span<const double> kappa) {
  if (kappa.size() != theta_controls.size()) {
    throw ReferenceError("kappa weights do not match the control statistics");
  }
  if (theta_controls.empty()) throw DomainError("p-value needs at least one control statistic");
  double total = 0.0, rho = 0.0;
  for (std::size_t j = 0; j < kappa.size(); ++j) {
    if (!(kappa[j] >= 0.0)) throw DomainError("kappa weights must be non-negative");
    total += kappa[j];
    if (theta_i > theta_controls[j]) rho += kappa[j];
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("kappa weights must sum to 1");
  // Equal weights reduce to the counting formula; count to avoid rounding.
  if (std::adjacent_find(kappa.begin(), kappa.end(), std::not_equal_to<>()) == kappa.end()) {
    return p_value_unweighted(theta_i, theta_controls);
  }
  return std::min(1.0, rho);
}

// Type-7 (linear interpolation) sample quantile.
inline double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw DomainError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Schedule and penalty of one member of the treated pool; the k-th placebo
// unit inherits the k-th slot.
struct PlaceboSlot {
  int adoption = 0;
  int lottery_end = 0;
  double lambda = 0.0;
  friend auto operator<=>(const PlaceboSlot&, const PlaceboSlot&) = default;
};

struct PlaceboSetup {
  const PanelData* panel = nullptr;
  std::vector<std::size_t> donor_rows;  // panel rows of the donor pool
  std::vector<double> donor_pi;         // propensity score per donor
  std::vector<PlaceboSlot> slots;       // one per treated pool member (M)
  int t0 = 0;                           // reference adoption week for alignment
  Pooling mode = Pooling::calendar;
  std::size_t replicates = 1000;
  std::uint64_t seed = 0;
  std::uint32_t stream = 0;  // distinguishes pools within one run
  int jobs = 1;
  // false gives every replicate the same weight instead of prod(pi).
  bool likelihood_weights = true;
};

struct PlaceboDraw {
  std::vector<std::size_t> members;  // indices into the donor pool
  Eigen::VectorXd psi;
  double psi_treatment = 0.0;
  std::optional<double> psi_post;
  double theta_treatment = 0.0;
  std::optional<double> theta_post;
  double log_likelihood = 0.0;
};

struct PlaceboDistribution {
  std::vector<PlaceboDraw> draws;
  std::vector<double> normalized_weights;
  std::uint64_t seed = 0;
};

struct QuantileBand {
  std::vector<int> weeks;
  Eigen::VectorXd q05;
  Eigen::VectorXd q95;
  Eigen::VectorXd psi_treated;
};

struct PlaceboInference {
  PlaceboDistribution distribution;
  ThetaStat theta_treatment;
  std::optional<ThetaStat> theta_post;
  double rho_treatment = 0.0;     // sum_J w_J 1[Theta_treated > Theta_J]
  double p_tail_treatment = 1.0;  // sum_J w_J 1[Theta_treated <= Theta_J]
  std::optional<double> rho_post;
  std::optional<double> p_tail_post;
  QuantileBand band;
};

namespace detail {

inline std::uint32_t placebo_stream(std::uint32_t pool) {
  return (streams::kPlacebo << 24) ^ pool;
}

inline std::pair<double, double> weighted_tail(double theta_treated,
                                               const std::vector<double>& thetas,
                                               const std::vector<double>& weights) {
  if (std::adjacent_find(weights.begin(), weights.end(), std::not_equal_to<>()) == weights.end()) {
    std::size_t above = 0;
    for (double t : thetas) above += theta_treated > t ? 1 : 0;
    const auto n = static_cast<double>(thetas.size());
    return {static_cast<double>(above) / n, static_cast<double>(thetas.size() - above) / n};
  }
  double rho = 0.0, tail = 0.0;
  for (std::size_t r = 0; r < thetas.size(); ++r) {
    if (theta_treated > thetas[r]) {
      rho += weights[r];
    } else {
      tail += weights[r];
    }
  }
  return {std::min(1.0, rho), std::min(1.0, tail)};
}

}  // namespace detail

// Placebo-state resampling: each replicate draws M donors with replacement,
// gives the k-th draw the k-th treated slot's schedule and penalty, fits it
// against the other donors, pools the placebo effects with population
// weights, and records Theta and the likelihood prod(pi). Placebo fits are a
// pure function of (donor, slot), so they are computed once and shared by
// all replicates.
inline PlaceboInference placebo_inference(const PlaceboSetup& setup, const PooledEffect& treated) {
  if (setup.panel == nullptr) throw DomainError("placebo inference without a panel");
  const PanelData& panel = *setup.panel;
  const std::size_t pool = setup.donor_rows.size();
  if (pool < 2) throw DomainError("placebo inference needs a donor pool of at least 2");
  if (setup.donor_pi.size() != pool) throw ReferenceError("propensity scores do not match donors");
  if (setup.replicates < 1) throw DomainError("placebo inference needs at least one replicate");
  if (setup.slots.empty()) throw DomainError("placebo inference needs a non-empty treated pool");

  PlaceboInference out;
  out.theta_treatment = theta(as_span(treated.psi), treated.pre, treated.treat, treated.selector);
  if (!treated.post.empty()) {
    out.theta_post = theta(as_span(treated.psi), treated.pre, treated.post, treated.selector);
  }

  // Distinct slot signatures.
  std::vector<PlaceboSlot> signatures(setup.slots);
  std::sort(signatures.begin(), signatures.end());
  signatures.erase(std::unique(signatures.begin(), signatures.end()), signatures.end());
  std::vector<std::size_t> slot_sig(setup.slots.size());
  for (std::size_t k = 0; k < setup.slots.size(); ++k) {
    slot_sig[k] = static_cast<std::size_t>(
        std::lower_bound(signatures.begin(), signatures.end(), setup.slots[k]) -
        signatures.begin());
  }

  const Eigen::MatrixXd& Y = panel.outcomes();
  const int last = panel.last_week();
  std::vector<std::vector<EffectSeries>> cache(pool, std::vector<EffectSeries>(signatures.size()));
  parallel_for(pool, setup.jobs, [&](std::size_t d) {
    const auto row = static_cast<Eigen::Index>(setup.donor_rows[d]);
    Eigen::MatrixXd others(static_cast<Eigen::Index>(pool - 1), Y.cols());
    for (std::size_t k = 0, r = 0; k < pool; ++k) {
      if (k != d) others.row(static_cast<Eigen::Index>(r++)) =
                      Y.row(static_cast<Eigen::Index>(setup.donor_rows[k]));
    }
    for (std::size_t s = 0; s < signatures.size(); ++s) {
      const auto& sig = signatures[s];
      AlignedSeries a = align_spell(panel.units()[setup.donor_rows[d]],
                                    {sig.adoption, sig.lottery_end}, setup.t0, last);
      const Eigen::VectorXd target = Y.row(row).segment(a.pre.begin, a.pre.size()).transpose();
      const Eigen::MatrixXd donors = others.middleCols(a.pre.begin, a.pre.size()).transpose();
      const FitResult fit = SimplexQp(target, donors).solve(sig.lambda);
      EffectSeries e;
      e.unit = a.unit;
      e.windows = a;
      e.tau = Y.row(row).transpose() - others.transpose() * fit.omega;
      cache[d][s] = std::move(e);
    }
  });

  const std::size_t M = setup.slots.size();
  std::vector<PlaceboDraw> draws(setup.replicates);
  parallel_for(setup.replicates, setup.jobs, [&](std::size_t r) {
    RandomStream rng(setup.seed, detail::placebo_stream(setup.stream),
                     static_cast<std::uint32_t>(r));
    constexpr int kMaxAttempts = 100;
    for (int attempt = 0;; ++attempt) {
      PlaceboDraw draw;
      std::vector<EffectSeries> members;
      std::vector<double> eta;
      double total_pop = 0.0;
      members.reserve(M);
      for (std::size_t k = 0; k < M; ++k) {
        const auto d = static_cast<std::size_t>(rng.below(pool));
        draw.members.push_back(d);
        members.push_back(cache[d][slot_sig[k]]);
        const double pop = panel.population()[setup.donor_rows[d]];
        eta.push_back(pop);
        total_pop += pop;
        draw.log_likelihood += std::log(setup.donor_pi[d]);
      }
      for (auto& e : eta) e /= total_pop;
      const PooledEffect pooled = pooled_effect(members, eta, setup.mode);
      const double pre = rms(as_span(pooled.psi), pooled.pre);
      if (!(pre > 0.0)) {
        if (attempt + 1 >= kMaxAttempts) {
          throw InferenceError("placebo replicate " + std::to_string(r) +
                               " kept producing zero pre-window RMSPE");
        }
        continue;
      }
      draw.psi = pooled.psi;
      draw.psi_treatment = pooled.psi_treatment;
      draw.psi_post = pooled.psi_post;
      draw.theta_treatment = rms(as_span(pooled.psi), pooled.treat) / pre;
      if (!pooled.post.empty()) draw.theta_post = rms(as_span(pooled.psi), pooled.post) / pre;
      draws[r] = std::move(draw);
      break;
    }
  });

  // Likelihood weights via log-sum-exp.
  double max_ll = -std::numeric_limits<double>::infinity();
  for (const auto& d : draws) max_ll = std::max(max_ll, d.log_likelihood);
  std::vector<double> weights(draws.size());
  double total = 0.0;
  for (std::size_t r = 0; r < draws.size(); ++r) {
    weights[r] = setup.likelihood_weights ? std::exp(draws[r].log_likelihood - max_ll) : 1.0;
    total += weights[r];
  }
  for (auto& w : weights) w /= total;

  std::vector<double> thetas(draws.size());
  for (std::size_t r = 0; r < draws.size(); ++r) thetas[r] = draws[r].theta_treatment;
  std::tie(out.rho_treatment, out.p_tail_treatment) =
      detail::weighted_tail(out.theta_treatment.theta, thetas, weights);
  if (out.theta_post) {
    for (std::size_t r = 0; r < draws.size(); ++r) thetas[r] = *draws[r].theta_post;
    auto [rho, tail] = detail::weighted_tail(out.theta_post->theta, thetas, weights);
    out.rho_post = rho;
    out.p_tail_post = tail;
  }

  const Eigen::Index len = treated.psi.size();
  out.band.weeks = treated.weeks;
  out.band.psi_treated = treated.psi;
  out.band.q05.resize(len);
  out.band.q95.resize(len);
  std::vector<double> column(draws.size());
  for (Eigen::Index t = 0; t < len; ++t) {
    for (std::size_t r = 0; r < draws.size(); ++r) column[r] = draws[r].psi[t];
    out.band.q05[t] = quantile(column, 0.05);
    out.band.q95[t] = quantile(column, 0.95);
  }

  out.distribution.draws = std::move(draws);
  out.distribution.normalized_weights = std::move(weights);
  out.distribution.seed = setup.seed;
  return out;
}

}  // namespace pscm
