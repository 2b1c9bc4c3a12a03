#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pscm/effects.hpp"
#include "pscm/error.hpp"
#include "pscm/parallel.hpp"
#include "pscm/propensity.hpp"
#include "pscm/rng.hpp"

namespace pscm {

struct GaussianComponent {
  double weight = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

// Mixture fitted on z-scored covariates; `standardization` maps raw inputs.
struct MixtureModel {
  std::vector<GaussianComponent> components;
  Standardization standardization;
  double log_likelihood = 0.0;
  double bic = 0.0;
  Eigen::Index n_obs = 0;
  // (k, BIC) for every candidate; NaN when all restarts degenerated.
  std::vector<std::pair<int, double>> bic_path;

  int k() const noexcept { return static_cast<int>(components.size()); }
  Eigen::Index dim() const noexcept { return standardization.mean.size(); }

  static long long parameter_count(int k, Eigen::Index d) {
    return (k - 1) + k * d + k * d * (d + 1) / 2;
  }
};

struct GmmOptions {
  int k_min = 1;
  int k_max = 9;
  int restarts = 10;
  double ridge = 1e-6;
  double tolerance = 1e-7;  // relative change in log-likelihood
  int max_iterations = 1000;
  int jobs = 1;
};

namespace detail {

inline constexpr double kLog2Pi = 1.8378770664093454836;

// log N(x_i | mean, cov) for every row of z.
inline Eigen::VectorXd log_density(const Eigen::MatrixXd& z, const GaussianComponent& c) {
  const Eigen::LLT<Eigen::MatrixXd> llt(c.covariance);
  if (llt.info() != Eigen::Success) throw NumericError("covariance is not positive definite");
  const Eigen::MatrixXd L = llt.matrixL();
  const double log_det = 2.0 * L.diagonal().array().log().sum();
  const Eigen::MatrixXd centered = (z.rowwise() - c.mean.transpose()).transpose();
  const Eigen::MatrixXd solved = L.triangularView<Eigen::Lower>().solve(centered);
  const Eigen::VectorXd mahal = solved.colwise().squaredNorm().transpose();
  return (-0.5 * (static_cast<double>(z.cols()) * kLog2Pi + log_det + mahal.array())).matrix();
}

// Log-responsibilities (n x k) and total log-likelihood.
inline double e_step(const Eigen::MatrixXd& z, const std::vector<GaussianComponent>& comps,
                     Eigen::MatrixXd& resp) {
  const Eigen::Index n = z.rows();
  const auto k = static_cast<Eigen::Index>(comps.size());
  resp.resize(n, k);
  for (Eigen::Index c = 0; c < k; ++c) {
    resp.col(c) = log_density(z, comps[static_cast<std::size_t>(c)]).array() +
                  std::log(comps[static_cast<std::size_t>(c)].weight);
  }
  double ll = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = resp.row(i).maxCoeff();
    const double lse = m + std::log((resp.row(i).array() - m).exp().sum());
    resp.row(i) = (resp.row(i).array() - lse).exp();
    ll += lse;
  }
  return ll;
}

// Returns false when a component is left with fewer than d + 1 effective points.
inline bool m_step(const Eigen::MatrixXd& z, const Eigen::MatrixXd& resp, double ridge,
                   std::vector<GaussianComponent>& comps) {
  const Eigen::Index n = z.rows();
  const Eigen::Index d = z.cols();
  comps.resize(static_cast<std::size_t>(resp.cols()));
  for (Eigen::Index c = 0; c < resp.cols(); ++c) {
    const double nc = resp.col(c).sum();
    if (!(nc >= static_cast<double>(d + 1))) return false;
    auto& comp = comps[static_cast<std::size_t>(c)];
    comp.weight = nc / static_cast<double>(n);
    comp.mean = (z.transpose() * resp.col(c)) / nc;
    const Eigen::MatrixXd centered = z.rowwise() - comp.mean.transpose();
    comp.covariance = (centered.transpose() * resp.col(c).asDiagonal() * centered) / nc;
    comp.covariance.diagonal().array() += ridge;
  }
  return true;
}

struct EmRun {
  bool ok = false;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  std::vector<GaussianComponent> components;
};

// k-means++ seeding, hard assignment to the nearest seed, then EM.
inline EmRun run_em(const Eigen::MatrixXd& z, int k, RandomStream rng, const GmmOptions& opt) {
  const Eigen::Index n = z.rows();
  EmRun run;
  std::vector<Eigen::Index> centers{static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)))};
  Eigen::VectorXd d2 = (z.rowwise() - z.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < k) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centers.push_back(pick);
    d2 = d2.cwiseMin((z.rowwise() - z.row(pick)).rowwise().squaredNorm());
  }
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      const double dist = (z.row(i) - z.row(centers[static_cast<std::size_t>(c)])).squaredNorm();
      if (dist < bd) {
        bd = dist;
        best = c;
      }
    }
    resp(i, best) = 1.0;
  }
  std::vector<GaussianComponent> comps;
  if (!m_step(z, resp, opt.ridge, comps)) return run;
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < opt.max_iterations; ++it) {
    const double ll = e_step(z, comps, resp);
    if (!std::isfinite(ll)) return run;
    if (std::abs(ll - prev) <= opt.tolerance * std::max(1.0, std::abs(ll))) {
      prev = ll;
      break;
    }
    prev = ll;
    if (!m_step(z, resp, opt.ridge, comps)) return run;
  }
  run.ok = true;
  run.log_likelihood = prev;
  run.components = std::move(comps);
  return run;
}

}  // namespace detail

// Fits mixtures for k in [k_min, k_max] with `restarts` seeded restarts each
// and keeps the k with the smallest BIC. Components are ordered by their mean
// vectors (lexicographically) so labels do not depend on restart order.
inline MixtureModel fit_gmm(const Eigen::MatrixXd& covariates, std::uint64_t seed,
                            const GmmOptions& opt = {}) {
  const Eigen::Index n = covariates.rows();
  const Eigen::Index d = covariates.cols();
  if (opt.k_min < 1 || opt.k_max < opt.k_min) throw DomainError("invalid k range");
  if (n <= static_cast<Eigen::Index>(opt.k_max) * (d + 1)) {
    throw DomainError("mixture fit needs more than k_max * (dim + 1) = " +
                      std::to_string(opt.k_max * (d + 1)) + " observations, got " +
                      std::to_string(n));
  }
  if (!covariates.allFinite()) throw NumericError("non-finite covariate values");

  MixtureModel model;
  model.standardization = Standardization::fit(covariates);
  const Eigen::MatrixXd z = model.standardization.apply(covariates);
  model.n_obs = n;

  const int n_k = opt.k_max - opt.k_min + 1;
  const auto runs = static_cast<std::size_t>(n_k * opt.restarts);
  std::vector<detail::EmRun> results(runs);
  parallel_for(runs, opt.jobs, [&](std::size_t idx) {
    const int k = opt.k_min + static_cast<int>(idx) / opt.restarts;
    const auto restart = static_cast<std::uint32_t>(static_cast<int>(idx) % opt.restarts);
    RandomStream rng(seed, (streams::kClustering << 24) ^ static_cast<std::uint32_t>(k), restart);
    results[idx] = detail::run_em(z, k, rng, opt);
  });

  double best_bic = std::numeric_limits<double>::infinity();
  const double log_n = std::log(static_cast<double>(n));
  for (int ki = 0; ki < n_k; ++ki) {
    const int k = opt.k_min + ki;
    const detail::EmRun* best = nullptr;
    for (int r = 0; r < opt.restarts; ++r) {
      const auto& run = results[static_cast<std::size_t>(ki * opt.restarts + r)];
      if (run.ok && (best == nullptr || run.log_likelihood > best->log_likelihood)) best = &run;
    }
    if (best == nullptr) {
      model.bic_path.emplace_back(k, std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double bic = -2.0 * best->log_likelihood +
                       static_cast<double>(MixtureModel::parameter_count(k, d)) * log_n;
    model.bic_path.emplace_back(k, bic);
    if (bic < best_bic) {
      best_bic = bic;
      model.components = best->components;
      model.log_likelihood = best->log_likelihood;
      model.bic = bic;
    }
  }
  if (model.components.empty()) {
    throw ModelError("every mixture restart degenerated (vanishing component)");
  }
  std::sort(model.components.begin(), model.components.end(),
            [](const GaussianComponent& a, const GaussianComponent& b) {
              return std::lexicographical_compare(a.mean.begin(), a.mean.end(), b.mean.begin(),
                                                  b.mean.end());
            });
  return model;
}

struct Assignment {
  std::vector<int> labels;
  Eigen::MatrixXd responsibilities;
  std::vector<double> max_responsibility;
};

// Hard labels by maximum posterior responsibility (lowest index on ties).
inline Assignment assign(const MixtureModel& model, const Eigen::MatrixXd& covariates) {
  if (covariates.cols() != model.dim()) {
    throw ReferenceError("covariate columns do not match the fitted mixture");
  }
  Assignment a;
  const Eigen::MatrixXd z = model.standardization.apply(covariates);
  detail::e_step(z, model.components, a.responsibilities);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < a.responsibilities.cols(); ++c) {
      if (a.responsibilities(i, c) > a.responsibilities(i, best)) best = c;
    }
    a.labels.push_back(static_cast<int>(best));
    a.max_responsibility.push_back(a.responsibilities(i, best));
  }
  return a;
}

struct ClusterRow {
  int cluster = 0;
  std::size_t n_units = 0;
  double share = 0.0;
  Eigen::VectorXd mean_covariates;  // raw scale
  double ate_treatment = 0.0;
  std::optional<double> ate_post;
  std::optional<double> sd_treatment;
  std::optional<double> sd_post;
};

struct ClusterReport {
  std::vector<std::string> covariates;
  std::vector<ClusterRow> rows;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::optional<double> sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return std::nullopt;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace detail

// Per-cluster population-weighted mean of unit window means, the unweighted
// across-unit standard deviation (n - 1 divisor), and the share of units.
inline ClusterReport cluster_ate(std::span<const int> labels, int k,
                                 std::span<const UnitSummary> units,
                                 std::span<const double> population,
                                 const Eigen::MatrixXd& raw_covariates,
                                 std::vector<std::string> covariate_names) {
  if (labels.size() != units.size() || population.size() != units.size() ||
      static_cast<std::size_t>(raw_covariates.rows()) != units.size()) {
    throw ReferenceError("cluster labels, effects and covariates do not align");
  }
  ClusterReport report;
  report.covariates = std::move(covariate_names);
  for (int c = 0; c < k; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(i);
    }
    if (members.empty()) {
      report.warnings.push_back("cluster " + std::to_string(c + 1) + " is empty; omitted");
      continue;
    }
    ClusterRow row;
    row.cluster = c + 1;
    row.n_units = members.size();
    row.share = static_cast<double>(members.size()) / static_cast<double>(labels.size());
    row.mean_covariates = Eigen::VectorXd::Zero(raw_covariates.cols());
    double pop_t = 0.0, acc_t = 0.0, pop_p = 0.0, acc_p = 0.0;
    std::vector<double> treat_means, post_means;
    for (auto i : members) {
      row.mean_covariates += raw_covariates.row(static_cast<Eigen::Index>(i)).transpose();
      pop_t += population[i];
      acc_t += population[i] * units[i].treatment_mean;
      treat_means.push_back(units[i].treatment_mean);
      if (units[i].post_mean) {
        pop_p += population[i];
        acc_p += population[i] * *units[i].post_mean;
        post_means.push_back(*units[i].post_mean);
      }
    }
    row.mean_covariates /= static_cast<double>(members.size());
    row.ate_treatment = acc_t / pop_t;
    if (pop_p > 0.0) row.ate_post = acc_p / pop_p;
    row.sd_treatment = detail::sample_sd(treat_means);
    row.sd_post = detail::sample_sd(post_means);
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace pscm
