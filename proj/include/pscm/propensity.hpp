#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pscm/error.hpp"
#include "pscm/panel.hpp"

namespace pscm {

// Column means and sample standard deviations; constant columns get scale 1.
struct Standardization {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static Standardization fit(const Eigen::MatrixXd& x) {
    Standardization s;
    const auto n = static_cast<double>(x.rows());
    s.mean = x.colwise().mean().transpose();
    s.scale.resize(x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double var =
          n > 1 ? (x.col(c).array() - s.mean[c]).square().sum() / (n - 1.0) : 0.0;
      s.scale[c] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    if (x.cols() != mean.size()) throw ReferenceError("covariate schema mismatch");
    return ((x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array())
        .matrix();
  }
};

// Logistic model on standardized covariates; coefficients[0] is the intercept.
struct PropensityModel {
  std::vector<std::string> covariates;
  Standardization standardization;
  Eigen::VectorXd coefficients;
  int iterations = 0;
  double gradient_norm = 0.0;
  bool separated = false;  // classes perfectly separated by the linear score

  // Scores are clamped to [1e-12, 1 - 1e-12] so they stay strictly inside (0, 1).
  Eigen::VectorXd scores(const Eigen::MatrixXd& x) const {
    const Eigen::MatrixXd z = standardization.apply(x);
    Eigen::VectorXd eta = (z * coefficients.tail(coefficients.size() - 1)).array() +
                          coefficients[0];
    return eta.unaryExpr([](double v) {
      const double p = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      return std::clamp(p, 1e-12, 1.0 - 1e-12);
    });
  }
};

namespace detail {

inline double log1p_exp(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

}  // namespace detail

// Ridge-penalized maximum likelihood (penalty on slopes only) by damped
// Newton iterations until the mean-scaled gradient norm is below 1e-8.
inline PropensityModel fit_propensity(const Eigen::MatrixXd& covariates, std::span<const int> labels,
                                      std::vector<std::string> names = {}, double ridge = 1e-6) {
  const Eigen::Index n = covariates.rows();
  const Eigen::Index p = covariates.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw ReferenceError("propensity labels do not match covariate rows");
  }
  if (!covariates.allFinite()) throw NumericError("non-finite covariate values");
  Eigen::Index positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DomainError("propensity labels must be 0 or 1");
    positives += y;
  }
  if (positives == 0 || positives == n) {
    throw ModelError("propensity model needs both treated and control units");
  }

  PropensityModel model;
  model.covariates = std::move(names);
  model.standardization = Standardization::fit(covariates);
  Eigen::MatrixXd design(n, p + 1);
  design.col(0).setOnes();
  design.rightCols(p) = model.standardization.apply(covariates);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = labels[static_cast<std::size_t>(i)];

  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p + 1, ridge);
  penalty[0] = 0.0;

  auto objective = [&](const Eigen::VectorXd& beta) {
    const Eigen::VectorXd eta = design * beta;
    double nll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) nll += detail::log1p_exp(eta[i]) - y[i] * eta[i];
    return nll + 0.5 * (penalty.array() * beta.array().square()).sum();
  };

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p + 1);
  const double prior = static_cast<double>(positives) / static_cast<double>(n);
  beta[0] = std::log(prior / (1.0 - prior));
  double f = objective(beta);
  constexpr int kMaxIter = 500;
  int it = 0;
  double gnorm = 0.0;
  for (; it < kMaxIter; ++it) {
    const Eigen::VectorXd eta = design * beta;
    Eigen::VectorXd mu(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = eta[i] >= 0 ? 1.0 / (1.0 + std::exp(-eta[i]))
                          : std::exp(eta[i]) / (1.0 + std::exp(eta[i]));
      w[i] = mu[i] * (1.0 - mu[i]);
    }
    const Eigen::VectorXd grad =
        design.transpose() * (mu - y) + (penalty.array() * beta.array()).matrix();
    gnorm = grad.cwiseAbs().maxCoeff() / static_cast<double>(n);
    if (gnorm <= 1e-8) break;
    Eigen::MatrixXd hess = design.transpose() * w.asDiagonal() * design;
    hess.diagonal() += penalty;
    // Tiny jitter keeps the factorization usable when the weights vanish.
    hess.diagonal().array() += 1e-12 * std::max(1.0, hess.diagonal().maxCoeff());
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    if (!step.allFinite()) break;
    double t = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      const Eigen::VectorXd cand = beta - t * step;
      const double fc = objective(cand);
      if (fc <= f - 1e-4 * t * grad.dot(step) || (fc <= f && t < 1e-6)) {
        beta = cand;
        f = fc;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }

  const Eigen::VectorXd eta = design * beta;
  double min_pos = std::numeric_limits<double>::infinity();
  double max_neg = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y[i] > 0.5) {
      min_pos = std::min(min_pos, eta[i]);
    } else {
      max_neg = std::max(max_neg, eta[i]);
    }
  }
  model.separated = min_pos > max_neg;
  model.coefficients = beta;
  model.iterations = it;
  model.gradient_norm = gnorm;
  if (!beta.allFinite() || gnorm > 1e-8) {
    throw ModelError("propensity fit did not converge (gradient norm " + std::to_string(gnorm) +
                     " after " + std::to_string(it) + " iterations" +
                     (model.separated ? ", classes perfectly separated" : "") + ")");
  }
  return model;
}

// Median of a sample; the midpoint of the two central values for even counts.
inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct DonorPool {
  std::vector<UnitId> members;
  std::vector<double> pi;
  std::vector<double> xi;
  double median_pi = 0.0;
};

// Controls with pi >= median(pi), in input order, with xi_j = pi_j / sum(pi).
inline DonorPool select_donor_pool(const std::vector<UnitId>& controls, std::span<const double> pi) {
  if (controls.size() != pi.size()) throw ReferenceError("scores do not match control ids");
  if (controls.size() < 2) throw DomainError("donor pool selection needs at least two controls");
  DonorPool pool;
  pool.median_pi = median(std::vector<double>(pi.begin(), pi.end()));
  double total = 0.0;
  for (std::size_t j = 0; j < controls.size(); ++j) {
    if (!(pi[j] > 0.0) || !std::isfinite(pi[j])) {
      throw DomainError("propensity scores must be positive and finite");
    }
    if (pi[j] >= pool.median_pi) {
      pool.members.push_back(controls[j]);
      pool.pi.push_back(pi[j]);
      total += pi[j];
    }
  }
  for (double v : pool.pi) pool.xi.push_back(v / total);
  return pool;
}

}  // namespace pscm
