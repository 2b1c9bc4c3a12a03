#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pscm/error.hpp"
#include "pscm/panel.hpp"
#include "pscm/parallel.hpp"

namespace pscm {

// One penalized synthetic-control fit: the target's fit-window outcomes and
// the donors' outcomes over the same weeks (one column per donor).
struct FitProblem {
  Eigen::VectorXd target;
  Eigen::MatrixXd donors;
  double lambda = 0.0;
};

struct FitResult {
  Eigen::VectorXd omega;
  double objective = 0.0;  // fit term + lambda * penalty
  double fit = 0.0;        // ||x - X w||^2
  double penalty = 0.0;    // sum_j w_j ||x - x_j||^2
  double gap = 0.0;        // Frank-Wolfe duality gap, an upper bound on suboptimality
  int iterations = 0;
  bool converged = false;
};

// Donor weights attached to donor ids.
struct WeightVector {
  std::vector<UnitId> donors;
  Eigen::VectorXd omega;
};

// Euclidean projection onto the probability simplex (sort-based).
inline Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v) {
  const Eigen::Index n = v.size();
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, theta = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    cumsum += u[static_cast<std::size_t>(j)];
    const double t = (cumsum - 1.0) / static_cast<double>(j + 1);
    if (u[static_cast<std::size_t>(j)] - t > 0.0) theta = t;
  }
  return (v.array() - theta).max(0.0).matrix();
}

// min_w ||x - X w||^2 + lambda * sum_j w_j ||x - x_j||^2 over the simplex.
//
// Primal active-set method: on the current face (free set F) take the Newton
// step of the equality-constrained subproblem, using an eigendecomposition
// of the reduced Hessian so rank-deficient faces are handled (zero-curvature
// descent directions run to the boundary). A face is left when a weight hits
// zero and extended by the most negative reduced multiplier. Problem data
// that does not depend on lambda is cached, so a lambda path reuses it.
class SimplexQp {
 public:
  SimplexQp(Eigen::VectorXd target, Eigen::MatrixXd donors)
      : x_(std::move(target)), X_(std::move(donors)) {
    if (X_.cols() < 1) throw DomainError("fit problem needs at least one donor");
    if (X_.rows() != x_.size()) {
      throw DomainError("donor and target vectors differ in length");
    }
    if (x_.size() < 2) throw DomainError("fit window needs at least two weeks");
    if (!x_.allFinite() || !X_.allFinite()) throw NumericError("non-finite fit problem input");
    gram_ = X_.transpose() * X_;
    dist_.resize(X_.cols());
    for (Eigen::Index j = 0; j < X_.cols(); ++j) dist_[j] = (x_ - X_.col(j)).squaredNorm();
  }

  Eigen::Index n_donors() const noexcept { return X_.cols(); }
  const Eigen::VectorXd& distances() const noexcept { return dist_; }

  double fit_term(const Eigen::VectorXd& w) const { return (x_ - X_ * w).squaredNorm(); }
  double penalty_term(const Eigen::VectorXd& w) const { return dist_.dot(w); }
  double objective(const Eigen::VectorXd& w, double lambda) const {
    return fit_term(w) + lambda * penalty_term(w);
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& w, double lambda) const {
    return 2.0 * (X_.transpose() * (X_ * w - x_)) + lambda * dist_;
  }

  FitResult solve(double lambda, const Eigen::VectorXd* start = nullptr) const {
    if (!std::isfinite(lambda) || lambda < 0.0) {
      throw NumericError("penalty lambda must be finite and non-negative");
    }
    const Eigen::Index n = X_.cols();
    Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
    if (start != nullptr && start->size() == n && start->allFinite()) {
      // Tiny carried-over weights make degenerate faces; drop them.
      w = project_to_simplex(*start);
      w = (w.array() > 1e-9).select(w, 0.0);
      w /= w.sum();
    } else {
      Eigen::Index best = 0;
      dist_.minCoeff(&best);
      w[best] = 1.0;
    }

    // Problem scale for the tolerances: objective at the nearest donor.
    const double scale = std::max(1.0, (1.0 + lambda) * dist_.minCoeff());

    FitResult r;
    r.iterations = active_set(w, lambda);
    double gap = duality_gap(w, lambda);
    if (gap > kGapTol * scale) {
      // Rare: cycling on a degenerate face. Polish with accelerated projected
      // gradient and re-run the active set from there.
      projected_gradient(w, lambda, scale);
      r.iterations += active_set(w, lambda);
      gap = duality_gap(w, lambda);
    }
    r.omega = std::move(w);
    r.fit = fit_term(r.omega);
    r.penalty = penalty_term(r.omega);
    r.objective = r.fit + lambda * r.penalty;
    r.gap = gap;
    r.converged = gap <= kGapTol * scale;
    return r;
  }

  double duality_gap(const Eigen::VectorXd& w, double lambda) const {
    const Eigen::VectorXd g = gradient(w, lambda);
    return std::max(0.0, g.dot(w) - g.minCoeff());
  }

 private:
  static constexpr double kGapTol = 1e-8;
  static constexpr double kKktTol = 1e-11;
  static constexpr double kEigTol = 1e-12;

  // Returns the number of iterations taken.
  int active_set(Eigen::VectorXd& w, double lambda) const {
    const Eigen::Index n = X_.cols();
    std::vector<Eigen::Index> free;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (w[j] > 0.0) free.push_back(j);
    }
    const int max_iter = 20 * static_cast<int>(n) + 100;
    int iter = 0;
    for (; iter < max_iter; ++iter) {
      const Eigen::VectorXd g = gradient(w, lambda);
      const double tol = kKktTol * std::max(1.0, g.cwiseAbs().maxCoeff());

      // Multiplier of the sum constraint on the face.
      double mu = 0.0;
      for (auto j : free) mu += g[j];
      mu /= static_cast<double>(free.size());
      double face_violation = 0.0;
      for (auto j : free) face_violation = std::max(face_violation, std::abs(g[j] - mu));

      if (face_violation > tol && free.size() > 1) {
        bool unbounded = false;
        const Eigen::VectorXd p = face_step(w, g, free, tol, unbounded);
        if (p.cwiseAbs().maxCoeff() > 0.0) {
          double alpha_block = std::numeric_limits<double>::infinity();
          Eigen::Index blocking = -1;
          for (auto j : free) {
            if (p[j] < 0.0) {
              const double a = w[j] / -p[j];
              if (a < alpha_block) {
                alpha_block = a;
                blocking = j;
              }
            }
          }
          const double alpha = unbounded ? alpha_block : std::min(1.0, alpha_block);
          if (!std::isfinite(alpha)) break;
          for (auto j : free) w[j] += alpha * p[j];
          const bool blocked = blocking >= 0 && alpha == alpha_block;
          if (blocked) w[blocking] = 0.0;
          std::erase_if(free, [&](Eigen::Index j) {
            if (w[j] <= 1e-15) {
              w[j] = 0.0;
              return true;
            }
            return false;
          });
          if (free.empty()) {
            // Cannot happen in exact arithmetic; restart from the best vertex.
            Eigen::Index best = 0;
            dist_.minCoeff(&best);
            w.setZero();
            w[best] = 1.0;
            free = {best};
          }
          w /= w.sum();
          continue;
        }
      }

      // Face is optimal: release the most violated bound, if any.
      Eigen::Index enter = -1;
      double most_negative = -tol;
      std::vector<char> in_free(static_cast<std::size_t>(n), 0);
      for (auto j : free) in_free[static_cast<std::size_t>(j)] = 1;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (in_free[static_cast<std::size_t>(j)]) continue;
        const double nu = g[j] - mu;
        if (nu < most_negative) {
          most_negative = nu;
          enter = j;
        }
      }
      if (enter < 0) break;
      free.insert(std::upper_bound(free.begin(), free.end(), enter), enter);
    }
    return iter;
  }

  // Newton (or zero-curvature descent) direction on the face {w_F, sum = 1}.
  Eigen::VectorXd face_step(const Eigen::VectorXd& w, const Eigen::VectorXd& g,
                            const std::vector<Eigen::Index>& free, double tol,
                            bool& unbounded) const {
    const Eigen::Index n = X_.cols();
    Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
    // Pivot on the largest free weight; other coordinates move freely and the
    // pivot absorbs the sum constraint.
    Eigen::Index pivot = free.front();
    for (auto j : free) {
      if (w[j] > w[pivot]) pivot = j;
    }
    std::vector<Eigen::Index> others;
    for (auto j : free) {
      if (j != pivot) others.push_back(j);
    }
    const auto k = static_cast<Eigen::Index>(others.size());
    Eigen::MatrixXd hr(k, k);
    Eigen::VectorXd gr(k);
    const double hpp = gram_(pivot, pivot);
    for (Eigen::Index a = 0; a < k; ++a) {
      const auto ia = others[static_cast<std::size_t>(a)];
      gr[a] = g[ia] - g[pivot];
      for (Eigen::Index b = 0; b < k; ++b) {
        const auto ib = others[static_cast<std::size_t>(b)];
        hr(a, b) = 2.0 * (gram_(ia, ib) - gram_(ia, pivot) - gram_(pivot, ib) + hpp);
      }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hr);
    const Eigen::VectorXd& ev = eig.eigenvalues();
    const Eigen::MatrixXd& V = eig.eigenvectors();
    const double emax = std::max(ev.cwiseAbs().maxCoeff(), 0.0);
    const double etol = kEigTol * std::max(emax, 1e-300);
    const Eigen::VectorXd coef = V.transpose() * gr;

    Eigen::VectorXd y = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd null_part = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      if (ev[i] > etol) {
        y -= (coef[i] / ev[i]) * V.col(i);
      } else {
        null_part += coef[i] * V.col(i);
      }
    }
    unbounded = null_part.cwiseAbs().maxCoeff() > tol;
    if (unbounded) y = -null_part;

    double sum = 0.0;
    for (Eigen::Index a = 0; a < k; ++a) {
      p[others[static_cast<std::size_t>(a)]] = y[a];
      sum += y[a];
    }
    p[pivot] = -sum;
    return p;
  }

  void projected_gradient(Eigen::VectorXd& w, double lambda, double scale) const {
    const double lipschitz = 2.0 * std::max(gram_.norm(), 1e-300);
    Eigen::VectorXd z = w, prev = w;
    double t = 1.0;
    double best = objective(w, lambda);
    Eigen::VectorXd best_w = w;
    for (int it = 0; it < 20000; ++it) {
      const Eigen::VectorXd next = project_to_simplex(z - gradient(z, lambda) / lipschitz);
      const double f = objective(next, lambda);
      if (f > best) {
        // Adaptive restart.
        t = 1.0;
        z = best_w;
        continue;
      }
      best = f;
      best_w = next;
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      z = next + ((t - 1.0) / t_next) * (next - prev);
      prev = next;
      t = t_next;
      if (it % 50 == 0 && duality_gap(next, lambda) <= kGapTol * scale) break;
    }
    w = best_w;
  }

  Eigen::VectorXd x_;
  Eigen::MatrixXd X_;
  Eigen::MatrixXd gram_;
  Eigen::VectorXd dist_;
};

inline FitResult fit_weights(const FitProblem& problem, const Eigen::VectorXd* start = nullptr) {
  return SimplexQp(problem.target, problem.donors).solve(problem.lambda, start);
}

// Objective of a candidate weight vector, evaluated directly.
inline double pscm_objective(const FitProblem& problem, const Eigen::VectorXd& w) {
  double penalty = 0.0;
  for (Eigen::Index j = 0; j < problem.donors.cols(); ++j) {
    penalty += w[j] * (problem.target - problem.donors.col(j)).squaredNorm();
  }
  return (problem.target - problem.donors * w).squaredNorm() + problem.lambda * penalty;
}

// Counterfactual series: sum_j w_j Y_j over every column of `donor_outcomes`
// (donors x weeks).
inline Eigen::VectorXd impute_counterfactual(const Eigen::VectorXd& omega,
                                             const Eigen::MatrixXd& donor_outcomes) {
  if (omega.size() != donor_outcomes.rows()) {
    throw ReferenceError("weight vector and donor outcome rows do not align");
  }
  return donor_outcomes.transpose() * omega;
}

inline Eigen::VectorXd impute_counterfactual(const WeightVector& weights, const PanelData& panel) {
  if (weights.omega.size() != static_cast<Eigen::Index>(weights.donors.size())) {
    throw ReferenceError("weight vector ids and values differ in length");
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(panel.n_weeks());
  for (std::size_t j = 0; j < weights.donors.size(); ++j) {
    const auto row = panel.find(weights.donors[j]);
    if (!row) throw ReferenceError("donor " + weights.donors[j] + " is not in the panel");
    const double wj = weights.omega[static_cast<Eigen::Index>(j)];
    if (wj != 0.0) out += wj * panel.outcomes().row(static_cast<Eigen::Index>(*row)).transpose();
  }
  return out;
}

// Root mean square of (actual - predicted) over the window.
inline double rmspe(std::span<const double> actual, std::span<const double> predicted,
                    Window window) {
  if (window.empty()) throw DomainError("RMSPE over an empty window");
  if (window.begin < 0 || static_cast<std::size_t>(window.end) > actual.size() ||
      static_cast<std::size_t>(window.end) > predicted.size()) {
    throw DomainError("RMSPE window exceeds the series");
  }
  double ss = 0.0;
  for (int t = window.begin; t < window.end; ++t) {
    const double e = actual[static_cast<std::size_t>(t)] - predicted[static_cast<std::size_t>(t)];
    ss += e * e;
  }
  return std::sqrt(ss / window.size());
}

// Root mean square of a residual series (e.g. tau) over the window.
inline double rms(std::span<const double> residual, Window window) {
  if (window.empty()) throw DomainError("RMSPE over an empty window");
  if (window.begin < 0 || static_cast<std::size_t>(window.end) > residual.size()) {
    throw DomainError("RMSPE window exceeds the series");
  }
  double ss = 0.0;
  for (int t = window.begin; t < window.end; ++t) {
    const double e = residual[static_cast<std::size_t>(t)];
    ss += e * e;
  }
  return std::sqrt(ss / window.size());
}

inline std::span<const double> as_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

struct LambdaSelection {
  std::vector<double> grid;
  std::vector<double> phi;
  double chosen = 0.0;
  std::size_t chosen_index = 0;
};

// 0.00, 0.01, ..., 1.00 (101 points).
inline std::vector<double> default_lambda_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 100; ++i) g.push_back(i / 100.0);
  return g;
}

// Index of the minimum of `phi`; values within a relative 1e-12 of the
// running minimum count as ties and keep the earlier (smaller) lambda.
inline std::size_t argmin_smallest(std::span<const double> phi) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < phi.size(); ++i) {
    if (phi[i] < phi[best] - 1e-12 * std::max(1.0, std::abs(phi[best]))) best = i;
  }
  return best;
}

// Weighted leave-one-out over the donor pool: each donor is fitted on `pre`
// against the remaining donors and scored by RMSPE over `eval`;
// phi(lambda) = sum_j xi_j * RMSPE_j(lambda).
inline LambdaSelection cross_validate_lambda(const Eigen::MatrixXd& donor_series,
                                             std::span<const double> xi, Window pre, Window eval,
                                             std::vector<double> grid, int jobs = 1) {
  const Eigen::Index pool = donor_series.rows();
  if (pool < 2) throw DomainError("cross-validation needs at least two donors");
  if (static_cast<Eigen::Index>(xi.size()) != pool) {
    throw ReferenceError("xi weights do not match the donor pool");
  }
  if (eval.empty()) throw ConfigurationError("cross-validation evaluation window is empty");
  if (pre.size() < 2) throw AlignmentError("cross-validation fit window shorter than 2 weeks");
  if (pre.begin < 0 || eval.end > donor_series.cols()) {
    throw ConfigurationError("cross-validation windows exceed the calendar");
  }
  if (grid.empty()) throw ConfigurationError("empty lambda grid");
  for (double l : grid) {
    if (!std::isfinite(l) || l < 0.0) throw ConfigurationError("lambda grid values must be >= 0");
  }
  std::sort(grid.begin(), grid.end());

  const Eigen::Index L = static_cast<Eigen::Index>(grid.size());
  Eigen::MatrixXd score(pool, L);
  parallel_for(static_cast<std::size_t>(pool), jobs, [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    Eigen::MatrixXd others(pool - 1, donor_series.cols());
    for (Eigen::Index k = 0, r = 0; k < pool; ++k) {
      if (k != j) others.row(r++) = donor_series.row(k);
    }
    const Eigen::VectorXd target = donor_series.row(j).segment(pre.begin, pre.size()).transpose();
    const Eigen::MatrixXd fit_block = others.middleCols(pre.begin, pre.size()).transpose();
    const SimplexQp qp(target, fit_block);
    const Eigen::MatrixXd eval_block = others.middleCols(eval.begin, eval.size());
    const Eigen::VectorXd actual = donor_series.row(j).segment(eval.begin, eval.size()).transpose();
    Eigen::VectorXd warm;
    for (Eigen::Index l = 0; l < L; ++l) {
      FitResult fit = qp.solve(grid[static_cast<std::size_t>(l)], l > 0 ? &warm : nullptr);
      const Eigen::VectorXd predicted = eval_block.transpose() * fit.omega;
      score(j, l) = std::sqrt((actual - predicted).squaredNorm() / eval.size());
      warm = std::move(fit.omega);
    }
  });

  LambdaSelection sel;
  sel.grid = grid;
  sel.phi.assign(grid.size(), 0.0);
  for (Eigen::Index l = 0; l < L; ++l) {
    double phi = 0.0;
    for (Eigen::Index j = 0; j < pool; ++j) phi += xi[static_cast<std::size_t>(j)] * score(j, l);
    sel.phi[static_cast<std::size_t>(l)] = phi;
  }
  sel.chosen_index = argmin_smallest(sel.phi);
  sel.chosen = sel.grid[sel.chosen_index];
  return sel;
}

}  // namespace pscm
