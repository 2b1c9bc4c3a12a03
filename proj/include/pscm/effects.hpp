#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pscm/error.hpp"
#include "pscm/panel.hpp"
#include "pscm/solver.hpp"

namespace pscm {

// tau[t] = Y[unit, t] - counterfactual[t] over the whole calendar. On the fit
// window tau is the fit residual, not an effect.
struct EffectSeries {
  UnitId unit;
  Eigen::VectorXd tau;
  AlignedSeries windows;
};

inline EffectSeries unit_effect(const PanelData& panel, const WeightVector& weights,
                                const AlignedSeries& windows) {
  const auto row = panel.row(windows.unit);
  EffectSeries e;
  e.unit = windows.unit;
  e.tau = panel.series(row) - impute_counterfactual(weights, panel);
  e.windows = windows;
  return e;
}

// Mean of psi over the window (divisor = number of points in the window).
inline double window_average(std::span<const double> psi, Window window) {
  if (window.empty()) throw DomainError("empty post-window: no points to average");
  if (window.begin < 0 || static_cast<std::size_t>(window.end) > psi.size()) {
    throw DomainError("averaging window exceeds the series");
  }
  double s = 0.0;
  for (int t = window.begin; t < window.end; ++t) s += psi[static_cast<std::size_t>(t)];
  return s / window.size();
}

enum class Pooling { calendar, event_time };

inline const char* to_string(Pooling p) {
  return p == Pooling::calendar ? "calendar" : "event_time";
}

// Pooled effect over a set of treated units. `psi` is indexed by position;
// `weeks` maps each position to a calendar week (calendar mode) or an event
// week relative to adoption (event-time mode). The windows index into `psi`.
struct PooledEffect {
  std::string selector;
  Pooling mode = Pooling::calendar;
  std::vector<int> weeks;
  Eigen::VectorXd psi;
  Window pre;
  Window treat;
  Window post;
  double psi_treatment = 0.0;
  std::optional<double> psi_post;
  std::vector<UnitId> units;
  std::vector<double> eta;
};

namespace detail {

// Unit order used for every reduction so results do not depend on input order.
inline std::vector<std::size_t> canonical_order(std::span<const EffectSeries> effects) {
  std::vector<std::size_t> order(effects.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return effects[a].unit < effects[b].unit;
  });
  return order;
}

}  // namespace detail

// Calendar mode requires every unit to share its windows (one adoption
// cohort) and sums eta_i tau_{i,t} at each week. Event-time mode aligns units
// at adoption; the pooled horizon runs from the shortest common fit window to
// T - max adoption, and no post-treatment window is defined.
inline PooledEffect pooled_effect(std::span<const EffectSeries> effects,
                                  std::span<const double> eta, Pooling mode,
                                  std::string selector = {}) {
  if (effects.empty()) throw PoolingError("no units to pool");
  if (eta.size() != effects.size()) throw PoolingError("eta does not match the pooled units");
  const auto order = detail::canonical_order(effects);
  const Eigen::Index weeks = effects.front().tau.size();
  for (const auto& e : effects) {
    if (e.tau.size() != weeks) throw PoolingError("effect series differ in length");
  }

  PooledEffect out;
  out.selector = std::move(selector);
  out.mode = mode;
  for (auto i : order) {
    out.units.push_back(effects[i].unit);
    out.eta.push_back(eta[i]);
  }

  if (mode == Pooling::calendar) {
    const auto& w0 = effects.front().windows;
    for (const auto& e : effects) {
      if (!(e.windows.pre == w0.pre && e.windows.treat == w0.treat && e.windows.post == w0.post)) {
        throw PoolingError("calendar pooling needs units with identical windows; use event time");
      }
    }
    out.psi = Eigen::VectorXd::Zero(weeks);
    for (Eigen::Index t = 0; t < weeks; ++t) {
      double s = 0.0;
      for (auto i : order) s += eta[i] * effects[i].tau[t];
      out.psi[t] = s;
    }
    out.weeks.resize(static_cast<std::size_t>(weeks));
    std::iota(out.weeks.begin(), out.weeks.end(), 0);
    out.pre = w0.pre;
    out.treat = w0.treat;
    out.post = w0.post;
  } else {
    int lead = std::numeric_limits<int>::max();
    int max_adoption = 0;
    for (const auto& e : effects) {
      lead = std::min(lead, e.windows.pre.size());
      max_adoption = std::max(max_adoption, e.windows.adoption);
    }
    const int horizon = static_cast<int>(weeks) - 1 - max_adoption;  // last common event week
    if (lead < 1 || horizon < 0) throw PoolingError("event-time pooling has no common overlap");
    const int length = lead + horizon + 1;
    out.psi = Eigen::VectorXd::Zero(length);
    for (int k = 0; k < length; ++k) {
      const int event = k - lead;
      double s = 0.0;
      for (auto i : order) s += eta[i] * effects[i].tau[effects[i].windows.adoption + event];
      out.psi[k] = s;
      out.weeks.push_back(event);
    }
    out.pre = {0, lead};
    out.treat = {lead, length};
    out.post = {length, length};
  }

  out.psi_treatment = window_average(as_span(out.psi), out.treat);
  if (!out.post.empty()) out.psi_post = window_average(as_span(out.psi), out.post);
  return out;
}

// Persistence label from the signs of the treatment and post-treatment means,
// with a dead band around zero.
inline std::string persistence_label(double treatment, std::optional<double> post,
                                     double deadband = 0.1) {
  if (!post) return "no_post_window";
  if (treatment > deadband) return *post > deadband ? "persistent_supporter" : "anticipator";
  if (treatment < -deadband) return *post < -deadband ? "persistent_opponent" : "latecomer";
  return "no_effect";
}

// Per-unit summary used by the unit table and the cluster report.
struct UnitSummary {
  UnitId unit;
  double rmspe_pre = 0.0;
  double treatment_mean = 0.0;
  std::optional<double> post_mean;
  std::string label;
};

inline UnitSummary summarize_unit(const EffectSeries& e, double deadband = 0.1) {
  UnitSummary s;
  s.unit = e.unit;
  s.rmspe_pre = rms(as_span(e.tau), e.windows.pre);
  s.treatment_mean = window_average(as_span(e.tau), e.windows.treat);
  if (!e.windows.post.empty()) s.post_mean = window_average(as_span(e.tau), e.windows.post);
  s.label = persistence_label(s.treatment_mean, s.post_mean, deadband);
  return s;
}

}  // namespace pscm
