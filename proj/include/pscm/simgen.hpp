#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pscm/config.hpp"
#include "pscm/covariates.hpp"
#include "pscm/csv.hpp"
#include "pscm/dates.hpp"
#include "pscm/error.hpp"
#include "pscm/panel.hpp"
#include "pscm/rng.hpp"

namespace pscm {

enum class EffectShape { constant, ramp, decay };

inline EffectShape parse_effect_shape(const std::string& s) {
  if (s == "constant") return EffectShape::constant;
  if (s == "ramp") return EffectShape::ramp;
  if (s == "decay") return EffectShape::decay;
  throw SpecError("unknown effect shape '" + s + "' (constant, ramp, decay)");
}

// Additive effect delta_n(t) for a treated unit, t >= adoption.
struct EffectSpec {
  EffectShape shape = EffectShape::constant;
  double delta = 0.0;
  int ramp_weeks = 4;       // ramp reaches delta after this many weeks
  double decay_rate = 0.5;  // per week after the lottery ends

  double at(int t, int adoption, int lottery_end) const {
    if (t < adoption) return 0.0;
    switch (shape) {
      case EffectShape::constant:
        return delta;
      case EffectShape::ramp:
        return delta * std::min(1.0, static_cast<double>(t - adoption + 1) / ramp_weeks);
      case EffectShape::decay:
        return t <= lottery_end ? delta : delta * std::exp(-decay_rate * (t - lottery_end));
    }
    return 0.0;
  }
};

struct Cohort {
  std::string group;
  int adoption = 0;
  int lottery_end = 0;
  int size = 0;
};

struct FactorModelSpec {
  int n_units = 200;
  int n_periods = 34;
  Date start = Date{std::chrono::year{2021} / 1 / 7};
  std::vector<Cohort> cohorts{{"S01", 18, 26, 10}, {"S02", 20, 28, 10}, {"S03", 22, 30, 10},
                              {"S04", 25, 33, 10}};
  int n_control_groups = 8;
  int n_observed = 1;
  int n_unobserved = 2;
  double ar = 0.9;
  double factor_mean = 8.0;
  double factor_sd = 2.0;  // stationary standard deviation
  double trend_start = 5.0;
  double trend_end = 50.0;
  double loading_min = 0.0;
  double loading_max = 1.0;
  double treated_loading_min = 0.0;
  double treated_loading_max = 1.0;
  double noise_sd = 0.3;
  double selection_strength = 1.5;
  EffectSpec effect;
  std::uint64_t seed = 1;

  int n_treated() const {
    int n = 0;
    for (const auto& c : cohorts) n += c.size;
    return n;
  }

  void validate() const {
    if (n_periods < 3) throw SpecError("n_periods must be at least 3");
    if (n_units < n_treated() + 2) throw SpecError("need at least two control units");
    if (cohorts.empty()) throw SpecError("at least one treated cohort is required");
    for (const auto& c : cohorts) {
      if (c.size < 1) throw SpecError("cohort " + c.group + " is empty");
      if (c.adoption < 2 || c.adoption >= n_periods) {
        throw SpecError("cohort " + c.group + " adoption outside [2, n_periods)");
      }
      if (c.lottery_end < c.adoption || c.lottery_end >= n_periods) {
        throw SpecError("cohort " + c.group + " lottery end outside [adoption, n_periods)");
      }
    }
    if (n_control_groups < 1) throw SpecError("n_control_groups must be positive");
    if (n_observed < 0 || n_unobserved < 0) throw SpecError("factor counts must be non-negative");
    if (!(ar > -1.0 && ar < 1.0)) throw SpecError("ar must lie in (-1, 1)");
    if (!(noise_sd >= 0.0) || !(factor_sd >= 0.0)) throw SpecError("standard deviations must be >= 0");
    if (!(loading_min <= loading_max) || !(treated_loading_min <= treated_loading_max)) {
      throw SpecError("loading ranges are inverted");
    }
    if (effect.shape == EffectShape::ramp && effect.ramp_weeks < 1) {
      throw SpecError("ramp_weeks must be positive");
    }
  }

  static FactorModelSpec from_config(const KeyValueConfig& cfg) {
    FactorModelSpec s;
    s.n_units = static_cast<int>(cfg.get_int("n_units", s.n_units));
    s.n_periods = static_cast<int>(cfg.get_int("n_periods", s.n_periods));
    if (auto d = cfg.get("start_date")) {
      auto parsed = parse_date(*d);
      if (!parsed) throw SpecError("start_date is not an ISO date: " + *d);
      s.start = *parsed;
    }
    if (auto c = cfg.get("cohorts")) {
      s.cohorts.clear();
      for (const auto& item : split(*c, ',')) {
        const auto parts = split(trim(item), ':');
        if (parts.size() != 4) throw SpecError("cohort must be group:adoption:end:size, got " + item);
        try {
          s.cohorts.push_back({trim(parts[0]), std::stoi(parts[1]), std::stoi(parts[2]),
                               std::stoi(parts[3])});
        } catch (const std::logic_error&) {
          throw SpecError("cohort has a non-integer field: " + item);
        }
      }
    }
    s.n_control_groups = static_cast<int>(cfg.get_int("n_control_groups", s.n_control_groups));
    s.n_observed = static_cast<int>(cfg.get_int("n_observed", s.n_observed));
    s.n_unobserved = static_cast<int>(cfg.get_int("n_unobserved", s.n_unobserved));
    s.ar = cfg.get_double("ar", s.ar);
    s.factor_mean = cfg.get_double("factor_mean", s.factor_mean);
    s.factor_sd = cfg.get_double("factor_sd", s.factor_sd);
    s.trend_start = cfg.get_double("trend_start", s.trend_start);
    s.trend_end = cfg.get_double("trend_end", s.trend_end);
    s.loading_min = cfg.get_double("loading_min", s.loading_min);
    s.loading_max = cfg.get_double("loading_max", s.loading_max);
    s.treated_loading_min = cfg.get_double("treated_loading_min", s.treated_loading_min);
    s.treated_loading_max = cfg.get_double("treated_loading_max", s.treated_loading_max);
    s.noise_sd = cfg.get_double("noise_sd", s.noise_sd);
    s.selection_strength = cfg.get_double("selection_strength", s.selection_strength);
    s.effect.shape = parse_effect_shape(cfg.get_or("effect", "constant"));
    s.effect.delta = cfg.get_double("delta", s.effect.delta);
    s.effect.ramp_weeks = static_cast<int>(cfg.get_int("ramp_weeks", s.effect.ramp_weeks));
    s.effect.decay_rate = cfg.get_double("decay_rate", s.effect.decay_rate);
    s.seed = cfg.get_u64("seed", s.seed);
    s.validate();
    return s;
  }
};

// Noiseless counterfactual, injected effect and noise per unit and week, so
// that Y = counterfactual + effect + noise wherever no clipping occurred.
struct Truth {
  Eigen::VectorXd trend;     // A_t
  Eigen::MatrixXd factors;   // weeks x (observed + unobserved)
  Eigen::MatrixXd loadings;  // units x (observed + unobserved)
  Eigen::MatrixXd counterfactual;
  Eigen::MatrixXd effect;
  Eigen::MatrixXd noise;
  int clip_count = 0;
};

struct SimulatedData {
  PanelData panel;
  CovariateTable covariates;
  TreatmentSchedule schedule;
  std::vector<Cohort> cohorts;
  Truth truth;
};

namespace detail {

struct CovariateShape {
  double mean, sd, lo, hi;
};

// Location and spread roughly following the county summary statistics.
inline const std::vector<CovariateShape>& covariate_shapes() {
  static const std::vector<CovariateShape> shapes{
      {9.6, 14.0, 0.0, 100.0},  {8.7, 14.0, 0.0, 100.0},  {14.3, 5.6, 0.0, 100.0},
      {65.2, 15.6, 0.0, 100.0}, {34.1, 7.2, 0.0, 100.0},  {22.0, 9.4, 0.0, 100.0},
      {6.7, 2.2, 0.0, 100.0},   {0.002, 0.001, 1e-5, 1.0}, {11.9, 4.6, 0.0, 100.0},
      {25000.0, 5000.0, 1000.0, 1e6}, {39.9, 4.8, 18.0, 90.0}};
  return shapes;
}

}  // namespace detail

// Y[n,t] = A_t + sum_k L[n,k] F[t,k] + eps[n,t] + delta_n(t) D[n,t], with
// AR(1) factors and per-unit loadings. Covariates load on a latent selection
// score and on the factor loadings, so treatment is predictable from them.
inline SimulatedData generate(const FactorModelSpec& spec) {
  spec.validate();
  RandomStream rng(spec.seed, streams::kSimulation, 0);
  const int n = spec.n_units;
  const int T = spec.n_periods;
  const int K = spec.n_observed + spec.n_unobserved;

  Truth truth;
  truth.trend.resize(T);
  const double mid = 0.45 * T;
  const double scale = T / 8.0;
  for (int t = 0; t < T; ++t) {
    truth.trend[t] = spec.trend_start + (spec.trend_end - spec.trend_start) /
                                            (1.0 + std::exp(-(t - mid) / scale));
  }
  truth.factors.resize(T, K);
  const double innovation = spec.factor_sd * std::sqrt(1.0 - spec.ar * spec.ar);
  for (int k = 0; k < K; ++k) {
    double dev = rng.normal(0.0, spec.factor_sd);
    for (int t = 0; t < T; ++t) {
      if (t > 0) dev = spec.ar * dev + rng.normal(0.0, innovation);
      truth.factors(t, k) = std::max(0.0, spec.factor_mean + dev);
    }
  }

  // Latent selection score and Gumbel top-k choice of the treated units.
  Eigen::VectorXd latent(n);
  std::vector<std::pair<double, int>> keys;
  for (int i = 0; i < n; ++i) {
    latent[i] = rng.normal();
    keys.emplace_back(spec.selection_strength * latent[i] + rng.gumbel(), i);
  }
  std::sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<int> treated_idx;
  for (int k = 0; k < spec.n_treated(); ++k) treated_idx.push_back(keys[static_cast<std::size_t>(k)].second);
  std::sort(treated_idx.begin(), treated_idx.end());
  std::vector<int> cohort_of(static_cast<std::size_t>(n), -1);
  {
    std::size_t pos = 0;
    for (std::size_t c = 0; c < spec.cohorts.size(); ++c) {
      for (int m = 0; m < spec.cohorts[c].size; ++m) {
        cohort_of[static_cast<std::size_t>(treated_idx[pos++])] = static_cast<int>(c);
      }
    }
  }

  truth.loadings.resize(n, K);
  for (int i = 0; i < n; ++i) {
    const bool treated = cohort_of[static_cast<std::size_t>(i)] >= 0;
    const double lo = treated ? spec.treated_loading_min : spec.loading_min;
    const double hi = treated ? spec.treated_loading_max : spec.loading_max;
    for (int k = 0; k < K; ++k) truth.loadings(i, k) = rng.uniform(lo, hi);
  }

  // Covariates: z = a * latent + b . (centered loadings) + residual.
  const auto& shapes = detail::covariate_shapes();
  const auto n_cov = static_cast<Eigen::Index>(shapes.size());
  Eigen::VectorXd a(n_cov);
  Eigen::MatrixXd b(n_cov, K);
  for (Eigen::Index c = 0; c < n_cov; ++c) {
    a[c] = rng.uniform(-0.6, 0.6);
    for (int k = 0; k < K; ++k) b(c, k) = rng.uniform(-0.5, 0.5);
  }
  CovariateTable cov;
  cov.names = covariate_names();
  cov.values.resize(n, n_cov);
  std::vector<UnitId> ids;
  std::vector<std::string> groups;
  std::vector<double> population;
  for (int i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "U%04d", i + 1);
    ids.emplace_back(buf);
    const int c = cohort_of[static_cast<std::size_t>(i)];
    if (c >= 0) {
      groups.push_back(spec.cohorts[static_cast<std::size_t>(c)].group);
    } else {
      std::snprintf(buf, sizeof buf, "C%02d", i % spec.n_control_groups + 1);
      groups.emplace_back(buf);
    }
    population.push_back(std::max(100.0, std::round(std::exp(rng.normal(10.0, 1.2)))));
    for (Eigen::Index j = 0; j < n_cov; ++j) {
      double z = a[j] * latent[i];
      double explained = a[j] * a[j];
      for (int k = 0; k < K; ++k) {
        // Uniform(0,1) loadings have variance 1/12.
        z += b(j, k) * (truth.loadings(i, k) - 0.5) * std::sqrt(12.0);
        explained += b(j, k) * b(j, k);
      }
      z += std::sqrt(std::max(0.1, 1.0 - explained)) * rng.normal();
      const auto& s = shapes[static_cast<std::size_t>(j)];
      cov.values(i, j) = std::clamp(s.mean + s.sd * z, s.lo, s.hi);
    }
  }
  cov.units = ids;
  cov.group = groups;
  cov.population = population;

  truth.counterfactual.resize(n, T);
  truth.effect = Eigen::MatrixXd::Zero(n, T);
  truth.noise.resize(n, T);
  Eigen::MatrixXd y(n, T);
  for (int i = 0; i < n; ++i) {
    const int c = cohort_of[static_cast<std::size_t>(i)];
    for (int t = 0; t < T; ++t) {
      double cf = truth.trend[t];
      for (int k = 0; k < K; ++k) cf += truth.loadings(i, k) * truth.factors(t, k);
      truth.counterfactual(i, t) = cf;
      if (c >= 0) {
        const auto& co = spec.cohorts[static_cast<std::size_t>(c)];
        truth.effect(i, t) = spec.effect.at(t, co.adoption, co.lottery_end);
      }
      truth.noise(i, t) = spec.noise_sd > 0.0 ? rng.normal(0.0, spec.noise_sd) : 0.0;
      double v = cf + truth.effect(i, t) + truth.noise(i, t);
      if (v < 0.0 || v > 100.0) {
        ++truth.clip_count;
        v = std::clamp(v, 0.0, 100.0);
      }
      y(i, t) = v;
    }
  }

  std::vector<Date> calendar;
  for (int t = 0; t < T; ++t) calendar.push_back(spec.start + std::chrono::days{7 * t});

  SimulatedData out;
  for (int i = 0; i < n; ++i) {
    const int c = cohort_of[static_cast<std::size_t>(i)];
    if (c < 0) continue;
    const auto& co = spec.cohorts[static_cast<std::size_t>(c)];
    out.schedule.add(ids[static_cast<std::size_t>(i)], co.adoption, co.lottery_end);
  }
  out.panel = PanelData(ids, calendar, std::move(y), population, groups);
  out.covariates = std::move(cov);
  out.cohorts = spec.cohorts;
  out.truth = std::move(truth);
  return out;
}

inline std::string truth_phase(const SimulatedData& data, std::size_t row, int t) {
  const auto spell = data.schedule.spell(data.panel.units()[row]);
  if (!spell) return "control";
  if (t < spell->adoption) return "pre";
  if (t <= spell->lottery_end) return "treat";
  return "post";
}

// Writes outcomes.csv, covariates.csv, schedule.csv, calendar.csv, truth.csv
// and run.cfg into `dir`. Only the Thursday observation of each week is
// written, so weekly summarization reproduces the panel exactly.
inline void write_bundle(const SimulatedData& data, const FactorModelSpec& spec,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& panel = data.panel;
  const auto& cal = panel.calendar();

  csv::Writer outcomes({"unit_id", "date", "value"});
  for (std::size_t i = 0; i < panel.n_units(); ++i) {
    for (int t = 0; t < panel.n_weeks(); ++t) {
      outcomes.cell(panel.units()[i])
          .cell(format_date(cal[static_cast<std::size_t>(t)]))
          .cell(panel.outcomes()(static_cast<Eigen::Index>(i), t))
          .end();
    }
  }
  outcomes.save(dir / "outcomes.csv");

  std::vector<std::string> header{"unit_id", "group", "population"};
  for (const auto& name : data.covariates.names) header.push_back(name);
  csv::Writer cov(header);
  for (std::size_t i = 0; i < data.covariates.size(); ++i) {
    cov.cell(data.covariates.units[i]).cell(data.covariates.group[i]).cell(data.covariates.population[i]);
    for (Eigen::Index c = 0; c < data.covariates.values.cols(); ++c) {
      cov.cell(data.covariates.values(static_cast<Eigen::Index>(i), c));
    }
    cov.end();
  }
  cov.save(dir / "covariates.csv");

  csv::Writer schedule({"group", "adoption_date", "end_date"});
  for (const auto& c : data.cohorts) {
    schedule.cell(c.group)
        .cell(format_date(cal[static_cast<std::size_t>(c.adoption)]))
        .cell(format_date(cal[static_cast<std::size_t>(c.lottery_end)]))
        .end();
  }
  schedule.save(dir / "schedule.csv");

  csv::Writer calendar({"week", "date"});
  for (std::size_t t = 0; t < cal.size(); ++t) calendar.cell(t).cell(format_date(cal[t])).end();
  calendar.save(dir / "calendar.csv");

  csv::Writer truth({"unit_id", "week", "date", "phase", "counterfactual", "effect", "noise", "outcome"});
  for (std::size_t i = 0; i < panel.n_units(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int t = 0; t < panel.n_weeks(); ++t) {
      truth.cell(panel.units()[i])
          .cell(t)
          .cell(format_date(cal[static_cast<std::size_t>(t)]))
          .cell(truth_phase(data, i, t))
          .cell(data.truth.counterfactual(r, t))
          .cell(data.truth.effect(r, t))
          .cell(data.truth.noise(r, t))
          .cell(panel.outcomes()(r, t))
          .end();
    }
  }
  truth.save(dir / "truth.csv");

  std::string cfg;
  cfg += "# generated by pscm simulate (seed " + std::to_string(spec.seed) + ", " +
         std::to_string(data.truth.clip_count) + " clipped values)\n";
  cfg += "outcomes = outcomes.csv\n";
  cfg += "covariates = covariates.csv\n";
  cfg += "schedule = schedule.csv\n";
  cfg += "calendar_start = " + format_date(cal.front()) + "\n";
  cfg += "calendar_end = " + format_date(cal.back()) + "\n";
  cfg += "seed = " + std::to_string(spec.seed) + "\n";
  std::ofstream(dir / "run.cfg", std::ios::binary) << cfg;
}

}  // namespace pscm
