#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <Eigen/Dense>

#include "json.hpp"
#include "pscm/clustering.hpp"
#include "pscm/config.hpp"
#include "pscm/csv.hpp"
#include "pscm/effects.hpp"
#include "pscm/error.hpp"
#include "pscm/inference.hpp"
#include "pscm/ingestion.hpp"
#include "pscm/panel.hpp"
#include "pscm/propensity.hpp"
#include "pscm/solver.hpp"

namespace pscm {

inline constexpr const char* kVersion = "0.1.0";

// Treated-unit filter for one pooled row of a report.
struct Selector {
  std::string name;
  Pooling mode = Pooling::calendar;
  bool all = false;
  std::set<std::string> groups;
  std::optional<std::pair<Date, Date>> adoption_range;
  std::string definition;
};

// "all", "groups:A,B" or "adoption:YYYY-MM-DD..YYYY-MM-DD".
inline Selector parse_selector(const std::string& name, const std::string& text, Pooling mode) {
  Selector s;
  s.name = name;
  s.mode = mode;
  s.definition = text;
  const auto t = trim(text);
  if (t == "all") {
    s.all = true;
  } else if (t.rfind("groups:", 0) == 0) {
    s.groups = parse_group_list(t.substr(7));
    if (s.groups.empty()) throw ConfigurationError("selector " + name + " lists no groups");
  } else if (t.rfind("adoption:", 0) == 0) {
    const auto range = t.substr(9);
    const auto dots = range.find("..");
    if (dots == std::string::npos) throw ConfigurationError("selector " + name + ": expected d1..d2");
    const auto a = parse_date(trim(range.substr(0, dots)));
    const auto b = parse_date(trim(range.substr(dots + 2)));
    if (!a || !b || *b < *a) throw ConfigurationError("selector " + name + ": invalid adoption range");
    s.adoption_range = std::make_pair(*a, *b);
  } else {
    throw ConfigurationError("selector " + name + ": expected all, groups:... or adoption:...");
  }
  return s;
}

inline std::vector<double> parse_lambda_grid(const std::string& text) {
  const auto t = trim(text);
  std::vector<double> grid;
  auto num = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::logic_error&) {
      throw ConfigurationError("lambda_grid: not a number: '" + s + "'");
    }
  };
  if (t.find(':') != std::string::npos) {
    const auto parts = split(t, ':');
    if (parts.size() != 3) throw ConfigurationError("lambda_grid range must be start:end:step");
    const double lo = num(trim(parts[0])), hi = num(trim(parts[1])), step = num(trim(parts[2]));
    if (!(step > 0.0) || hi < lo) throw ConfigurationError("lambda_grid range is empty");
    const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
    // Counting in integers avoids accumulated rounding in the grid points.
    for (long i = 0; i <= n; ++i) grid.push_back(lo + static_cast<double>(i) * step);
  } else {
    for (const auto& item : split(t, ',')) grid.push_back(num(trim(item)));
  }
  if (grid.empty()) throw ConfigurationError("lambda_grid is empty");
  return grid;
}

// Everything the run command needs, resolved from the key/value file plus
// command-line overrides.
struct RunConfig {
  KeyValueConfig source;
  std::vector<double> lambda_grid = default_lambda_grid();
  bool lambda_per_group = true;
  std::size_t replicates = 1000;
  std::uint64_t seed = 1;
  double alpha = 0.1;
  double deadband = 0.1;
  int k_min = 1;
  int k_max = 9;
  int gmm_restarts = 10;
  bool clustering = true;
  bool placebo_dump = false;
  bool likelihood_weights = true;
  int jobs = 1;
  std::vector<Selector> selectors;  // calendar pooling
  std::vector<Selector> strata;     // event-time pooling

  static RunConfig from(const KeyValueConfig& cfg) {
    RunConfig rc;
    rc.source = cfg;
    if (auto g = cfg.get("lambda_grid")) rc.lambda_grid = parse_lambda_grid(*g);
    const auto mode = cfg.get_or("lambda_mode", "group");
    if (mode != "group" && mode != "global") throw ConfigurationError("lambda_mode must be group or global");
    rc.lambda_per_group = mode == "group";
    const auto reps = cfg.get_int("replicates", 1000);
    if (reps < 1) throw ConfigurationError("replicates must be positive");
    rc.replicates = static_cast<std::size_t>(reps);
    rc.seed = cfg.get_u64("seed", 1);
    rc.alpha = cfg.get_double("alpha", 0.1);
    rc.deadband = cfg.get_double("deadband", 0.1);
    rc.k_min = static_cast<int>(cfg.get_int("k_min", 1));
    rc.k_max = static_cast<int>(cfg.get_int("k_max", 9));
    rc.gmm_restarts = static_cast<int>(cfg.get_int("gmm_restarts", 10));
    if (rc.k_min < 1 || rc.k_max < rc.k_min || rc.gmm_restarts < 1) {
      throw ConfigurationError("invalid k_min/k_max/gmm_restarts");
    }
    rc.clustering = cfg.get_bool("clustering", true);
    rc.placebo_dump = cfg.get_bool("placebo_dump", false);
    const auto weighting = cfg.get_or("placebo_weights", "likelihood");
    if (weighting != "likelihood" && weighting != "uniform") {
      throw ConfigurationError("placebo_weights must be likelihood or uniform");
    }
    rc.likelihood_weights = weighting == "likelihood";
    rc.jobs = static_cast<int>(cfg.get_int("jobs", 1));
    for (const auto& [name, def] : cfg.with_prefix("selector.")) {
      rc.selectors.push_back(parse_selector(name, def, Pooling::calendar));
    }
    for (const auto& [name, def] : cfg.with_prefix("stratum.")) {
      rc.strata.push_back(parse_selector(name, def, Pooling::event_time));
    }
    return rc;
  }
};

// Welch two-sample t-test.
struct WelchTest {
  double mean_a = 0.0, mean_b = 0.0, t = 0.0, df = 0.0, p = 1.0;
  bool defined = false;
};

inline WelchTest welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  WelchTest w;
  auto moments = [](const std::vector<double>& v, double& mean, double& var) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
  };
  if (a.empty() || b.empty()) return w;
  double va = 0.0, vb = 0.0;
  moments(a, w.mean_a, va);
  moments(b, w.mean_b, vb);
  if (a.size() < 2 || b.size() < 2) return w;
  const double sa = va / static_cast<double>(a.size());
  const double sb = vb / static_cast<double>(b.size());
  if (!(sa + sb > 0.0)) return w;
  w.t = (w.mean_a - w.mean_b) / std::sqrt(sa + sb);
  w.df = (sa + sb) * (sa + sb) /
         (sa * sa / static_cast<double>(a.size() - 1) + sb * sb / static_cast<double>(b.size() - 1));
  const boost::math::students_t dist(w.df);
  w.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(w.t)));
  w.defined = true;
  return w;
}

struct SelectorResult {
  Selector selector;
  PooledEffect pooled;
  PlaceboInference inference;
  double rmspe_pre = 0.0;
  int adoption_week = 0;
  int lottery_end_week = 0;
};

// In-memory results of a run; the artifact writer serializes them.
struct RunResult {
  Inputs inputs;
  PropensityModel propensity;
  Eigen::VectorXd pi;  // per panel unit
  DonorPool pool;
  std::vector<std::size_t> pool_rows;
  std::map<std::string, LambdaSelection> lambda;  // by group (or "*")
  std::vector<UnitId> treated;
  std::vector<std::size_t> treated_rows;
  std::vector<double> treated_lambda;
  std::vector<WeightVector> weights;
  std::vector<FitResult> fits;
  std::vector<EffectSeries> effects;
  std::vector<UnitSummary> summaries;
  std::vector<SelectorResult> selectors;
  std::optional<MixtureModel> mixture;
  Assignment assignment;
  ClusterReport clusters;
  std::vector<std::string> warnings;
};

namespace detail {

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  } catch (const std::exception& e) {
    throw StageError(name, NumericError(e.what()));
  }
}

inline const ScheduleEntry& entry_for(const Inputs& in, const std::string& group) {
  for (const auto& e : in.schedule_entries) {
    if (e.group == group) return e;
  }
  throw ReferenceError("no schedule entry for group " + group);
}

}  // namespace detail

inline RunResult run_pipeline(const RunConfig& rc) {
  RunResult res;
  res.inputs = detail::stage("ingest", [&] { return load_inputs(rc.source); });
  const auto& in = res.inputs;
  const auto& panel = in.panel;
  res.warnings = in.report.warnings;

  detail::stage("propensity", [&] {
    if (in.schedule.empty()) throw SelectionError("no treated units: estimation needs a non-empty schedule");
    std::vector<int> labels;
    std::vector<UnitId> controls;
    for (std::size_t i = 0; i < panel.n_units(); ++i) {
      const bool t = in.schedule.is_treated(panel.units()[i]);
      labels.push_back(t ? 1 : 0);
    }
    res.propensity = fit_propensity(in.covariates.values, labels, in.covariates.names);
    if (res.propensity.separated) {
      res.warnings.push_back("propensity classes are perfectly separated; scores are near 0/1");
    }
    res.pi = res.propensity.scores(in.covariates.values);
    std::vector<double> control_pi;
    std::vector<std::size_t> control_rows;
    for (std::size_t i = 0; i < panel.n_units(); ++i) {
      if (labels[i] == 0) {
        controls.push_back(panel.units()[i]);
        control_pi.push_back(res.pi[static_cast<Eigen::Index>(i)]);
        control_rows.push_back(i);
      }
    }
    res.pool = select_donor_pool(controls, control_pi);
    for (const auto& id : res.pool.members) res.pool_rows.push_back(panel.row(id));
    return 0;
  });

  Eigen::MatrixXd donor_series(static_cast<Eigen::Index>(res.pool_rows.size()), panel.n_weeks());
  for (std::size_t k = 0; k < res.pool_rows.size(); ++k) {
    donor_series.row(static_cast<Eigen::Index>(k)) = panel.outcomes().row(static_cast<Eigen::Index>(res.pool_rows[k]));
  }
  const int t0 = in.schedule.t0();
  const int last = panel.last_week();

  detail::stage("lambda", [&] {
    auto select_for = [&](int adoption) {
      const int pre_len = std::min(t0, adoption);
      if (pre_len < 2) throw AlignmentError("fewer than two pre-adoption weeks for cross-validation");
      return cross_validate_lambda(donor_series, res.pool.xi, Window{adoption - pre_len, adoption},
                                   Window{adoption, last + 1}, rc.lambda_grid, rc.jobs);
    };
    if (rc.lambda_per_group) {
      for (const auto& e : in.schedule_entries) res.lambda[e.group] = select_for(e.adoption);
    } else {
      res.lambda["*"] = select_for(t0);
    }
    return 0;
  });

  detail::stage("fit", [&] {
    for (std::size_t i = 0; i < panel.n_units(); ++i) {
      if (!in.schedule.is_treated(panel.units()[i])) continue;
      res.treated.push_back(panel.units()[i]);
      res.treated_rows.push_back(i);
    }
    const std::size_t n = res.treated.size();
    res.weights.resize(n);
    res.fits.resize(n);
    res.effects.resize(n);
    res.summaries.resize(n);
    res.treated_lambda.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& group = panel.group()[res.treated_rows[k]];
      res.treated_lambda[k] = (rc.lambda_per_group ? res.lambda.at(group) : res.lambda.at("*")).chosen;
    }
    parallel_for(n, rc.jobs, [&](std::size_t k) {
      const auto row = static_cast<Eigen::Index>(res.treated_rows[k]);
      const AlignedSeries a = align(panel, in.schedule, res.treated[k]);
      const Eigen::VectorXd target = panel.outcomes().row(row).segment(a.pre.begin, a.pre.size()).transpose();
      const Eigen::MatrixXd donors = donor_series.middleCols(a.pre.begin, a.pre.size()).transpose();
      res.fits[k] = SimplexQp(target, donors).solve(res.treated_lambda[k]);
      res.weights[k] = WeightVector{res.pool.members, res.fits[k].omega};
      EffectSeries e;
      e.unit = res.treated[k];
      e.windows = a;
      e.tau = panel.outcomes().row(row).transpose() - donor_series.transpose() * res.fits[k].omega;
      res.summaries[k] = summarize_unit(e, rc.deadband);
      res.effects[k] = std::move(e);
    });
    return 0;
  });

  std::vector<Selector> selectors = rc.selectors;
  if (selectors.empty()) {
    for (const auto& e : in.schedule_entries) {
      selectors.push_back(parse_selector(e.group, "groups:" + e.group, Pooling::calendar));
    }
  }
  std::vector<Selector> strata = rc.strata;
  if (strata.empty()) strata.push_back(parse_selector("all", "all", Pooling::event_time));
  selectors.insert(selectors.end(), strata.begin(), strata.end());

  detail::stage("inference", [&] {
    std::set<std::string> names;
    std::uint32_t stream = 0;
    for (const auto& sel : selectors) {
      if (!names.insert(sel.name).second) throw ConfigurationError("selector name used twice: " + sel.name);
      const auto set = pooled_treated_set(panel, in.schedule, [&](std::size_t r) {
        if (sel.all) return true;
        if (!sel.groups.empty()) return sel.groups.contains(panel.group()[r]);
        const auto& entry = detail::entry_for(in, panel.group()[r]);
        return entry.adoption_date >= sel.adoption_range->first &&
               entry.adoption_date <= sel.adoption_range->second;
      });
      std::vector<EffectSeries> members;
      PlaceboSetup setup;
      for (auto r : set.rows) {
        const auto k = static_cast<std::size_t>(
            std::find(res.treated_rows.begin(), res.treated_rows.end(), r) - res.treated_rows.begin());
        members.push_back(res.effects[k]);
        setup.slots.push_back({res.effects[k].windows.adoption, res.effects[k].windows.lottery_end,
                               res.treated_lambda[k]});
      }
      SelectorResult out;
      out.selector = sel;
      try {
        out.pooled = pooled_effect(members, set.eta, sel.mode, sel.name);
      } catch (const PoolingError& e) {
        throw PoolingError("selector " + sel.name + ": " + e.what());
      }
      setup.panel = &panel;
      setup.donor_rows = res.pool_rows;
      setup.donor_pi = res.pool.pi;
      setup.t0 = t0;
      setup.mode = sel.mode;
      setup.replicates = rc.replicates;
      setup.seed = rc.seed;
      setup.stream = stream++;
      setup.jobs = rc.jobs;
      setup.likelihood_weights = rc.likelihood_weights;
      out.inference = placebo_inference(setup, out.pooled);
      out.rmspe_pre = rms(as_span(out.pooled.psi), out.pooled.pre);
      out.adoption_week = members.front().windows.adoption;
      out.lottery_end_week = members.front().windows.lottery_end;
      for (const auto& m : members) {
        out.adoption_week = std::min(out.adoption_week, m.windows.adoption);
        out.lottery_end_week = std::max(out.lottery_end_week, m.windows.lottery_end);
      }
      res.selectors.push_back(std::move(out));
    }
    return 0;
  });

  if (rc.clustering) {
    detail::stage("clustering", [&] {
      const Eigen::MatrixXd x = in.covariates.rows_for(res.treated);
      const auto n = x.rows();
      const auto d = x.cols();
      // The mixture needs n > k (d + 1); larger k are dropped from the range.
      const int k_cap = static_cast<int>((n - 1) / (d + 1));
      const int k_max = std::min(rc.k_max, k_cap);
      if (k_max < rc.k_min) {
        res.warnings.push_back("clustering skipped: " + std::to_string(n) +
                               " treated units are too few for a mixture over " + std::to_string(d) +
                               " covariates");
        return 0;
      }
      if (k_max < rc.k_max) {
        res.warnings.push_back("cluster range capped at k = " + std::to_string(k_max) + " for " +
                               std::to_string(n) + " treated units");
      }
      GmmOptions opt;
      opt.k_min = rc.k_min;
      opt.k_max = k_max;
      opt.restarts = rc.gmm_restarts;
      opt.jobs = rc.jobs;
      res.mixture = fit_gmm(x, rc.seed, opt);
      res.assignment = assign(*res.mixture, x);
      std::vector<double> pop;
      for (auto r : res.treated_rows) pop.push_back(panel.population()[r]);
      res.clusters = cluster_ate(res.assignment.labels, res.mixture->k(), res.summaries, pop, x,
                                 in.covariates.names);
      for (const auto& w : res.clusters.warnings) res.warnings.push_back(w);
      return 0;
    });
  }
  return res;
}

namespace detail {

inline std::string fmt_opt(const std::optional<double>& v) { return v ? csv::format(*v) : "NA"; }

inline std::string phase_of(const AlignedSeries& a, int t) {
  if (a.lead.contains(t)) return "lead";
  if (a.pre.contains(t)) return "pre";
  if (a.treat.contains(t)) return "treat";
  return "post";
}

}  // namespace detail

// Serializes a run into `dir`. Every file is a pure function of the inputs,
// the configuration and the seed.
inline nlohmann::ordered_json write_artifacts(const RunResult& res, const RunConfig& rc,
                                              const std::filesystem::path& dir) {
  const auto& in = res.inputs;
  const auto& panel = in.panel;
  std::map<std::string, std::size_t> rows;
  auto save = [&](const csv::Writer& w, const std::string& name) {
    w.save(dir / name);
    rows[name] = w.rows();
  };

  {
    csv::Writer w({"unit_id", "group", "treated", "pi", "in_donor_pool", "xi"});
    std::map<UnitId, double> xi;
    for (std::size_t k = 0; k < res.pool.members.size(); ++k) xi[res.pool.members[k]] = res.pool.xi[k];
    for (std::size_t i = 0; i < panel.n_units(); ++i) {
      const auto& id = panel.units()[i];
      const auto it = xi.find(id);
      w.cell(id).cell(panel.group()[i]).cell(in.schedule.is_treated(id))
          .cell(res.pi[static_cast<Eigen::Index>(i)]).cell(it != xi.end())
          .cell(it != xi.end() ? csv::format(it->second) : std::string("NA")).end();
    }
    save(w, "propensity.csv");
  }
  {
    csv::Writer w({"term", "coefficient"});
    w.cell("intercept").cell(res.propensity.coefficients[0]).end();
    for (std::size_t c = 0; c < in.covariates.names.size(); ++c) {
      w.cell(in.covariates.names[c]).cell(res.propensity.coefficients[static_cast<Eigen::Index>(c + 1)]).end();
    }
    save(w, "propensity_model.csv");
  }
  {
    csv::Writer sel({"group", "lambda", "phi_min", "grid_points"});
    csv::Writer phi({"group", "lambda", "phi"});
    for (const auto& [group, s] : res.lambda) {
      sel.cell(group).cell(s.chosen).cell(s.phi[s.chosen_index]).cell(s.grid.size()).end();
      for (std::size_t l = 0; l < s.grid.size(); ++l) phi.cell(group).cell(s.grid[l]).cell(s.phi[l]).end();
    }
    save(sel, "lambda.csv");
    save(phi, "cv_phi.csv");
  }
  {
    csv::Writer w({"unit_id", "donor_id", "omega"});
    for (std::size_t k = 0; k < res.treated.size(); ++k) {
      for (std::size_t j = 0; j < res.weights[k].donors.size(); ++j) {
        const double o = res.weights[k].omega[static_cast<Eigen::Index>(j)];
        if (o > 0.0) w.cell(res.treated[k]).cell(res.weights[k].donors[j]).cell(o).end();
      }
    }
    save(w, "weights.csv");
  }
  {
    csv::Writer w({"unit_id", "group", "week", "date", "event_week", "phase", "actual", "counterfactual", "tau"});
    for (std::size_t k = 0; k < res.treated.size(); ++k) {
      const auto& e = res.effects[k];
      const auto row = static_cast<Eigen::Index>(res.treated_rows[k]);
      for (int t = 0; t < panel.n_weeks(); ++t) {
        const double y = panel.outcomes()(row, t);
        w.cell(e.unit).cell(panel.group()[res.treated_rows[k]]).cell(t)
            .cell(format_date(panel.calendar()[static_cast<std::size_t>(t)])).cell(t - e.windows.adoption)
            .cell(detail::phase_of(e.windows, t)).cell(y).cell(y - e.tau[t]).cell(e.tau[t]).end();
      }
    }
    save(w, "effects.csv");
  }
  {
    csv::Writer w({"unit_id", "group", "adoption_week", "lottery_end_week", "lambda", "rmspe_pre",
                   "treatment_mean", "post_mean", "label", "fit_gap"});
    for (std::size_t k = 0; k < res.treated.size(); ++k) {
      const auto& s = res.summaries[k];
      const auto& a = res.effects[k].windows;
      w.cell(s.unit).cell(panel.group()[res.treated_rows[k]]).cell(a.adoption).cell(a.lottery_end)
          .cell(res.treated_lambda[k]).cell(s.rmspe_pre).cell(s.treatment_mean)
          .cell(detail::fmt_opt(s.post_mean)).cell(s.label).cell(res.fits[k].gap).end();
    }
    save(w, "unit_summary.csv");
  }
  {
    csv::Writer pooled({"selector", "mode", "position", "week", "psi"});
    csv::Writer bands({"selector", "week", "q05", "q95", "psi"});
    csv::Writer sels({"selector", "mode", "definition", "n_units", "adoption_week", "lottery_end_week"});
    csv::Writer summary({"selector", "n_units", "rmspe_pre", "psi_treatment", "psi_post",
                         "theta_treatment", "rho_treatment", "p_tail_treatment", "theta_post",
                         "rho_post", "p_tail_post", "significant_treatment", "significant_post"});
    csv::Writer strata({"stratum", "n_units", "rmspe_pre", "ate", "theta", "rho", "p_tail", "significant"});
    for (const auto& s : res.selectors) {
      const auto& p = s.pooled;
      const auto& inf = s.inference;
      for (std::size_t i = 0; i < p.weeks.size(); ++i) {
        const auto t = static_cast<Eigen::Index>(i);
        pooled.cell(s.selector.name).cell(to_string(p.mode)).cell(i).cell(p.weeks[i]).cell(p.psi[t]).end();
        bands.cell(s.selector.name).cell(p.weeks[i]).cell(inf.band.q05[t]).cell(inf.band.q95[t]).cell(p.psi[t]).end();
      }
      sels.cell(s.selector.name).cell(to_string(p.mode)).cell(s.selector.definition).cell(p.units.size())
          .cell(s.adoption_week).cell(s.lottery_end_week).end();
      if (s.selector.mode == Pooling::calendar) {
        summary.cell(s.selector.name).cell(p.units.size()).cell(s.rmspe_pre).cell(p.psi_treatment)
            .cell(detail::fmt_opt(p.psi_post)).cell(inf.theta_treatment.theta).cell(inf.rho_treatment)
            .cell(inf.p_tail_treatment)
            .cell(inf.theta_post ? csv::format(inf.theta_post->theta) : std::string("NA"))
            .cell(detail::fmt_opt(inf.rho_post)).cell(detail::fmt_opt(inf.p_tail_post))
            .cell(inf.p_tail_treatment <= rc.alpha)
            .cell(inf.p_tail_post ? std::string(*inf.p_tail_post <= rc.alpha ? "true" : "false") : "NA")
            .end();
      } else {
        strata.cell(s.selector.name).cell(p.units.size()).cell(s.rmspe_pre).cell(p.psi_treatment)
            .cell(inf.theta_treatment.theta).cell(inf.rho_treatment).cell(inf.p_tail_treatment)
            .cell(inf.p_tail_treatment <= rc.alpha).end();
      }
      if (rc.placebo_dump) {
        csv::Writer dump({"replicate", "theta", "likelihood", "psi_treatment"});
        for (std::size_t r = 0; r < inf.distribution.draws.size(); ++r) {
          dump.cell(r).cell(inf.distribution.draws[r].theta_treatment)
              .cell(inf.distribution.normalized_weights[r]).cell(inf.distribution.draws[r].psi_treatment).end();
        }
        save(dump, "placebo_" + s.selector.name + ".csv");
      }
    }
    save(pooled, "pooled.csv");
    save(bands, "bands.csv");
    save(sels, "selectors.csv");
    save(summary, "summary.csv");
    save(strata, "strata.csv");
  }
  if (res.mixture) {
    csv::Writer cl({"unit_id", "cluster", "responsibility_max"});
    for (std::size_t k = 0; k < res.treated.size(); ++k) {
      cl.cell(res.treated[k]).cell(res.assignment.labels[k] + 1).cell(res.assignment.max_responsibility[k]).end();
    }
    save(cl, "clusters.csv");
    std::vector<std::string> header{"cluster", "n_units"};
    for (const auto& n : res.clusters.covariates) header.push_back(n);
    header.push_back("share");
    csv::Writer means(header);
    csv::Writer ate({"cluster", "treatment", "post_treatment", "sd_treatment", "sd_post_treatment", "share"});
    for (const auto& row : res.clusters.rows) {
      means.cell(row.cluster).cell(row.n_units);
      for (Eigen::Index c = 0; c < row.mean_covariates.size(); ++c) means.cell(row.mean_covariates[c]);
      means.cell(row.share).end();
      ate.cell(row.cluster).cell(row.ate_treatment).cell(detail::fmt_opt(row.ate_post))
          .cell(detail::fmt_opt(row.sd_treatment)).cell(detail::fmt_opt(row.sd_post)).cell(row.share).end();
    }
    save(means, "cluster_means.csv");
    save(ate, "cluster_ate.csv");
    csv::Writer bic({"k", "bic", "selected"});
    for (const auto& [k, b] : res.mixture->bic_path) bic.cell(k).cell(b).cell(k == res.mixture->k()).end();
    save(bic, "gmm_bic.csv");
  }
  {
    csv::Writer w({"group", "covariate", "n_treated", "n_donor", "mean_treated", "mean_donor", "t_stat", "df", "p_value"});
    for (const auto& e : in.schedule_entries) {
      for (std::size_t c = 0; c < in.covariates.names.size(); ++c) {
        std::vector<double> a, b;
        for (std::size_t i = 0; i < panel.n_units(); ++i) {
          if (panel.group()[i] == e.group && in.schedule.is_treated(panel.units()[i])) {
            a.push_back(in.covariates.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
          }
        }
        for (auto r : res.pool_rows) b.push_back(in.covariates.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
        const auto t = welch_t_test(a, b);
        w.cell(e.group).cell(in.covariates.names[c]).cell(a.size()).cell(b.size()).cell(t.mean_a).cell(t.mean_b)
            .cell(t.defined ? csv::format(t.t) : std::string("NA"))
            .cell(t.defined ? csv::format(t.df) : std::string("NA"))
            .cell(t.defined ? csv::format(t.p) : std::string("NA")).end();
      }
    }
    save(w, "balance.csv");
  }
  write_exclusions(in.report.exclusions, dir / "exclusions.csv");
  rows["exclusions.csv"] = in.report.exclusions.size();
  {
    std::ofstream(dir / "ingestion_report.txt", std::ios::binary) << format_report(in);
  }

  nlohmann::ordered_json m;
  m["tool"] = "pscm";
  m["version"] = kVersion;
  m["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  m["rng"] = "philox4x32-10";
  m["seed"] = rc.seed;
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(fnv1a64(rc.source.canonical())));
  m["config_hash"] = hash;
  m["replicates"] = rc.replicates;
  m["lambda_mode"] = rc.lambda_per_group ? "group" : "global";
  m["placebo_weights"] = rc.likelihood_weights ? "likelihood" : "uniform";
  m["calendar"] = {{"first", format_date(panel.calendar().front())},
                   {"last", format_date(panel.calendar().back())},
                   {"weeks", panel.n_weeks()}};
  m["units"] = {{"retained", panel.n_units()},
                {"excluded", in.report.exclusions.size()},
                {"treated", res.treated.size()},
                {"controls", panel.n_units() - res.treated.size()},
                {"donor_pool", res.pool.members.size()}};
  m["propensity"] = {{"iterations", res.propensity.iterations},
                     {"separated", res.propensity.separated},
                     {"median_pi", res.pool.median_pi}};
  if (res.mixture) m["clusters"] = {{"k", res.mixture->k()}, {"bic", res.mixture->bic}};
  nlohmann::ordered_json sel = nlohmann::ordered_json::array();
  for (const auto& s : res.selectors) sel.push_back(s.selector.name);
  m["selectors"] = sel;
  m["significance"] = {{"alpha", rc.alpha},
                       {"note", "rho is sum_J w_J 1[theta > theta_J]; p_tail = 1 - rho is used for significance"}};
  nlohmann::ordered_json rows_json;
  for (const auto& [name, n] : rows) rows_json[name] = n;
  m["artifacts"] = rows_json;
  m["warnings"] = res.warnings;
  std::ofstream(dir / "manifest.json", std::ios::binary) << m.dump(2) << "\n";
  return m;
}

// Runs the pipeline into `<out>.partial` and renames it to `out` on success;
// a failed run leaves no partial directory behind.
inline RunResult run_to_directory(const RunConfig& rc, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  const fs::path partial = out.string() + ".partial";
  fs::remove_all(partial);
  try {
    fs::create_directories(partial);
    RunResult res = run_pipeline(rc);
    detail::stage("report", [&] { return write_artifacts(res, rc, partial); });
    fs::remove_all(out);
    fs::rename(partial, out);
    return res;
  } catch (...) {
    std::error_code ec;
    fs::remove_all(partial, ec);
    throw;
  }
}

}  // namespace pscm
