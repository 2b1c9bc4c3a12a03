#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "pscm/config.hpp"
#include "pscm/covariates.hpp"
#include "pscm/csv.hpp"
#include "pscm/dates.hpp"
#include "pscm/error.hpp"
#include "pscm/panel.hpp"

namespace pscm {

// Daily cumulative first-dose share for one unit, sorted by date.
struct RawDailySeries {
  UnitId unit;
  std::vector<std::pair<Date, double>> observations;
};

// Mean of the available daily values in the seven days ending on each
// Thursday. A week with no available value is an ingestion error.
inline std::vector<double> weekly_summarize(const RawDailySeries& raw,
                                            const std::vector<Date>& calendar) {
  std::vector<double> out;
  out.reserve(calendar.size());
  auto it = raw.observations.begin();
  for (const Date thursday : calendar) {
    const Date first = thursday - std::chrono::days{6};
    while (it != raw.observations.end() && it->first < first) ++it;
    double sum = 0.0;
    int count = 0;
    for (auto jt = it; jt != raw.observations.end() && jt->first <= thursday; ++jt) {
      sum += jt->second;
      ++count;
    }
    if (count == 0) {
      throw IngestionError("unit " + raw.unit + " has no daily value in the week ending " +
                           format_date(thursday));
    }
    out.push_back(sum / count);
  }
  return out;
}

struct Exclusion {
  UnitId unit;
  std::string group;
  std::string rule;
  std::string detail;
};

struct IngestionRules {
  std::set<std::string> excluded_groups;
  bool final_date_rule = true;
  std::optional<Date> final_date;
};

// A unit before exclusion rules run.
struct UnitCandidate {
  UnitId unit;
  std::vector<double> weekly;  // empty when summarization failed
  bool final_observed = true;
  std::string summarize_error;
};

struct ExclusionResult {
  PanelData panel;
  CovariateTable covariates;  // rows in panel order
  std::vector<Exclusion> exclusions;
};

// Rules, in order: state-excluded, missing-covariates, missing-final,
// empty-window, out-of-range. Survivors keep their input order.
inline ExclusionResult apply_exclusions(const std::vector<UnitCandidate>& candidates,
                                        const CovariateTable& covariates,
                                        const std::vector<Date>& calendar,
                                        const IngestionRules& rules) {
  std::unordered_map<std::string, std::size_t> cov_index;
  for (std::size_t i = 0; i < covariates.size(); ++i) cov_index.emplace(covariates.units[i], i);

  ExclusionResult out;
  std::vector<UnitId> ids;
  std::vector<std::string> groups;
  std::vector<double> population;
  std::vector<std::size_t> cov_rows;
  std::vector<const UnitCandidate*> kept;
  for (const auto& c : candidates) {
    const auto it = cov_index.find(c.unit);
    const std::string group = it == cov_index.end() ? std::string{} : covariates.group[it->second];
    auto drop = [&](std::string rule, std::string detail) {
      out.exclusions.push_back({c.unit, group, std::move(rule), std::move(detail)});
    };
    if (it != cov_index.end() && rules.excluded_groups.contains(group)) {
      drop("state-excluded", "group " + group + " is excluded by configuration");
      continue;
    }
    if (it == cov_index.end()) {
      drop("missing-covariates", "no covariate row");
      continue;
    }
    if (auto problem = covariates.row_problem(it->second); !problem.empty()) {
      drop("missing-covariates", problem);
      continue;
    }
    if (rules.final_date_rule && !c.final_observed) {
      drop("missing-final", "no value reported on the final date");
      continue;
    }
    if (!c.summarize_error.empty() || c.weekly.size() != calendar.size()) {
      drop("empty-window", c.summarize_error.empty() ? "incomplete weekly series" : c.summarize_error);
      continue;
    }
    const auto bad = std::find_if(c.weekly.begin(), c.weekly.end(),
                                  [](double v) { return !(v >= 0.0 && v <= 100.0); });
    if (bad != c.weekly.end()) {
      drop("out-of-range", "weekly value " + csv::format(*bad) + " outside [0, 100]");
      continue;
    }
    ids.push_back(c.unit);
    groups.push_back(group);
    population.push_back(covariates.population[it->second]);
    cov_rows.push_back(it->second);
    kept.push_back(&c);
  }
  if (kept.empty()) throw IngestionError("every unit was excluded");

  Eigen::MatrixXd y(static_cast<Eigen::Index>(kept.size()), static_cast<Eigen::Index>(calendar.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    for (std::size_t t = 0; t < calendar.size(); ++t) {
      y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = kept[i]->weekly[t];
    }
  }
  out.covariates.names = covariates.names;
  out.covariates.units = ids;
  out.covariates.group = groups;
  out.covariates.population = population;
  out.covariates.values.resize(static_cast<Eigen::Index>(ids.size()), covariates.values.cols());
  for (std::size_t i = 0; i < cov_rows.size(); ++i) {
    out.covariates.values.row(static_cast<Eigen::Index>(i)) =
        covariates.values.row(static_cast<Eigen::Index>(cov_rows[i]));
  }
  out.panel = PanelData(std::move(ids), calendar, std::move(y), std::move(population), std::move(groups));
  return out;
}

// Candidates reconstructed from an already validated panel (used to check
// that exclusion is idempotent).
inline std::vector<UnitCandidate> candidates_from(const PanelData& panel) {
  std::vector<UnitCandidate> out;
  for (std::size_t i = 0; i < panel.n_units(); ++i) {
    UnitCandidate c;
    c.unit = panel.units()[i];
    const auto s = panel.series(i);
    c.weekly.assign(s.data(), s.data() + s.size());
    out.push_back(std::move(c));
  }
  return out;
}

struct ScheduleEntry {
  std::string group;
  Date adoption_date;
  Date end_date;
  int adoption = 0;
  int lottery_end = 0;
};

struct IngestionReport {
  std::vector<Exclusion> exclusions;
  std::vector<std::string> warnings;
  std::vector<std::string> notes;
};

struct Inputs {
  PanelData panel;
  CovariateTable covariates;
  TreatmentSchedule schedule;
  std::vector<ScheduleEntry> schedule_entries;
  IngestionReport report;
};

inline std::vector<RawDailySeries> read_outcomes(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const auto c_unit = table.column("unit_id");
  const auto c_date = table.column("date");
  const auto c_value = table.column("value");
  std::vector<RawDailySeries> series;
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::vector<std::size_t>> lines;
  for (const auto& row : table.rows) {
    const auto& unit = row.fields[c_unit];
    if (unit.empty()) throw ParseError(table.source, row.line, "unit_id", "empty unit id");
    const auto date = parse_date(row.fields[c_date]);
    if (!date) throw ParseError(table.source, row.line, "date", "not an ISO date: '" + row.fields[c_date] + "'");
    const auto value = csv::number(table, row, c_value);
    auto [it, fresh] = index.emplace(unit, series.size());
    if (fresh) {
      series.push_back({unit, {}});
      lines.emplace_back();
    }
    if (value) {
      series[it->second].observations.emplace_back(*date, *value);
      lines[it->second].push_back(row.line);
    }
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    auto& obs = series[s].observations;
    std::vector<std::size_t> order(obs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return obs[a].first < obs[b].first; });
    std::vector<std::pair<Date, double>> sorted;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (k > 0 && obs[order[k]].first == obs[order[k - 1]].first) {
        throw ParseError(table.source, lines[s][order[k]], "date",
                         "duplicate date " + format_date(obs[order[k]].first) + " for unit " + series[s].unit);
      }
      sorted.push_back(obs[order[k]]);
    }
    obs = std::move(sorted);
  }
  return series;
}

inline CovariateTable read_covariates(const std::filesystem::path& path,
                                      const std::vector<std::string>& names = covariate_names()) {
  const auto table = csv::read(path);
  const auto c_unit = table.column("unit_id");
  const auto c_group = table.column("group");
  const auto c_pop = table.column("population");
  std::vector<std::size_t> cols;
  for (const auto& n : names) cols.push_back(table.column(n));
  CovariateTable cov;
  cov.names = names;
  cov.values.resize(static_cast<Eigen::Index>(table.rows.size()), static_cast<Eigen::Index>(names.size()));
  std::set<std::string> seen;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const auto& unit = row.fields[c_unit];
    if (unit.empty()) throw ParseError(table.source, row.line, "unit_id", "empty unit id");
    if (!seen.insert(unit).second) {
      throw ReferenceError("duplicate unit id in covariates: " + unit + " (" + table.source +
                           ":" + std::to_string(row.line) + ")");
    }
    cov.units.push_back(unit);
    cov.group.push_back(row.fields[c_group]);
    cov.population.push_back(csv::number(table, row, c_pop).value_or(std::numeric_limits<double>::quiet_NaN()));
    for (std::size_t k = 0; k < cols.size(); ++k) {
      cov.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) =
          csv::number(table, row, cols[k]).value_or(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return cov;
}

struct RawScheduleRow {
  std::string group;
  Date adoption;
  Date end;
};

inline std::vector<RawScheduleRow> read_schedule(const std::filesystem::path& path) {
  std::vector<RawScheduleRow> out;
  // An empty file (no header) is a valid schedule with no treated groups.
  if (trim(csv::read_file(path)).empty()) return out;
  const auto table = csv::read(path);
  const auto c_group = table.column("group");
  const auto c_adopt = table.column("adoption_date");
  const auto c_end = table.column("end_date");
  std::set<std::string> seen;
  for (const auto& row : table.rows) {
    const auto& g = row.fields[c_group];
    if (g.empty()) throw ParseError(table.source, row.line, "group", "empty group");
    if (!seen.insert(g).second) throw ReferenceError("group " + g + " listed twice in the schedule");
    const auto a = parse_date(row.fields[c_adopt]);
    if (!a) throw ParseError(table.source, row.line, "adoption_date", "not an ISO date");
    const auto e = parse_date(row.fields[c_end]);
    if (!e) throw ParseError(table.source, row.line, "end_date", "not an ISO date");
    if (*e < *a) throw ScheduleError("group " + g + ": end_date precedes adoption_date");
    out.push_back({g, *a, *e});
  }
  return out;
}

inline std::set<std::string> parse_group_list(const std::string& s) {
  std::set<std::string> out;
  for (const auto& item : split(s, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.insert(std::move(t));
  }
  return out;
}

// Reads the three input files named in the configuration, builds the Thursday
// calendar, applies the exclusion rules and cross-references the schedule.
//
// Keys: outcomes, covariates, schedule, calendar_start, calendar_end,
// excluded_groups, final_date_rule, expected_weeks.
inline Inputs load_inputs(const KeyValueConfig& cfg) {
  auto required = [&](const char* key) {
    auto v = cfg.get(key);
    if (!v || v->empty()) throw ConfigurationError(std::string("missing config key '") + key + "'");
    return *v;
  };
  auto date_key = [&](const char* key) {
    const auto s = required(key);
    auto d = parse_date(s);
    if (!d) throw ConfigurationError(std::string(key) + " is not an ISO date: " + s);
    return *d;
  };
  const Date start = date_key("calendar_start");
  const Date end = date_key("calendar_end");
  const auto calendar = thursday_calendar(start, end);
  if (calendar.size() < 3) throw ConfigurationError("calendar has fewer than three Thursdays");

  Inputs in;
  in.report.notes.push_back("calendar: " + std::to_string(calendar.size()) + " Thursdays from " +
                            format_date(calendar.front()) + " to " + format_date(calendar.back()));
  if (auto expected = cfg.get("expected_weeks")) {
    if (std::to_string(calendar.size()) != *expected) {
      in.report.notes.push_back("calendar length " + std::to_string(calendar.size()) +
                                " differs from expected_weeks = " + *expected);
    }
  }

  const auto raw = read_outcomes(cfg.resolve(required("outcomes")));
  auto covariates = read_covariates(cfg.resolve(required("covariates")));
  const auto schedule_rows = read_schedule(cfg.resolve(required("schedule")));

  IngestionRules rules;
  rules.excluded_groups = parse_group_list(cfg.get_or("excluded_groups", ""));
  rules.final_date_rule = cfg.get_bool("final_date_rule", true);
  rules.final_date = end;

  std::vector<UnitCandidate> candidates;
  for (const auto& series : raw) {
    UnitCandidate c;
    c.unit = series.unit;
    c.final_observed = std::any_of(series.observations.begin(), series.observations.end(),
                                   [&](const auto& o) { return o.first == end; });
    try {
      c.weekly = weekly_summarize(series, calendar);
    } catch (const IngestionError& e) {
      c.summarize_error = e.what();
    }
    candidates.push_back(std::move(c));
  }
  {
    std::set<std::string> with_outcomes;
    for (const auto& s : raw) with_outcomes.insert(s.unit);
    for (const auto& u : covariates.units) {
      if (!with_outcomes.contains(u)) in.report.warnings.push_back("covariate row " + u + " has no outcomes");
    }
  }

  auto result = apply_exclusions(candidates, covariates, calendar, rules);
  in.panel = std::move(result.panel);
  in.covariates = std::move(result.covariates);
  in.report.exclusions = std::move(result.exclusions);

  {
    std::vector<UnitId> decreasing;
    for (std::size_t i = 0; i < in.panel.n_units(); ++i) {
      const auto s = in.panel.series(i);
      for (Eigen::Index t = 1; t < s.size(); ++t) {
        if (s[t] < s[t - 1]) {
          decreasing.push_back(in.panel.units()[i]);
          break;
        }
      }
    }
    if (!decreasing.empty()) {
      in.report.warnings.push_back(std::to_string(decreasing.size()) +
                                   " units have a decreasing weekly value (reporting corrections?), first " +
                                   decreasing.front());
    }
  }

  for (const auto& row : schedule_rows) {
    if (rules.excluded_groups.contains(row.group)) {
      in.report.warnings.push_back("scheduled group " + row.group + " is excluded; ignored");
      continue;
    }
    const auto a = week_containing(calendar, row.adoption);
    const auto e = week_containing(calendar, row.end);
    if (!a) {
      throw ScheduleError("adoption date " + format_date(row.adoption) + " of group " + row.group +
                          " is outside the calendar");
    }
    // A lottery running past the horizon is truncated at the last week.
    const int end_week = e ? *e : (row.end > calendar.back() ? static_cast<int>(calendar.size()) - 1 : -1);
    if (end_week < 0) throw ScheduleError("end date of group " + row.group + " is outside the calendar");
    std::size_t members = 0;
    for (std::size_t i = 0; i < in.panel.n_units(); ++i) {
      if (in.panel.group()[i] != row.group) continue;
      in.schedule.add(in.panel.units()[i], *a, end_week);
      ++members;
    }
    if (members == 0) {
      const bool known = std::find(covariates.group.begin(), covariates.group.end(), row.group) !=
                         covariates.group.end();
      if (!known) throw ReferenceError("schedule group " + row.group + " matches no unit");
      in.report.warnings.push_back("every unit of scheduled group " + row.group + " was excluded");
      continue;
    }
    in.schedule_entries.push_back({row.group, row.adoption, row.end, *a, end_week});
  }
  if (in.schedule.empty()) in.report.warnings.push_back("schedule is empty: every unit is a control");
  return in;
}

inline void write_exclusions(const std::vector<Exclusion>& exclusions, const std::filesystem::path& path) {
  csv::Writer w({"unit_id", "group", "rule", "detail"});
  for (const auto& e : exclusions) w.cell(e.unit).cell(e.group).cell(e.rule).cell(e.detail).end();
  w.save(path);
}

inline std::string format_report(const Inputs& in) {
  std::string out;
  for (const auto& n : in.report.notes) out += "note: " + n + "\n";
  out += "units retained: " + std::to_string(in.panel.n_units()) + "\n";
  out += "units excluded: " + std::to_string(in.report.exclusions.size()) + "\n";
  std::map<std::string, int> by_rule;
  for (const auto& e : in.report.exclusions) ++by_rule[e.rule];
  for (const auto& [rule, count] : by_rule) out += "  " + rule + ": " + std::to_string(count) + "\n";
  out += "treated units: " + std::to_string(in.schedule.size()) + "\n";
  for (const auto& w : in.report.warnings) out += "warning: " + w + "\n";
  return out;
}

}  // namespace pscm
