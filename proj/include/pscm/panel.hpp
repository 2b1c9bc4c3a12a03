#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "pscm/dates.hpp"
#include "pscm/error.hpp"

namespace pscm {

using UnitId = std::string;

// Half-open range of week indices [begin, end).
struct Window {
  int begin = 0;
  int end = 0;

  int size() const noexcept { return end > begin ? end - begin : 0; }
  bool empty() const noexcept { return end <= begin; }
  bool contains(int t) const noexcept { return t >= begin && t < end; }
  friend bool operator==(const Window&, const Window&) = default;
};

// Balanced panel of weekly outcomes (percent of adults with a first dose).
// Immutable once constructed; the constructor enforces the invariants.
class PanelData {
 public:
  PanelData() = default;

  PanelData(std::vector<UnitId> units, std::vector<Date> calendar, Eigen::MatrixXd outcomes,
            std::vector<double> population, std::vector<std::string> group)
      : units_(std::move(units)),
        calendar_(std::move(calendar)),
        outcomes_(std::move(outcomes)),
        population_(std::move(population)),
        group_(std::move(group)) {
    const auto n = units_.size();
    if (static_cast<std::size_t>(outcomes_.rows()) != n || population_.size() != n ||
        group_.size() != n) {
      throw DomainError("panel: unit metadata and outcome rows disagree in length");
    }
    if (!calendar_.empty() && static_cast<std::size_t>(outcomes_.cols()) != calendar_.size()) {
      throw DomainError("panel: outcome columns do not match the calendar length");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!index_.emplace(units_[i], i).second) {
        throw ReferenceError("panel: duplicate unit id " + units_[i]);
      }
      if (!(population_[i] > 0.0) || !std::isfinite(population_[i])) {
        throw DomainError("panel: unit " + units_[i] + " has non-positive population");
      }
      for (Eigen::Index t = 0; t < outcomes_.cols(); ++t) {
        const double y = outcomes_(static_cast<Eigen::Index>(i), t);
        if (!(y >= 0.0 && y <= 100.0)) {
          throw DomainError("panel: outcome of unit " + units_[i] + " at week " +
                            std::to_string(t) + " outside [0, 100]");
        }
      }
    }
  }

  std::size_t n_units() const noexcept { return units_.size(); }
  int n_weeks() const noexcept { return static_cast<int>(outcomes_.cols()); }
  // Index of the final calendar week (T).
  int last_week() const noexcept { return n_weeks() - 1; }

  const std::vector<UnitId>& units() const noexcept { return units_; }
  const std::vector<Date>& calendar() const noexcept { return calendar_; }
  const Eigen::MatrixXd& outcomes() const noexcept { return outcomes_; }
  const std::vector<double>& population() const noexcept { return population_; }
  const std::vector<std::string>& group() const noexcept { return group_; }

  std::optional<std::size_t> find(const UnitId& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t row(const UnitId& id) const {
    auto r = find(id);
    if (!r) throw ReferenceError("unknown unit id " + id);
    return *r;
  }

  Eigen::VectorXd series(std::size_t row) const {
    return outcomes_.row(static_cast<Eigen::Index>(row)).transpose();
  }

 private:
  std::vector<UnitId> units_;
  std::vector<Date> calendar_;
  Eigen::MatrixXd outcomes_;
  std::vector<double> population_;
  std::vector<std::string> group_;
  std::unordered_map<UnitId, std::size_t> index_;
};

struct TreatmentSpell {
  int adoption = 0;
  int lottery_end = 0;
};

// Adoption and lottery-end weeks per treated unit. Units without an entry are
// controls over the whole horizon.
class TreatmentSchedule {
 public:
  void add(const UnitId& unit, int adoption, int lottery_end) {
    if (lottery_end < adoption) {
      throw ScheduleError("schedule: lottery end precedes adoption for unit " + unit);
    }
    if (!spells_.emplace(unit, TreatmentSpell{adoption, lottery_end}).second) {
      throw ScheduleError("schedule: unit " + unit + " listed twice");
    }
  }

  bool is_treated(const UnitId& unit) const { return spells_.contains(unit); }
  bool empty() const noexcept { return spells_.empty(); }
  std::size_t size() const noexcept { return spells_.size(); }

  std::optional<TreatmentSpell> spell(const UnitId& unit) const {
    auto it = spells_.find(unit);
    if (it == spells_.end()) return std::nullopt;
    return it->second;
  }

  // Earliest adoption week (t0).
  int t0() const {
    if (spells_.empty()) throw ScheduleError("schedule has no treated units");
    int m = spells_.begin()->second.adoption;
    for (const auto& [_, s] : spells_) m = std::min(m, s.adoption);
    return m;
  }

  const std::map<UnitId, TreatmentSpell>& spells() const noexcept { return spells_; }

 private:
  std::map<UnitId, TreatmentSpell> spells_;
};

// Binary treatment matrix D (units x weeks). Absorbing: a treated row is
// 0 before adoption and 1 from adoption onward.
inline Eigen::MatrixXi treatment_matrix(const TreatmentSchedule& schedule, const PanelData& panel) {
  const int weeks = panel.n_weeks();
  Eigen::MatrixXi d = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(panel.n_units()), weeks);
  for (const auto& [unit, spell] : schedule.spells()) {
    const auto row = panel.find(unit);
    if (!row) throw ReferenceError("schedule references unit " + unit + " absent from the panel");
    if (spell.adoption < 0 || spell.adoption >= weeks) {
      throw ScheduleError("adoption week " + std::to_string(spell.adoption) + " of unit " + unit +
                          " is outside the calendar");
    }
    d.row(static_cast<Eigen::Index>(*row)).tail(weeks - spell.adoption).setOnes();
  }
  return d;
}

// Event-time alignment of one treated unit. `lead` holds the early weeks not
// used for fitting, so lead, pre, treat and post partition 0..T.
struct AlignedSeries {
  UnitId unit;
  Window lead;
  Window pre;
  Window treat;
  Window post;
  int h = 0;
  int adoption = 0;
  int lottery_end = 0;
};

// Windows for a spell given the reference adoption week t0 and the last
// calendar week. The fit window holds the most recent min(t0, adoption) weeks
// before adoption.
inline AlignedSeries align_spell(const UnitId& unit, TreatmentSpell spell, int t0, int last_week) {
  if (spell.adoption < 0 || spell.adoption > last_week) {
    throw ScheduleError("adoption of unit " + unit + " is outside the calendar");
  }
  if (spell.lottery_end < spell.adoption) {
    throw ScheduleError("lottery end precedes adoption for unit " + unit);
  }
  const int pre_len = std::min(t0, spell.adoption);
  if (pre_len < 2) {
    throw AlignmentError("unit " + unit + " has " + std::to_string(pre_len) +
                         " pre-adoption weeks; at least 2 are required");
  }
  const int end = std::min(spell.lottery_end, last_week);
  AlignedSeries a;
  a.unit = unit;
  a.lead = {0, spell.adoption - pre_len};
  a.pre = {spell.adoption - pre_len, spell.adoption};
  a.treat = {spell.adoption, end + 1};
  a.post = {end + 1, last_week + 1};
  a.h = spell.adoption - t0;
  a.adoption = spell.adoption;
  a.lottery_end = end;
  return a;
}

inline AlignedSeries align(const PanelData& panel, const TreatmentSchedule& schedule,
                           const UnitId& unit) {
  const auto spell = schedule.spell(unit);
  if (!spell) throw AlignmentError("unit " + unit + " is not treated");
  if (!panel.find(unit)) throw ReferenceError("unknown unit id " + unit);
  return align_spell(unit, *spell, schedule.t0(), panel.last_week());
}

struct TreatedSet {
  std::vector<UnitId> units;
  std::vector<std::size_t> rows;
  std::vector<double> eta;
};

// Treated units matching `selector` (called with the panel row), in panel
// order, with population-share weights eta.
inline TreatedSet pooled_treated_set(const PanelData& panel, const TreatmentSchedule& schedule,
                                     const std::function<bool(std::size_t)>& selector) {
  TreatedSet set;
  double total = 0.0;
  for (std::size_t r = 0; r < panel.n_units(); ++r) {
    if (!schedule.is_treated(panel.units()[r]) || !selector(r)) continue;
    set.units.push_back(panel.units()[r]);
    set.rows.push_back(r);
    total += panel.population()[r];
  }
  if (set.units.empty()) throw SelectionError("selector matches no treated unit");
  set.eta.reserve(set.rows.size());
  for (auto r : set.rows) set.eta.push_back(panel.population()[r] / total);
  return set;
}

}  // namespace pscm
