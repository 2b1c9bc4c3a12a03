#pragma once

#include <array>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "pscm/error.hpp"
#include "pscm/panel.hpp"

namespace pscm {

inline const std::vector<std::string>& covariate_names() {
  static const std::vector<std::string> names{
      "hispanic", "black",        "poors",           "republicans", "high_school", "college",
      "unemployment", "deaths_per_100k", "medicare", "earnings",    "median_age"};
  return names;
}

inline bool is_percentage_covariate(std::string_view name) {
  return name != "deaths_per_100k" && name != "earnings" && name != "median_age";
}

// Invariant unit characteristics (one row per unit) plus group and population.
struct CovariateTable {
  std::vector<UnitId> units;
  std::vector<std::string> group;
  std::vector<double> population;
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // units x names

  std::size_t size() const noexcept { return units.size(); }

  std::optional<std::size_t> find(const UnitId& id) const {
    for (std::size_t i = 0; i < units.size(); ++i) {
      if (units[i] == id) return i;
    }
    return std::nullopt;
  }

  // Rows for `ids`, in that order.
  Eigen::MatrixXd rows_for(const std::vector<UnitId>& ids) const {
    std::unordered_map<std::string_view, std::size_t> index;
    for (std::size_t i = 0; i < units.size(); ++i) index.emplace(units[i], i);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(ids.size()), values.cols());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto it = index.find(ids[k]);
      if (it == index.end()) throw ReferenceError("no covariates for unit " + ids[k]);
      out.row(static_cast<Eigen::Index>(k)) = values.row(static_cast<Eigen::Index>(it->second));
    }
    return out;
  }

  // Empty string when the row is valid, otherwise the reason.
  std::string row_problem(std::size_t i) const {
    for (std::size_t c = 0; c < names.size(); ++c) {
      const double v = values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      if (!std::isfinite(v)) return names[c] + " is missing";
      if (is_percentage_covariate(names[c]) && (v < 0.0 || v > 100.0)) {
        return names[c] + " outside [0, 100]";
      }
      if (names[c] == "median_age" && !(v > 0.0)) return "median_age must be positive";
    }
    if (!(population[i] > 0.0)) return "population must be positive";
    return {};
  }
};

}  // namespace pscm
