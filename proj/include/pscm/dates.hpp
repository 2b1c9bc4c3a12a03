#pragma once

#include <charconv>
#include <chrono>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pscm {

using Date = std::chrono::sys_days;

// Strict ISO-8601 calendar date (YYYY-MM-DD).
inline std::optional<Date> parse_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  auto field = [&](std::size_t pos, std::size_t len, auto& out) {
    auto [p, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, out);
    return ec == std::errc{} && p == s.data() + pos + len;
  };
  if (!field(0, 4, y) || !field(5, 2, m) || !field(8, 2, d)) return std::nullopt;
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m},
                                        std::chrono::day{d}};
  if (!ymd.ok()) return std::nullopt;
  return Date{ymd};
}

inline std::string format_date(Date date) {
  const std::chrono::year_month_day ymd{date};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

inline bool is_thursday(Date date) {
  return std::chrono::weekday{date} == std::chrono::Thursday;
}

// First Thursday on or after `date`.
inline Date thursday_on_or_after(Date date) {
  while (!is_thursday(date)) date += std::chrono::days{1};
  return date;
}

// Weekly grid of Thursdays covering [start, end]: from the first Thursday on
// or after `start` to the Thursday closing the week that contains `end`.
inline std::vector<Date> thursday_calendar(Date start, Date end) {
  std::vector<Date> out;
  if (end < start) return out;
  const Date last = thursday_on_or_after(end);
  for (Date d = thursday_on_or_after(start); d <= last; d += std::chrono::days{7}) {
    out.push_back(d);
  }
  return out;
}

// Index of the calendar week (Friday..Thursday window) containing `date`, or
// nullopt when the date falls outside the grid.
inline std::optional<int> week_containing(const std::vector<Date>& calendar, Date date) {
  if (calendar.empty()) return std::nullopt;
  const Date first_window_start = calendar.front() - std::chrono::days{6};
  if (date < first_window_start || date > calendar.back()) return std::nullopt;
  const Date thursday = thursday_on_or_after(date);
  return static_cast<int>((thursday - calendar.front()).count() / 7);
}

}  // namespace pscm
