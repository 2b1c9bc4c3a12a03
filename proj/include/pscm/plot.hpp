#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pscm/csv.hpp"
#include "pscm/error.hpp"

namespace pscm {

struct BandSeries {
  std::string selector;
  std::string mode;
  std::vector<int> weeks;
  std::vector<double> q05, q95, psi;
  int adoption_week = 0;
  int lottery_end_week = 0;
};

// Reads the band and selector tables written by `run`.
inline std::vector<BandSeries> read_bands(const std::filesystem::path& dir) {
  const auto bands_path = dir / "bands.csv";
  const auto sel_path = dir / "selectors.csv";
  for (const auto& p : {bands_path, sel_path}) {
    if (!std::filesystem::exists(p)) {
      throw ArtifactError(p.string() + " not found; run `pscm run` to produce it first");
    }
  }
  std::vector<BandSeries> out;
  const auto sel = csv::read(sel_path);
  const auto c_name = sel.column("selector"), c_mode = sel.column("mode");
  const auto c_adopt = sel.column("adoption_week"), c_end = sel.column("lottery_end_week");
  for (const auto& row : sel.rows) {
    BandSeries b;
    b.selector = row.fields[c_name];
    b.mode = row.fields[c_mode];
    b.adoption_week = static_cast<int>(csv::required_number(sel, row, c_adopt));
    b.lottery_end_week = static_cast<int>(csv::required_number(sel, row, c_end));
    out.push_back(std::move(b));
  }
  const auto bands = csv::read(bands_path);
  const auto c_sel = bands.column("selector"), c_week = bands.column("week");
  const auto c_lo = bands.column("q05"), c_hi = bands.column("q95"), c_psi = bands.column("psi");
  for (const auto& row : bands.rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const BandSeries& b) { return b.selector == row.fields[c_sel]; });
    if (it == out.end()) throw ArtifactError("bands.csv names unknown selector " + row.fields[c_sel]);
    it->weeks.push_back(static_cast<int>(csv::required_number(bands, row, c_week)));
    it->q05.push_back(csv::required_number(bands, row, c_lo));
    it->q95.push_back(csv::required_number(bands, row, c_hi));
    it->psi.push_back(csv::required_number(bands, row, c_psi));
  }
  return out;
}

// Effect series with its placebo band, a zero line and dashed markers at
// adoption and lottery end. Event-time plots mark event week 0 only.
inline std::string render_svg(const BandSeries& b) {
  const double W = 720, H = 400, L = 60, R = 20, T = 30, B = 40;
  if (b.weeks.empty()) throw ArtifactError("selector " + b.selector + " has no band points");
  double lo = 0.0, hi = 0.0;
  for (std::size_t i = 0; i < b.weeks.size(); ++i) {
    lo = std::min({lo, b.q05[i], b.psi[i]});
    hi = std::max({hi, b.q95[i], b.psi[i]});
  }
  if (hi - lo < 1e-9) hi = lo + 1.0;
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  const double x0 = b.weeks.front(), x1 = std::max(b.weeks.back(), b.weeks.front() + 1);
  auto sx = [&](double w) { return L + (w - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double v) { return T + (hi - v) / (hi - lo) * (H - T - B); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(L) + "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" + b.selector +
       " (" + b.mode + ")</text>\n";
  std::string band = "<polygon fill=\"#c6dbef\" stroke=\"none\" points=\"";
  for (std::size_t i = 0; i < b.weeks.size(); ++i) band += num(sx(b.weeks[i])) + "," + num(sy(b.q95[i])) + " ";
  for (std::size_t i = b.weeks.size(); i-- > 0;) band += num(sx(b.weeks[i])) + "," + num(sy(b.q05[i])) + " ";
  s += band + "\"/>\n";
  s += "<line x1=\"" + num(L) + "\" x2=\"" + num(W - R) + "\" y1=\"" + num(sy(0)) + "\" y2=\"" + num(sy(0)) +
       "\" stroke=\"#888\"/>\n";
  auto marker = [&](double w, const char* color) {
    s += "<line x1=\"" + num(sx(w)) + "\" x2=\"" + num(sx(w)) + "\" y1=\"" + num(T) + "\" y2=\"" + num(H - B) +
         "\" stroke=\"" + color + "\" stroke-dasharray=\"4 3\"/>\n";
  };
  if (b.mode == "event_time") {
    marker(0, "#d62728");
  } else {
    marker(b.adoption_week, "#d62728");
    marker(b.lottery_end_week, "#2ca02c");
  }
  std::string line = "<polyline fill=\"none\" stroke=\"#08519c\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < b.weeks.size(); ++i) line += num(sx(b.weeks[i])) + "," + num(sy(b.psi[i])) + " ";
  s += line + "\"/>\n";
  s += "<text x=\"" + num(L) + "\" y=\"" + num(H - 10) + "\" font-family=\"sans-serif\" font-size=\"11\">week " +
       std::to_string(b.weeks.front()) + " .. " + std::to_string(b.weeks.back()) + "; band = 5%/95% placebo quantiles</text>\n";
  s += "<text x=\"5\" y=\"" + num(sy(hi - pad)) + "\" font-family=\"sans-serif\" font-size=\"11\">" + num(hi - pad) + "</text>\n";
  s += "<text x=\"5\" y=\"" + num(sy(lo + pad)) + "\" font-family=\"sans-serif\" font-size=\"11\">" + num(lo + pad) + "</text>\n";
  s += "</svg>\n";
  return s;
}

// Writes plot_<selector>.svg and plot_<selector>.csv (week, q05, q95, psi).
inline std::vector<std::filesystem::path> write_plots(const std::filesystem::path& dir, const std::string& target,
                                                      const std::filesystem::path& out_dir) {
  const auto bands = read_bands(dir);
  std::vector<std::filesystem::path> written;
  std::filesystem::create_directories(out_dir);
  for (const auto& b : bands) {
    if (target != "all" && b.selector != target) continue;
    csv::Writer w({"week", "q05", "q95", "psi"});
    for (std::size_t i = 0; i < b.weeks.size(); ++i) w.cell(b.weeks[i]).cell(b.q05[i]).cell(b.q95[i]).cell(b.psi[i]).end();
    const auto csv_path = out_dir / ("plot_" + b.selector + ".csv");
    const auto svg_path = out_dir / ("plot_" + b.selector + ".svg");
    w.save(csv_path);
    std::ofstream(svg_path, std::ios::binary) << render_svg(b);
    written.push_back(svg_path);
    written.push_back(csv_path);
  }
  if (written.empty()) throw SelectionError("no selector named " + target + " in " + dir.string());
  return written;
}

}  // namespace pscm
