#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "streetrisk/causal.hpp"
#include "streetrisk/shap.hpp"

// Small self-contained SVG emitters for the figure data; no styling beyond
// what is needed to read them.
namespace streetrisk::svg {

inline std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string header(int w, int h) {
  return fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      w, h);
}

// Horizontal bars, largest first.
inline std::string bar_chart(const std::vector<std::string>& labels, const std::vector<double>& values,
                             std::string_view title) {
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] > values[b]; });
  const double vmax = values.empty() ? 1.0 : std::max(1e-300, *std::max_element(values.begin(), values.end()));
  const int bar_h = 20, left = 110, width = 520, top = 36;
  const int h = top + static_cast<int>(labels.size()) * (bar_h + 4) + 16;
  std::string out = header(left + width + 80, h);
  out += fmt::format("<text x=\"10\" y=\"22\" font-size=\"14\">{}</text>\n", escape(title));
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto i = order[r];
    const int y = top + static_cast<int>(r) * (bar_h + 4);
    const double w = values[i] / vmax * width;
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", left - 6, y + 15, escape(labels[i]));
    out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{:.2f}\" height=\"{}\" fill=\"#3b75af\"/>\n", left, y, w, bar_h);
    out += fmt::format("<text x=\"{:.2f}\" y=\"{}\">{:.3f}</text>\n", left + w + 4, y + 15, values[i]);
  }
  return out + "</svg>\n";
}

inline std::string scatter(const std::vector<DependencePoint>& pts, std::string_view title, std::string_view xlabel) {
  const int w = 520, h = 380, m = 50;
  std::string out = header(w, h);
  out += fmt::format("<text x=\"10\" y=\"22\" font-size=\"14\">{}</text>\n", escape(title));
  out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", w / 2, h - 10, escape(xlabel));
  if (pts.empty()) return out + "</svg>\n";
  double x0 = pts.front().value, x1 = x0, y0 = pts.front().phi, y1 = y0;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.value);
    x1 = std::max(x1, p.value);
    y0 = std::min(y0, p.phi);
    y1 = std::max(y1, p.phi);
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto sx = [&](double v) { return m + (v - x0) / (x1 - x0) * (w - 2 * m); };
  auto sy = [&](double v) { return h - m - (v - y0) / (y1 - y0) * (h - 2 * m); };
  out += fmt::format("<line x1=\"{}\" y1=\"{:.2f}\" x2=\"{}\" y2=\"{:.2f}\" stroke=\"#999\"/>\n", m, sy(0.0), w - m,
                     sy(0.0));
  for (const auto& p : pts)
    out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"2.5\" fill=\"#c0392b\" fill-opacity=\"0.6\"/>\n",
                       sx(p.value), sy(p.phi));
  return out + "</svg>\n";
}

// Treatment x outcome grid coloured by log odds ratio, annotated with OR and stars.
inline std::string effect_grid(const EffectMatrix& m) {
  const int cw = 120, ch = 34, left = 170, top = 60;
  std::vector<std::pair<std::string, std::vector<std::string>>> rows;  // label, per-outcome cell text
  std::vector<std::vector<double>> logs;
  for (std::size_t t = 0; t < m.treatments.size(); ++t) {
    std::size_t n_levels = 1;
    for (std::size_t o = 0; o < m.outcomes.size(); ++o)
      if (const auto& c = m.at(t, o); c.estimate) n_levels = std::max(n_levels, c.estimate->effects.size());
    for (std::size_t l = 0; l < n_levels; ++l) {
      std::string label = m.treatments[t];
      std::vector<std::string> text;
      std::vector<double> lg;
      for (std::size_t o = 0; o < m.outcomes.size(); ++o) {
        const auto& c = m.at(t, o);
        if (!c.estimate || l >= c.estimate->effects.size()) {
          text.push_back("n/a");
          lg.push_back(0.0);
          continue;
        }
        const auto& le = c.estimate->effects[l];
        if (c.estimate->kind == TreatmentKind::Categorical) label = m.treatments[t] + ":" + le.label;
        text.push_back(fmt::format("{:.3f}{}", le.odds_ratio, le.p_value ? significance_stars(*le.p_value) : ""));
        lg.push_back(std::log(le.odds_ratio));
      }
      rows.push_back({label, text});
      logs.push_back(lg);
    }
  }
  double lmax = 1e-9;
  for (const auto& r : logs)
    for (double v : r) lmax = std::max(lmax, std::abs(v));
  const int w = left + cw * static_cast<int>(m.outcomes.size()) + 20;
  const int h = top + ch * static_cast<int>(rows.size()) + 40;
  std::string out = header(w, h);
  out += "<text x=\"10\" y=\"22\" font-size=\"14\">Odds ratios (* p&lt;0.05, ** p&lt;0.01, *** p&lt;0.001)</text>\n";
  for (std::size_t o = 0; o < m.outcomes.size(); ++o)
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", left + cw * static_cast<int>(o) + cw / 2,
                       top - 8, escape(m.outcomes[o]));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int y = top + ch * static_cast<int>(r);
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", left - 6, y + ch / 2 + 4,
                       escape(rows[r].first));
    for (std::size_t o = 0; o < rows[r].second.size(); ++o) {
      const double t = logs[r][o] / lmax;  // -1 .. 1
      const int red = t > 0 ? 255 : static_cast<int>(255 * (1 + t));
      const int blue = t < 0 ? 255 : static_cast<int>(255 * (1 - t));
      const int green = static_cast<int>(255 * (1 - std::abs(t)));
      const int x = left + cw * static_cast<int>(o);
      out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({},{},{})\" stroke=\"white\"/>\n", x,
                         y, cw, ch, red, green, blue);
      out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x + cw / 2, y + ch / 2 + 4,
                         escape(rows[r].second[o]));
    }
  }
  return out + "</svg>\n";
}

}  // namespace streetrisk::svg
