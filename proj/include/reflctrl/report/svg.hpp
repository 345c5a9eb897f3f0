#pragma once

// Minimal deterministic SVG charts: line/scatter plots and heatmaps. Output
// depends only on the input data, so regenerated figures are byte-identical.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace reflctrl::svg {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
  bool lines = true;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  int width = 640;
  int height = 420;
};

inline const char* palette(std::size_t i) {
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return kColors[i % 6];
}

// Axis ticks at "nice" steps covering [lo, hi].
inline std::vector<double> ticks(double lo, double hi, int target = 5) {
  const double span = hi - lo;
  if (!(span > 0)) return {lo};
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    if (raw <= m * mag) {
      step = m * mag;
      break;
    }
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + step * 1e-9; t += step) out.push_back(std::abs(t) < step * 1e-9 ? 0.0 : t);
  return out;
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::string render(const LinePlot& p) {
  const double left = 70, right = 150, top = 40, bottom = 55;
  const double pw = p.width - left - right, ph = p.height - top - bottom;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : p.series) {
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double ypad = (y1 - y0) * 0.08, xpad = (x1 - x0) * 0.04;
  y0 -= ypad, y1 += ypad, x0 -= xpad, x1 += xpad;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << p.width << "\" height=\"" << p.height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(left + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(p.title)
    << "</text>\n";
  o << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(pw) << "\" height=\"" << num(ph)
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (double t : ticks(x0, x1)) {
    o << "<line x1=\"" << num(sx(t)) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(sx(t)) << "\" y2=\""
      << num(top + ph + 5) << "\" stroke=\"#444\"/>";
    o << "<text x=\"" << num(sx(t)) << "\" y=\"" << num(top + ph + 18) << "\" text-anchor=\"middle\">" << tick_label(t)
      << "</text>\n";
  }
  for (double t : ticks(y0, y1)) {
    o << "<line x1=\"" << num(left - 5) << "\" y1=\"" << num(sy(t)) << "\" x2=\"" << num(left) << "\" y2=\"" << num(sy(t))
      << "\" stroke=\"#444\"/>";
    o << "<text x=\"" << num(left - 8) << "\" y=\"" << num(sy(t) + 4) << "\" text-anchor=\"end\">" << tick_label(t)
      << "</text>\n";
  }
  o << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(p.height - 12) << "\" text-anchor=\"middle\">"
    << escape(p.x_label) << "</text>\n";
  o << "<text transform=\"translate(16," << num(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(p.y_label) << "</text>\n";
  for (std::size_t i = 0; i < p.series.size(); ++i) {
    const auto& s = p.series[i];
    const char* c = palette(i);
    if (s.lines && s.points.size() > 1) {
      o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
      for (std::size_t k = 0; k < s.points.size(); ++k) {
        o << (k ? " " : "") << num(sx(s.points[k].first)) << ',' << num(sy(s.points[k].second));
      }
      o << "\"/>\n";
    }
    for (auto [x, y] : s.points) {
      o << "<circle cx=\"" << num(sx(x)) << "\" cy=\"" << num(sy(y)) << "\" r=\"" << (s.lines ? 3.5 : 5.5)
        << "\" fill=\"" << c << "\"/>\n";
    }
    const double ly = top + 14 + 18.0 * static_cast<double>(i);
    o << "<rect x=\"" << num(left + pw + 12) << "\" y=\"" << num(ly - 9) << "\" width=\"10\" height=\"10\" fill=\"" << c
      << "\"/><text x=\"" << num(left + pw + 28) << "\" y=\"" << num(ly) << "\">" << escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

struct Heatmap {
  std::string title;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::vector<std::optional<double>>> values;  // rows x cols; nullopt drawn hatched grey
  std::string x_label;
  std::string y_label;
};

// Diverging blue-white-red scale symmetric around zero.
inline std::string diverging(double v, double vmax) {
  const double t = vmax > 0 ? std::clamp(v / vmax, -1.0, 1.0) : 0.0;
  auto mix = [](double a, double b, double u) { return static_cast<int>(std::lround(a + (b - a) * u)); };
  int r, g, b;
  if (t >= 0) r = mix(255, 178, t), g = mix(255, 24, t), b = mix(255, 43, t);
  else r = mix(255, 33, -t), g = mix(255, 102, -t), b = mix(255, 172, -t);
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline std::string render(const Heatmap& h) {
  const std::size_t rows = h.values.size(), cols = rows ? h.values[0].size() : 0;
  const double cell_w = std::clamp(480.0 / std::max<std::size_t>(cols, 1), 14.0, 60.0);
  const double cell_h = std::clamp(520.0 / std::max<std::size_t>(rows, 1), 12.0, 40.0);
  const double left = 70, top = 40;
  const double width = left + cell_w * static_cast<double>(cols) + 110, height = top + cell_h * static_cast<double>(rows) + 60;
  double vmax = 0;
  for (const auto& r : h.values) {
    for (const auto& v : r) {
      if (v) vmax = std::max(vmax, std::abs(*v));
    }
  }
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(h.title)
    << "</text>\n";
  for (std::size_t r = 0; r < rows; ++r) {
    const double y = top + cell_h * static_cast<double>(r);
    o << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y + cell_h / 2 + 4) << "\" text-anchor=\"end\">"
      << escape(r < h.row_labels.size() ? h.row_labels[r] : std::to_string(r)) << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c) {
      const auto& v = h.values[r][c];
      o << "<rect x=\"" << num(left + cell_w * static_cast<double>(c)) << "\" y=\"" << num(y) << "\" width=\""
        << num(cell_w) << "\" height=\"" << num(cell_h) << "\" fill=\"" << (v ? diverging(*v, vmax) : "#bbbbbb")
        << "\" stroke=\"white\"><title>" << (v ? tick_label(*v) : "undefined") << "</title></rect>\n";
    }
  }
  const double yb = top + cell_h * static_cast<double>(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    o << "<text x=\"" << num(left + cell_w * (static_cast<double>(c) + 0.5)) << "\" y=\"" << num(yb + 16)
      << "\" text-anchor=\"middle\">" << escape(c < h.col_labels.size() ? h.col_labels[c] : std::to_string(c))
      << "</text>\n";
  }
  o << "<text x=\"" << num(left + cell_w * static_cast<double>(cols) / 2) << "\" y=\"" << num(yb + 40)
    << "\" text-anchor=\"middle\">" << escape(h.x_label) << "</text>\n";
  o << "<text transform=\"translate(14," << num(top + cell_h * static_cast<double>(rows) / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">" << escape(h.y_label) << "</text>\n";
  const double lx = left + cell_w * static_cast<double>(cols) + 20;
  for (int k = 0; k <= 10; ++k) {
    const double v = vmax * (1.0 - k / 5.0);
    o << "<rect x=\"" << num(lx) << "\" y=\"" << num(top + 16.0 * k) << "\" width=\"16\" height=\"16\" fill=\""
      << diverging(v, vmax) << "\"/>";
    if (k % 5 == 0) {
      o << "<text x=\"" << num(lx + 22) << "\" y=\"" << num(top + 16.0 * k + 12) << "\">" << tick_label(std::round(v * 1e4) / 1e4)
        << "</text>";
    }
    o << "\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace reflctrl::svg
