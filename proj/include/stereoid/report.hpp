#pragma once

// Minimal SVG charts for run reports: score histograms and the tuning heatmap.

#include <stereoid/detector.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace stereoid {

namespace svg_detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

/// Blue to yellow through teal, t in [0, 1].
inline std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(40 + t * 213)), g = static_cast<int>(std::lround(30 + t * 201)),
            b = static_cast<int>(std::lround(120 - t * 80));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace svg_detail

struct HistogramSeries {
  std::string name;
  std::string color;
  std::vector<double> values;
};

/// Overlaid histograms on shared bins, with an optional vertical marker.
inline std::string svg_histogram(const std::vector<HistogramSeries>& series, const std::string& title, int bins = 40,
                                 std::optional<double> marker = std::nullopt) {
  using namespace svg_detail;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : series)
    for (double v : s.values) lo = std::min(lo, v), hi = std::max(hi, v);
  if (marker) lo = std::min(lo, *marker), hi = std::max(hi, *marker);
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi <= lo) hi = lo + 1;
  const double W = 640, H = 320, ml = 50, mr = 20, mt = 30, mb = 40;
  std::vector<std::vector<int>> counts(series.size(), std::vector<int>(bins, 0));
  int peak = 1;
  for (std::size_t k = 0; k < series.size(); ++k)
    for (double v : series[k].values) {
      int b = std::min(bins - 1, static_cast<int>((v - lo) / (hi - lo) * bins));
      peak = std::max(peak, ++counts[k][b]);
    }
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << escape(title) << "</text>\n";
  const double pw = W - ml - mr, ph = H - mt - mb, bw = pw / bins;
  for (std::size_t k = 0; k < series.size(); ++k)
    for (int b = 0; b < bins; ++b) {
      if (!counts[k][b]) continue;
      const double h = ph * counts[k][b] / peak;
      os << "<rect x=\"" << num(ml + b * bw) << "\" y=\"" << num(mt + ph - h) << "\" width=\"" << num(bw) << "\" height=\""
         << num(h) << "\" fill=\"" << series[k].color << "\" fill-opacity=\"0.6\"/>\n";
    }
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4, x = ml + pw * i / 4;
    os << "<text x=\"" << num(x) << "\" y=\"" << mt + ph + 15 << "\" text-anchor=\"middle\">" << num(v) << "</text>\n";
  }
  os << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 4 << "\" text-anchor=\"end\">" << peak << "</text>\n";
  if (marker) {
    const double x = ml + pw * (*marker - lo) / (hi - lo);
    os << "<line x1=\"" << num(x) << "\" y1=\"" << mt << "\" x2=\"" << num(x) << "\" y2=\"" << mt + ph
       << "\" stroke=\"red\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double y = mt + 12 + 14 * k;
    os << "<rect x=\"" << ml + pw - 120 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\"" << series[k].color
       << "\"/><text x=\"" << ml + pw - 105 << "\" y=\"" << y << "\">" << escape(series[k].name) << " (" << series[k].values.size()
       << ")</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// F1 over the (contamination, n_estimators) grid; the best cell is outlined.
inline std::string svg_tune_heatmap(const TuneResult& tune) {
  using namespace svg_detail;
  std::vector<double> cs;
  std::vector<int> ns;
  for (const auto& c : tune.table) {
    if (std::find(cs.begin(), cs.end(), c.contamination) == cs.end()) cs.push_back(c.contamination);
    if (std::find(ns.begin(), ns.end(), c.n_estimators) == ns.end()) ns.push_back(c.n_estimators);
  }
  std::sort(cs.begin(), cs.end());
  std::sort(ns.begin(), ns.end());
  double fmin = 1, fmax = 0;
  for (const auto& c : tune.table) fmin = std::min(fmin, c.f1), fmax = std::max(fmax, c.f1);
  const double span = fmax > fmin ? fmax - fmin : 1;
  const double W = 720, H = 420, ml = 60, mr = 20, mt = 30, mb = 50;
  const double pw = W - ml - mr, ph = H - mt - mb;
  const double cw = pw / std::max<std::size_t>(1, cs.size()), ch = ph / std::max<std::size_t>(1, ns.size());
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">Issue-class F1 by contamination and n_estimators</text>\n";
  for (const auto& c : tune.table) {
    const auto xi = std::find(cs.begin(), cs.end(), c.contamination) - cs.begin();
    const auto yi = std::find(ns.begin(), ns.end(), c.n_estimators) - ns.begin();
    os << "<rect x=\"" << num(ml + xi * cw) << "\" y=\"" << num(mt + ph - (yi + 1) * ch) << "\" width=\"" << num(cw + 0.3)
       << "\" height=\"" << num(ch + 0.3) << "\" fill=\"" << ramp((c.f1 - fmin) / span) << "\"/>\n";
  }
  {
    const auto xi = std::find(cs.begin(), cs.end(), tune.best.contamination) - cs.begin();
    const auto yi = std::find(ns.begin(), ns.end(), tune.best.n_estimators) - ns.begin();
    os << "<rect x=\"" << num(ml + xi * cw) << "\" y=\"" << num(mt + ph - (yi + 1) * ch) << "\" width=\"" << num(cw)
       << "\" height=\"" << num(ch) << "\" fill=\"none\" stroke=\"red\" stroke-width=\"2\"/>\n";
  }
  auto tick_x = [&](std::size_t i) {
    os << "<text x=\"" << num(ml + (i + 0.5) * cw) << "\" y=\"" << mt + ph + 15 << "\" text-anchor=\"middle\">"
       << num(cs[i] * 1000) << "</text>\n";
  };
  const std::size_t stepx = std::max<std::size_t>(1, cs.size() / 8), stepy = std::max<std::size_t>(1, ns.size() / 8);
  for (std::size_t i = 0; i < cs.size(); i += stepx) tick_x(i);
  for (std::size_t i = 0; i < ns.size(); i += stepy)
    os << "<text x=\"" << ml - 6 << "\" y=\"" << num(mt + ph - (i + 0.5) * ch + 4) << "\" text-anchor=\"end\">" << ns[i]
       << "</text>\n";
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">contamination (x 1e-3)</text>\n";
  os << "<text x=\"14\" y=\"" << mt + ph / 2 << "\" transform=\"rotate(-90 14 " << mt + ph / 2
     << ")\" text-anchor=\"middle\">n_estimators</text>\n";
  os << "<text x=\"" << W - mr << "\" y=\"" << H - 12 << "\" text-anchor=\"end\">F1 " << num(fmin) << " to " << num(fmax)
     << ", best outlined</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace stereoid
