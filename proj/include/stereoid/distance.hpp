#pragma once

#include <stereoid/core.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace stereoid {

/// Weights of the aggregate discrepancy alpha*L1 + beta*L2 + gamma*(1 - SSIM).
struct DistanceWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;

  void validate() const {
    if (!(alpha >= 0 && beta >= 0 && gamma >= 0)) throw ConfigError("distance weights must be nonnegative");
  }
};

enum class Reduction { mean, sum };
enum class SsimMode { global, gaussian_window };

struct DistanceOptions {
  DistanceWeights weights;
  Reduction reduction = Reduction::mean;
  SsimMode ssim_mode = SsimMode::global;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

struct DiscrepancyRecord {
  std::string frame_id;
  double l1 = 0;
  double l2 = 0;
  double ssim = 1;
  double aggregate = 0;
};

namespace detail {
inline void check_pair(const TensorImage& a, const TensorImage& b) {
  if (!a.same_shape(b)) throw ShapeError("cannot compare " + a.dims_string() + " with " + b.dims_string());
  if (a.range() != ValueRange::unit || b.range() != ValueRange::unit)
    throw DataError("distance metrics expect unit-range images");
}
}  // namespace detail

inline double dist_l1(const TensorImage& syn, const TensorImage& run, Reduction reduction = Reduction::mean) {
  detail::check_pair(syn, run);
  double acc = 0;
  auto a = syn.data(), b = run.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
  return reduction == Reduction::mean ? acc / static_cast<double>(a.size()) : acc;
}

/// Root of the mean (or, literally, the sum) of squared differences.
inline double dist_l2(const TensorImage& syn, const TensorImage& run, Reduction reduction = Reduction::mean) {
  detail::check_pair(syn, run);
  double acc = 0;
  auto a = syn.data(), b = run.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return std::sqrt(reduction == Reduction::mean ? acc / static_cast<double>(a.size()) : acc);
}

namespace detail {

inline double ssim_from_moments(double mx, double my, double vx, double vy, double cxy, double c1, double c2) {
  return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

inline double ssim_global_plane(std::span<const float> x, std::span<const float> y, double c1, double c2) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double vx = 0, vy = 0, cxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cxy += dx * dy;
  }
  return ssim_from_moments(mx, my, vx / n, vy / n, cxy / n, c1, c2);
}

/// 11x11 Gaussian window (sigma 1.5), valid positions only; falls back to the
/// global statistic when the plane is smaller than the window.
inline double ssim_windowed_plane(std::span<const float> x, std::span<const float> y, int h, int w, double c1,
                                  double c2) {
  constexpr int k = 11;
  if (h < k || w < k) return ssim_global_plane(x, y, c1, c2);
  double g[k];
  double gsum = 0;
  for (int i = 0; i < k; ++i) {
    g[i] = std::exp(-((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
    gsum += g[i];
  }
  for (double& v : g) v /= gsum;
  double total = 0;
  int count = 0;
  for (int y0 = 0; y0 + k <= h; ++y0)
    for (int x0 = 0; x0 + k <= w; ++x0) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          double wt = g[dy] * g[dx];
          std::size_t idx = static_cast<std::size_t>(y0 + dy) * w + x0 + dx;
          double a = x[idx], b = y[idx];
          mx += wt * a;
          my += wt * b;
          sxx += wt * a * a;
          syy += wt * b * b;
          sxy += wt * a * b;
        }
      total += ssim_from_moments(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my, c1, c2);
      ++count;
    }
  return total / count;
}

}  // namespace detail

/// Per-channel SSIM averaged over channels. The global mode uses whole-image
/// population statistics.
inline double dist_ssim(const TensorImage& syn, const TensorImage& run, double c1 = 0.01 * 0.01,
                        double c2 = 0.03 * 0.03, SsimMode mode = SsimMode::global) {
  detail::check_pair(syn, run);
  double acc = 0;
  for (int c = 0; c < syn.channels(); ++c) {
    acc += mode == SsimMode::global
               ? detail::ssim_global_plane(syn.plane(c), run.plane(c), c1, c2)
               : detail::ssim_windowed_plane(syn.plane(c), run.plane(c), syn.height(), syn.width(), c1, c2);
  }
  return acc / syn.channels();
}

inline double aggregate_discrepancy(double l1, double l2, double ssim, const DistanceWeights& w) {
  return w.alpha * l1 + w.beta * l2 + w.gamma * (1.0 - ssim);
}

inline DiscrepancyRecord measure(std::string frame_id, const TensorImage& syn, const TensorImage& run,
                                 const DistanceOptions& opt = {}) {
  DiscrepancyRecord r;
  r.frame_id = std::move(frame_id);
  r.l1 = dist_l1(syn, run, opt.reduction);
  r.l2 = dist_l2(syn, run, opt.reduction);
  r.ssim = dist_ssim(syn, run, opt.c1, opt.c2, opt.ssim_mode);
  r.aggregate = aggregate_discrepancy(r.l1, r.l2, r.ssim, opt.weights);
  return r;
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline nlohmann::ordered_json distance_options_json(const DistanceOptions& opt) {
  nlohmann::ordered_json j;
  j["dist_alpha"] = opt.weights.alpha;
  j["dist_beta"] = opt.weights.beta;
  j["dist_gamma"] = opt.weights.gamma;
  j["reduction"] = opt.reduction == Reduction::mean ? "mean" : "sum";
  j["ssim_mode"] = opt.ssim_mode == SsimMode::global ? "global" : "gaussian_window";
  j["c1"] = opt.c1;
  j["c2"] = opt.c2;
  return j;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".json");
  return p;
}

/// CSV `frame_id,l1,l2,ssim,aggregate` plus a JSON sidecar holding the weights.
inline void write_discrepancy_csv(const std::filesystem::path& path, const std::vector<DiscrepancyRecord>& records,
                                  const DistanceOptions& opt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "frame_id,l1,l2,ssim,aggregate\n";
  for (const auto& r : records)
    out << r.frame_id << ',' << format_real(r.l1) << ',' << format_real(r.l2) << ',' << format_real(r.ssim) << ','
        << format_real(r.aggregate) << '\n';
  std::ofstream side(sidecar_path(path), std::ios::binary);
  side << distance_options_json(opt).dump(2) << '\n';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_real(const std::string& s, const std::string& context) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(context + ": cannot parse number '" + s + "'");
  }
}

inline std::vector<DiscrepancyRecord> read_discrepancy_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != std::vector<std::string>{"frame_id", "l1", "l2", "ssim", "aggregate"})
    throw DataError(path.string() + ":1: expected header frame_id,l1,l2,ssim,aggregate");
  std::vector<DiscrepancyRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    const std::string ctx = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 5) throw DataError(ctx + ": expected 5 fields");
    out.push_back({f[0], parse_real(f[1], ctx), parse_real(f[2], ctx), parse_real(f[3], ctx), parse_real(f[4], ctx)});
  }
  return out;
}

}  // namespace stereoid
