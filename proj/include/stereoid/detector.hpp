#pragma once

#include <stereoid/core.hpp>
#include <stereoid/distance.hpp>
#include <stereoid/rng.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace stereoid {

struct ForestConfig {
  int n_estimators = 110;
  double contamination = 0.058;
  int subsample_size = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_estimators < 1) throw ConfigError("n_estimators must be at least 1");
    if (!(contamination > 0.0 && contamination <= 0.5)) throw ConfigError("contamination must lie in (0, 0.5]");
    if (subsample_size < 2) throw ConfigError("subsample_size must be at least 2");
  }
};

/// Row-major n x d matrix of detector features.
struct PointMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  PointMatrix() = default;
  PointMatrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
    if (values.size() != rows * cols) throw ShapeError("point matrix size mismatch");
  }
  static PointMatrix column(std::span<const double> xs) {
    return PointMatrix(xs.size(), 1, std::vector<double>(xs.begin(), xs.end()));
  }
  std::span<const double> row(std::size_t i) const { return std::span<const double>(values).subspan(i * cols, cols); }
};

/// Average unsuccessful-search path length of a BST with m nodes:
/// c(m) = 2 H(m-1) - 2 (m-1) / m, with c(1) = 0.
inline double average_path_length(std::size_t m) {
  if (m <= 1) return 0.0;
  double harmonic = 0.0;
  for (std::size_t i = 1; i < m; ++i) harmonic += 1.0 / static_cast<double>(i);
  return 2.0 * harmonic - 2.0 * static_cast<double>(m - 1) / static_cast<double>(m);
}

class IsolationTree {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double split = 0.0;
    int left = -1;
    int right = -1;
    int size = 0;
    int depth = 0;
  };

  IsolationTree(const PointMatrix& points, std::span<const std::size_t> sample, int height_limit, Rng& rng) {
    std::vector<std::size_t> idx(sample.begin(), sample.end());
    build(points, idx, 0, height_limit, rng);
  }

  /// Edge count to the leaf plus c(leaf size) for leaves holding several points.
  double path_length(std::span<const double> x) const {
    int n = 0;
    while (nodes_[n].feature >= 0) n = x[nodes_[n].feature] < nodes_[n].split ? nodes_[n].left : nodes_[n].right;
    return nodes_[n].depth + average_path_length(static_cast<std::size_t>(nodes_[n].size));
  }

  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  int height() const {
    int h = 0;
    for (const auto& n : nodes_) h = std::max(h, n.depth);
    return h;
  }

 private:
  int build(const PointMatrix& points, std::vector<std::size_t>& idx, int depth, int limit, Rng& rng) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{-1, 0.0, -1, -1, static_cast<int>(idx.size()), depth});
    if (depth >= limit || idx.size() <= 1) return id;

    std::vector<int> candidates;
    std::vector<std::pair<double, double>> bounds(points.cols);
    for (std::size_t f = 0; f < points.cols; ++f) {
      double lo = points.row(idx[0])[f], hi = lo;
      for (std::size_t i : idx) {
        lo = std::min(lo, points.row(i)[f]);
        hi = std::max(hi, points.row(i)[f]);
      }
      bounds[f] = {lo, hi};
      if (hi > lo) candidates.push_back(static_cast<int>(f));
    }
    if (candidates.empty()) return id;

    const int feature = candidates[rng.index(candidates.size())];
    const auto [lo, hi] = bounds[feature];
    double split = rng.uniform(lo, hi);
    while (!(split > lo)) split = rng.uniform(lo, hi);

    std::vector<std::size_t> left, right;
    for (std::size_t i : idx) (points.row(i)[feature] < split ? left : right).push_back(i);
    nodes_[id].feature = feature;
    nodes_[id].split = split;
    const int l = build(points, left, depth + 1, limit, rng);
    const int r = build(points, right, depth + 1, limit, rng);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  std::vector<Node> nodes_;
};

/// Number of points flagged for a contamination rate, ceil(c * n) in [1, n].
inline std::size_t flagged_count(double contamination, std::size_t n) {
  auto k = static_cast<std::size_t>(std::ceil(contamination * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

/// Threshold such that exactly the top ceil(c * n) scores reach it when there
/// are no ties: the (n - k)-th entry (0-based) of the ascending scores.
inline double contamination_threshold(std::vector<double> scores, double contamination) {
  if (scores.empty()) throw DataError("no scores to threshold");
  const std::size_t k = flagged_count(contamination, scores.size());
  std::sort(scores.begin(), scores.end());
  return scores[scores.size() - k];
}

/// Flags the ceil(c * n) highest scores, earlier entries winning ties.
inline std::vector<Label> top_k_labels(std::span<const double> scores, double contamination) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const std::size_t k = scores.empty() ? 0 : flagged_count(contamination, scores.size());
  std::vector<Label> out(scores.size(), Label::normal);
  for (std::size_t r = 0; r < k; ++r) out[order[r]] = Label::issue;
  return out;
}

class IsolationForest {
 public:
  /// Trees use seeds derived from (cfg.seed, tree index), so a forest of n
  /// trees is a prefix of any larger forest with the same seed.
  static IsolationForest fit(const PointMatrix& points, const ForestConfig& cfg) {
    cfg.validate();
    if (points.rows < 2) throw DataError("isolation forest needs at least 2 points");
    if (points.cols < 1) throw DataError("isolation forest needs at least 1 feature");
    bool varied = false;
    for (std::size_t i = 1; i < points.rows && !varied; ++i)
      for (std::size_t f = 0; f < points.cols; ++f)
        if (points.row(i)[f] != points.row(0)[f]) varied = true;
    if (!varied) throw DataError("all points are identical; no split is possible");

    IsolationForest forest;
    forest.config_ = cfg;
    forest.dims_ = points.cols;
    forest.psi_ = std::min<std::size_t>(static_cast<std::size_t>(cfg.subsample_size), points.rows);
    const int limit = static_cast<int>(std::ceil(std::log2(static_cast<double>(forest.psi_))));
    forest.trees_.reserve(cfg.n_estimators);
    for (int t = 0; t < cfg.n_estimators; ++t) {
      Rng rng(derive_seed(cfg.seed, 0x1f0735, static_cast<std::uint64_t>(t)));
      std::vector<std::size_t> all(points.rows);
      std::iota(all.begin(), all.end(), 0);
      for (std::size_t i = 0; i < forest.psi_; ++i) std::swap(all[i], all[i + rng.index(points.rows - i)]);
      forest.trees_.emplace_back(points, std::span(all.data(), forest.psi_), limit, rng);
    }
    std::vector<double> train_scores(points.rows);
    for (std::size_t i = 0; i < points.rows; ++i) train_scores[i] = forest.score(points.row(i));
    forest.threshold_ = contamination_threshold(std::move(train_scores), cfg.contamination);
    return forest;
  }

  double mean_path_length(std::span<const double> x) const {
    check_dims(x);
    double acc = 0;
    for (const auto& t : trees_) acc += t.path_length(x);
    return acc / static_cast<double>(trees_.size());
  }

  /// s = 2^(-E[h] / c(psi)).
  double score(std::span<const double> x) const {
    return std::exp2(-mean_path_length(x) / average_path_length(psi_));
  }

  std::vector<double> tree_path_lengths(std::span<const double> x) const {
    check_dims(x);
    std::vector<double> out;
    out.reserve(trees_.size());
    for (const auto& t : trees_) out.push_back(t.path_length(x));
    return out;
  }

  Label label(double score) const { return score >= threshold_ ? Label::issue : Label::normal; }

  double threshold() const noexcept { return threshold_; }
  std::size_t subsample_size() const noexcept { return psi_; }
  const std::vector<IsolationTree>& trees() const noexcept { return trees_; }
  const ForestConfig& config() const noexcept { return config_; }

 private:
  void check_dims(std::span<const double> x) const {
    if (x.size() != dims_)
      throw ShapeError("point has " + std::to_string(x.size()) + " features, forest expects " + std::to_string(dims_));
  }

  ForestConfig config_;
  std::size_t dims_ = 0;
  std::size_t psi_ = 0;
  double threshold_ = 1.0;
  std::vector<IsolationTree> trees_;
};

enum class FeatureMode { aggregate, components };

inline PointMatrix detector_features(std::span<const DiscrepancyRecord> records, FeatureMode mode) {
  if (mode == FeatureMode::aggregate) {
    std::vector<double> v;
    v.reserve(records.size());
    for (const auto& r : records) v.push_back(r.aggregate);
    return PointMatrix(records.size(), 1, std::move(v));
  }
  std::vector<double> v;
  v.reserve(records.size() * 3);
  for (const auto& r : records) {
    v.push_back(r.l1);
    v.push_back(r.l2);
    v.push_back(1.0 - r.ssim);
  }
  return PointMatrix(records.size(), 3, std::move(v));
}

struct DetectionResult {
  std::string frame_id;
  double score = 0.5;
  Label label = Label::normal;
};

struct DetectionRun {
  std::vector<DetectionResult> results;
  ForestConfig config;
  FeatureMode features = FeatureMode::aggregate;
  double threshold = 1.0;
  bool short_circuited = false;  // every record identical; nothing flagged

  std::size_t flagged() const {
    return static_cast<std::size_t>(std::count_if(results.begin(), results.end(),
                                                  [](const auto& r) { return r.label == Label::issue; }));
  }
};

/// Fits on `fit_records` and labels each of `records`; output order matches input.
/// When every fit point is identical nothing is flagged.
inline DetectionRun detect(std::span<const DiscrepancyRecord> fit_records, std::span<const DiscrepancyRecord> records,
                           const ForestConfig& cfg, FeatureMode mode = FeatureMode::aggregate) {
  cfg.validate();
  if (records.empty() || fit_records.empty()) throw DataError("detect needs at least one record");
  DetectionRun run;
  run.config = cfg;
  run.features = mode;
  PointMatrix fit_points = detector_features(fit_records, mode);
  const bool identical = std::all_of(fit_points.values.begin(), fit_points.values.end(), [&](double v) {
    return v == fit_points.values[0];
  }) || fit_records.size() < 2;
  if (identical) {
    run.short_circuited = true;
    for (const auto& r : records) run.results.push_back({r.frame_id, 0.5, Label::normal});
    return run;
  }
  auto forest = IsolationForest::fit(fit_points, cfg);
  run.threshold = forest.threshold();
  PointMatrix points = detector_features(records, mode);
  run.results.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    double s = forest.score(points.row(i));
    run.results.push_back({records[i].frame_id, s, forest.label(s)});
  }
  // Scoring the fitted set itself flags exactly ceil(c * n); ties at the
  // threshold go to the earlier record.
  if (records.data() == fit_records.data() && records.size() == fit_records.size()) {
    std::vector<double> scores;
    for (const auto& r : run.results) scores.push_back(r.score);
    auto labels = top_k_labels(scores, cfg.contamination);
    for (std::size_t i = 0; i < labels.size(); ++i) run.results[i].label = labels[i];
  }
  return run;
}

inline DetectionRun detect(std::span<const DiscrepancyRecord> records, const ForestConfig& cfg,
                           FeatureMode mode = FeatureMode::aggregate) {
  return detect(records, records, cfg, mode);
}

struct TuneGrid {
  std::vector<double> contaminations;
  std::vector<int> n_estimators;

  /// 100 evenly spaced contaminations over [0.01, 0.1] and 50..300 trees in steps of 5.
  static TuneGrid paper_grid() {
    TuneGrid g;
    for (int i = 0; i < 100; ++i) g.contaminations.push_back(0.01 + (0.1 - 0.01) * i / 99.0);
    for (int n = 50; n <= 300; n += 5) g.n_estimators.push_back(n);
    return g;
  }
  std::size_t size() const { return contaminations.size() * n_estimators.size(); }
};

struct TuneCell {
  double contamination;
  int n_estimators;
  double f1;
};

struct TuneResult {
  ForestConfig best;
  double best_f1 = 0.0;
  std::vector<TuneCell> table;
};

/// F1 of the issue class (-1).
inline double issue_f1(std::span<const Label> truth, std::span<const Label> pred) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] == Label::issue, p = pred[i] == Label::issue;
    tp += t && p;
    fp += !t && p;
    fn += t && !p;
  }
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / (tp + fp);
  const double recall = static_cast<double>(tp) / (tp + fn);
  return 2 * precision * recall / (precision + recall);
}

/// Grid search maximizing issue-class F1. Ties prefer fewer trees, then lower
/// contamination. One forest of max(n_estimators) trees is grown and its
/// prefixes are evaluated, which is equivalent to refitting per cell.
inline TuneResult tune(std::span<const DiscrepancyRecord> records, std::span<const Label> labels, const TuneGrid& grid,
                       ForestConfig base = {}, FeatureMode mode = FeatureMode::aggregate) {
  if (records.size() != labels.size()) throw DataError("records and labels differ in length");
  if (grid.contaminations.empty() || grid.n_estimators.empty()) throw ConfigError("empty tuning grid");
  const bool has_issue = std::find(labels.begin(), labels.end(), Label::issue) != labels.end();
  const bool has_normal = std::find(labels.begin(), labels.end(), Label::normal) != labels.end();
  if (!has_issue || !has_normal) throw DataError("tuning labels must contain both classes");

  PointMatrix points = detector_features(records, mode);
  ForestConfig full = base;
  full.n_estimators = *std::max_element(grid.n_estimators.begin(), grid.n_estimators.end());
  for (double c : grid.contaminations) {
    ForestConfig probe = base;
    probe.contamination = c;
    probe.validate();
  }
  auto forest = IsolationForest::fit(points, full);

  const std::size_t n = records.size();
  std::vector<std::vector<double>> prefix(n);  // prefix[i][t] = sum of first t path lengths
  for (std::size_t i = 0; i < n; ++i) {
    auto lengths = forest.tree_path_lengths(points.row(i));
    prefix[i].resize(lengths.size() + 1, 0.0);
    for (std::size_t t = 0; t < lengths.size(); ++t) prefix[i][t + 1] = prefix[i][t] + lengths[t];
  }
  const double cpsi = average_path_length(forest.subsample_size());

  TuneResult result;
  bool have_best = false;
  std::vector<Label> pred(n);
  for (int trees : grid.n_estimators) {
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) scores[i] = std::exp2(-(prefix[i][trees] / trees) / cpsi);
    for (double c : grid.contaminations) {
      pred = top_k_labels(scores, c);
      const double f1 = issue_f1(labels, pred);
      result.table.push_back({c, trees, f1});
      const bool better = !have_best || f1 > result.best_f1 ||
                          (f1 == result.best_f1 && (trees < result.best.n_estimators ||
                                                    (trees == result.best.n_estimators && c < result.best.contamination)));
      if (better) {
        have_best = true;
        result.best_f1 = f1;
        result.best = base;
        result.best.n_estimators = trees;
        result.best.contamination = c;
      }
    }
  }
  return result;
}

inline nlohmann::ordered_json forest_config_json(const ForestConfig& cfg) {
  nlohmann::ordered_json j;
  j["n_estimators"] = cfg.n_estimators;
  j["contamination"] = cfg.contamination;
  j["subsample_size"] = cfg.subsample_size;
  j["seed"] = cfg.seed;
  return j;
}

/// CSV `frame_id,score,label` plus a JSON sidecar with config, threshold and seed.
inline void write_detection_report(const std::filesystem::path& path, const DetectionRun& run) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "frame_id,score,label\n";
  for (const auto& r : run.results) out << r.frame_id << ',' << format_real(r.score) << ',' << label_value(r.label) << '\n';
  nlohmann::ordered_json meta;
  meta["config"] = forest_config_json(run.config);
  meta["features"] = run.features == FeatureMode::aggregate ? "aggregate" : "components";
  meta["threshold"] = run.threshold;
  meta["seed"] = run.config.seed;
  meta["records"] = run.results.size();
  meta["flagged"] = run.flagged();
  meta["short_circuited"] = run.short_circuited;
  std::ofstream side(sidecar_path(path), std::ios::binary);
  side << meta.dump(2) << '\n';
}

inline std::vector<DetectionResult> read_detection_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != std::vector<std::string>{"frame_id", "score", "label"})
    throw DataError(path.string() + ":1: expected header frame_id,score,label");
  std::vector<DetectionResult> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    const std::string ctx = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 3) throw DataError(ctx + ": expected 3 fields");
    out.push_back({f[0], parse_real(f[1], ctx), label_from_int(static_cast<int>(parse_real(f[2], ctx)))});
  }
  return out;
}

}  // namespace stereoid
