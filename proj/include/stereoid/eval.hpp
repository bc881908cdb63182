#pragma once

#include <stereoid/core.hpp>
#include <stereoid/dataset.hpp>
#include <stereoid/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace stereoid {

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  bool degenerate = false;  // some ratio had a zero denominator and was reported as 0
};

struct AverageMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct ClassificationReport {
  ClassMetrics issue;   // class -1
  ClassMetrics normal;  // class 1
  double accuracy = 0;
  AverageMetrics macro;
  AverageMetrics weighted;
  std::size_t total = 0;
};

namespace detail {
inline ClassMetrics class_metrics(std::span<const Label> truth, std::span<const Label> pred, Label positive) {
  ClassMetrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] == positive, p = pred[i] == positive;
    m.tp += t && p;
    m.fp += !t && p;
    m.fn += t && !p;
    m.support += t;
  }
  auto ratio = [&](std::size_t num, std::size_t den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  if (m.precision + m.recall > 0) {
    m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.f1 = 0;
    m.degenerate = true;
  }
  return m;
}
}  // namespace detail

/// Per-class precision/recall/F1, accuracy, macro and support-weighted averages.
inline ClassificationReport classification_report(std::span<const Label> truth, std::span<const Label> pred) {
  if (truth.empty()) throw DataError("classification_report needs at least one label");
  if (truth.size() != pred.size()) throw DataError("true and predicted label lists differ in length");
  ClassificationReport r;
  r.total = truth.size();
  r.issue = detail::class_metrics(truth, pred, Label::issue);
  r.normal = detail::class_metrics(truth, pred, Label::normal);
  r.accuracy = static_cast<double>(r.issue.tp + r.normal.tp) / static_cast<double>(r.total);
  r.macro = {(r.issue.precision + r.normal.precision) / 2, (r.issue.recall + r.normal.recall) / 2,
             (r.issue.f1 + r.normal.f1) / 2};
  const double wi = static_cast<double>(r.issue.support) / r.total;
  const double wn = static_cast<double>(r.normal.support) / r.total;
  r.weighted = {wi * r.issue.precision + wn * r.normal.precision, wi * r.issue.recall + wn * r.normal.recall,
                wi * r.issue.f1 + wn * r.normal.f1};
  return r;
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string classification_report_csv(const ClassificationReport& r) {
  std::ostringstream os;
  os << "class,precision,recall,f1,support,tp,fp,fn,degenerate\n";
  auto row = [&](const char* name, const ClassMetrics& m) {
    os << name << ',' << fixed(m.precision, 6) << ',' << fixed(m.recall, 6) << ',' << fixed(m.f1, 6) << ','
       << m.support << ',' << m.tp << ',' << m.fp << ',' << m.fn << ',' << (m.degenerate ? 1 : 0) << '\n';
  };
  row("-1", r.issue);
  row("1", r.normal);
  os << "macro_avg," << fixed(r.macro.precision, 6) << ',' << fixed(r.macro.recall, 6) << ',' << fixed(r.macro.f1, 6)
     << ',' << r.total << ",,,,\n";
  os << "weighted_avg," << fixed(r.weighted.precision, 6) << ',' << fixed(r.weighted.recall, 6) << ','
     << fixed(r.weighted.f1, 6) << ',' << r.total << ",,,,\n";
  os << "accuracy,,," << fixed(r.accuracy, 6) << ',' << r.total << ",,,,\n";
  return os.str();
}

inline std::string classification_report_text(const ClassificationReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%14s %10s %10s %10s %9s\n", "", "precision", "recall", "f1-score", "support");
  os << line;
  auto row = [&](const char* name, double p, double rc, double f, std::size_t s) {
    std::snprintf(line, sizeof line, "%14s %10.2f %10.2f %10.2f %9zu\n", name, 100 * p, 100 * rc, 100 * f, s);
    os << line;
  };
  row("-1", r.issue.precision, r.issue.recall, r.issue.f1, r.issue.support);
  row("1", r.normal.precision, r.normal.recall, r.normal.f1, r.normal.support);
  std::snprintf(line, sizeof line, "%14s %10s %10s %10.2f %9zu\n", "accuracy", "", "", 100 * r.accuracy, r.total);
  os << line;
  row("macro avg", r.macro.precision, r.macro.recall, r.macro.f1, r.total);
  row("weighted avg", r.weighted.precision, r.weighted.recall, r.weighted.f1, r.total);
  if (r.issue.degenerate || r.normal.degenerate) os << "note: zero denominators were reported as 0\n";
  return os.str();
}

struct CategoryOutcome {
  Category category;
  bool detected;
};

struct CategoryRecallRow {
  std::string name;
  std::size_t detected = 0;
  std::size_t undetected = 0;
  std::size_t total = 0;
  std::optional<double> recall;  // nullopt when total is zero

  std::string recall_text() const { return recall ? fixed(100.0 * *recall, 1) : "-"; }
};

struct CategoryRecallTable {
  std::vector<CategoryRecallRow> rows;  // one per category, fixed category order
  CategoryRecallRow totals;
};

inline CategoryRecallTable recall_table_from_counts(const std::map<Category, std::pair<std::size_t, std::size_t>>& counts) {
  CategoryRecallTable t;
  t.totals.name = "Total";
  for (Category c : kAllCategories) {
    CategoryRecallRow row;
    row.name = std::string(category_name(c));
    if (auto it = counts.find(c); it != counts.end()) {
      row.detected = it->second.first;
      row.undetected = it->second.second;
    }
    row.total = row.detected + row.undetected;
    if (row.total > 0) row.recall = static_cast<double>(row.detected) / static_cast<double>(row.total);
    t.totals.detected += row.detected;
    t.totals.undetected += row.undetected;
    t.rows.push_back(row);
  }
  t.totals.total = t.totals.detected + t.totals.undetected;
  if (t.totals.total > 0) t.totals.recall = static_cast<double>(t.totals.detected) / static_cast<double>(t.totals.total);
  return t;
}

/// Detected / undetected / recall per manifestation category plus a totals row.
inline CategoryRecallTable recall_by_category(std::span<const CategoryOutcome> outcomes) {
  std::map<Category, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& o : outcomes) (o.detected ? counts[o.category].first : counts[o.category].second)++;
  return recall_table_from_counts(counts);
}

inline std::string recall_table_csv(const CategoryRecallTable& t) {
  std::ostringstream os;
  os << "category,detected,undetected,total,recall\n";
  for (const auto& r : t.rows)
    os << r.name << ',' << r.detected << ',' << r.undetected << ',' << r.total << ',' << r.recall_text() << '\n';
  os << "Total," << t.totals.detected << ',' << t.totals.undetected << ',' << t.totals.total << ','
     << t.totals.recall_text() << '\n';
  return os.str();
}

/// Number of normals so that issues : total matches issue_part : whole_part,
/// rounded up: ceil(issues * (whole - part) / part).
inline std::size_t realistic_normal_count(std::size_t issues, std::size_t issue_part = 237, std::size_t whole_part = 4000) {
  if (issue_part == 0 || issue_part >= whole_part) throw ConfigError("issue ratio must lie strictly inside (0, 1)");
  const std::size_t num = issues * (whole_part - issue_part);
  return (num + issue_part - 1) / issue_part;
}

/// Mixes every issue entry with a seeded sample of normals at the natural
/// issue ratio, then shuffles. All entries are assigned to the test split.
inline DatasetManifest compose_realistic_testset(std::span<const ManifestEntry> issues,
                                                 std::span<const ManifestEntry> normal_pool, std::uint64_t seed,
                                                 std::size_t issue_part = 237, std::size_t whole_part = 4000) {
  if (issues.empty()) throw DataError("no issue frames; the target ratio is undefined");
  const std::size_t need = realistic_normal_count(issues.size(), issue_part, whole_part);
  if (normal_pool.size() < need)
    throw DataError("normal pool has " + std::to_string(normal_pool.size()) + " entries, " + std::to_string(need) +
                    " required");
  Rng rng(seed);
  std::vector<std::size_t> idx(normal_pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < need; ++i) std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
  DatasetManifest out;
  out.seed = seed;
  out.entries.assign(issues.begin(), issues.end());
  for (std::size_t i = 0; i < need; ++i) out.entries.push_back(normal_pool[idx[i]]);
  rng.shuffle(std::span(out.entries));
  for (auto& e : out.entries) e.split = Split::test;
  out.validate();
  return out;
}

enum class MwuMode { automatic, exact, normal };

struct MannWhitneyResult {
  double u = 0;  // statistic of sample a: rank sum of a minus n(n+1)/2
  double p = 1;  // two-sided
  bool exact = false;
};

namespace detail {

/// Doubled midranks (integers) of the pooled sample, a first then b.
inline std::vector<long long> doubled_midranks(std::span<const double> a, std::span<const double> b,
                                               long long* tie_term) {
  std::vector<std::pair<double, std::size_t>> pooled;
  for (std::size_t i = 0; i < a.size(); ++i) pooled.emplace_back(a[i], i);
  for (std::size_t i = 0; i < b.size(); ++i) pooled.emplace_back(b[i], a.size() + i);
  std::sort(pooled.begin(), pooled.end());
  std::vector<long long> ranks(pooled.size());
  *tie_term = 0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].first == pooled[i].first) ++j;
    const long long t = static_cast<long long>(j - i);
    const long long doubled = static_cast<long long>(i + 1) + static_cast<long long>(j);  // 2 * mean(i+1..j)
    for (std::size_t k = i; k < j; ++k) ranks[pooled[k].second] = doubled;
    *tie_term += t * t * t - t;
    i = j;
  }
  return ranks;
}

inline void enumerate_rank_sums(std::span<const long long> ranks, std::size_t start, std::size_t remaining,
                                long long partial, long long observed_dev, long long target_mid2,
                                std::uint64_t* extreme, std::uint64_t* total) {
  if (remaining == 0) {
    ++*total;
    if (std::llabs(partial - target_mid2) >= observed_dev) ++*extreme;
    return;
  }
  for (std::size_t i = start; i + remaining <= ranks.size(); ++i)
    enumerate_rank_sums(ranks, i + 1, remaining - 1, partial + ranks[i], observed_dev, target_mid2, extreme, total);
}

}  // namespace detail

/// Mann-Whitney U with midranks for ties. Exact two-sided p by enumerating
/// all rank assignments when n*m <= 64 (or when forced), otherwise the normal
/// approximation with tie-corrected variance and continuity correction.
inline MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b,
                                        MwuMode mode = MwuMode::automatic) {
  if (a.empty() || b.empty()) throw DataError("mann_whitney_u needs two nonempty samples");
  const long long n = static_cast<long long>(a.size()), m = static_cast<long long>(b.size()), N = n + m;
  long long tie_term = 0;
  auto ranks = detail::doubled_midranks(a, b, &tie_term);
  long long rank_sum2 = 0;  // doubled
  for (long long i = 0; i < n; ++i) rank_sum2 += ranks[i];

  MannWhitneyResult res;
  const long long u2 = rank_sum2 - n * (n + 1);  // 2U
  res.u = static_cast<double>(u2) / 2.0;
  const bool exact = mode == MwuMode::exact || (mode == MwuMode::automatic && n * m <= 64);
  if (exact) {
    // |2R - n(N+1)| is the doubled deviation of the rank sum from its mean.
    const long long mid2 = n * (N + 1);
    std::uint64_t extreme = 0, total = 0;
    detail::enumerate_rank_sums(ranks, 0, static_cast<std::size_t>(n), 0, std::llabs(rank_sum2 - mid2), mid2,
                                &extreme, &total);
    res.p = static_cast<double>(extreme) / static_cast<double>(total);
    res.exact = true;
    return res;
  }
  const double mu = static_cast<double>(n * m) / 2.0;
  const double var = static_cast<double>(n * m) / 12.0 *
                     (static_cast<double>(N + 1) - static_cast<double>(tie_term) / static_cast<double>(N * (N - 1)));
  if (var <= 0) {
    res.p = 1.0;
    return res;
  }
  const double z = std::max(std::abs(res.u - mu) - 0.5, 0.0) / std::sqrt(var);
  res.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return res;
}

struct MetricSummary {
  std::string metric;
  double avg = 0;
  double std = 0;  // population
};

inline MetricSummary summarize(std::string name, std::span<const double> values) {
  if (values.empty()) throw DataError("cannot summarize an empty metric list");
  double mean = 0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {std::move(name), mean, std::sqrt(var)};
}

/// Average and population standard deviation of each metric.
inline std::vector<MetricSummary> regression_table(std::span<const double> l1, std::span<const double> l2,
                                                   std::span<const double> ssim) {
  return {summarize("L1", l1), summarize("L2", l2), summarize("SSIM", ssim)};
}

inline std::string regression_table_csv(const std::vector<MetricSummary>& rows) {
  std::ostringstream os;
  os << "metric,avg,std\n";
  for (const auto& r : rows) os << r.metric << ',' << fixed(r.avg, 4) << ',' << fixed(r.std, 4) << '\n';
  return os.str();
}

}  // namespace stereoid
