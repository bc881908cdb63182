#include <stereoid/detector.hpp>

#include "test_util.hpp"
#include "trials.hpp"

#include <gtest/gtest.h>

#include <functional>

using namespace stereoid;

namespace {

std::vector<DiscrepancyRecord> records_from(const std::vector<double>& xs) {
  std::vector<DiscrepancyRecord> r(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    r[i].frame_id = "r" + std::to_string(i);
    r[i].aggregate = xs[i];
  }
  return r;
}

/// Walks a tree's node table directly, independent of IsolationTree::path_length.
double walk(const IsolationTree& tree, double x) {
  const auto& nodes = tree.nodes();
  std::function<double(int, int)> go = [&](int id, int depth) -> double {
    const auto& n = nodes[id];
    if (n.feature < 0) {
      double c = 0;
      if (n.size > 1) {
        double h = 0;
        for (int i = 1; i < n.size; ++i) h += 1.0 / i;
        c = 2 * h - 2.0 * (n.size - 1) / n.size;
      }
      return depth + c;
    }
    return go(x < n.split ? n.left : n.right, depth + 1);
  };
  return go(0, 0);
}

}  // namespace

TEST(AveragePathLength, KnownValues) {
  EXPECT_EQ(average_path_length(1), 0.0);
  EXPECT_DOUBLE_EQ(average_path_length(2), 1.0);  // 2*H(1) - 2*1/2
  EXPECT_DOUBLE_EQ(average_path_length(3), 2 * 1.5 - 4.0 / 3);
}

TEST(Forest, PlantedOutliersFlagged) {
  auto t = trials::planted_outlier_trial(0);
  EXPECT_TRUE(t.all_planted_flagged);
  EXPECT_GE(t.agreement, 0.99);
}

TEST(Forest, ThresholdIsOrderStatistic) {
  // 4000 scores at contamination 0.058: order statistic 3768 counted from zero,
  // so exactly 232 scores reach it.
  Rng rng(51);
  std::vector<double> s(4000);
  for (double& v : s) v = rng.uniform();
  auto sorted = s;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(contamination_threshold(s, 0.058), sorted[3768]);
  EXPECT_EQ(std::count_if(s.begin(), s.end(), [&](double v) { return v >= sorted[3768]; }), 232);
  EXPECT_EQ(flagged_count(0.058, 4000), 232u);
}

TEST(Forest, TwoPoints) {
  auto f = IsolationForest::fit(PointMatrix::column(std::vector<double>{0.0, 1.0}), {});
  for (const auto& t : f.trees()) EXPECT_EQ(t.height(), 1);
  const double s = f.score(std::vector<double>{0.0});
  EXPECT_GT(s, 0.0);
  EXPECT_LT(s, 1.0);
}

TEST(Forest, ScoreHalfWhenPathEqualsNormalizer) {
  // E[h] = c(psi) gives 2^-1; check the formula on the fitted forest.
  Rng rng(52);
  std::vector<double> xs(300);
  for (double& x : xs) x = rng.normal();
  auto f = IsolationForest::fit(PointMatrix::column(xs), {});
  std::vector<double> p{0.3};
  EXPECT_DOUBLE_EQ(f.score(p), std::exp2(-f.mean_path_length(p) / average_path_length(256)));
  EXPECT_DOUBLE_EQ(std::exp2(-average_path_length(256) / average_path_length(256)), 0.5);
}

TEST(Forest, TreeWalkOracleOnThreeTrees) {
  Rng rng(53);
  std::vector<double> xs;
  for (int i = 0; i < 200; ++i) xs.push_back(rng.normal());
  for (int i = 0; i < 5; ++i) xs.push_back(10.0);
  ForestConfig cfg;
  cfg.n_estimators = 3;
  cfg.seed = 7;
  auto f = IsolationForest::fit(PointMatrix::column(xs), cfg);
  auto oracle_score = [&](double x) {
    double h = 0;
    for (const auto& t : f.trees()) h += walk(t, x);
    return std::exp2(-(h / 3) / average_path_length(f.subsample_size()));
  };
  for (double x : {-3.0, 0.0, 0.5, 10.0}) EXPECT_DOUBLE_EQ(f.score(std::vector<double>{x}), oracle_score(x));
  EXPECT_GT(oracle_score(10.0), oracle_score(0.0));
}

TEST(Forest, HeightCapAndScoreRange) {
  Rng rng(54);
  std::vector<double> xs(1000);
  for (double& x : xs) x = rng.uniform(-1, 1);
  ForestConfig cfg;
  cfg.n_estimators = 20;
  auto f = IsolationForest::fit(PointMatrix::column(xs), cfg);
  for (const auto& t : f.trees()) EXPECT_LE(t.height(), 8);
  for (double x : xs) {
    const double s = f.score(std::vector<double>{x});
    ASSERT_GT(s, 0.0);
    ASSERT_LT(s, 1.0);
  }
}

TEST(Forest, IdenticalPointsRejected) {
  EXPECT_THROW(IsolationForest::fit(PointMatrix::column(std::vector<double>(10, 2.0)), {}), DataError);
  EXPECT_THROW(IsolationForest::fit(PointMatrix::column(std::vector<double>{1.0}), {}), DataError);
}

TEST(Forest, DeterministicAndPrefixStable) {
  Rng rng(55);
  std::vector<double> xs(400);
  for (double& x : xs) x = rng.normal();
  ForestConfig cfg;
  cfg.seed = 3;
  auto a = IsolationForest::fit(PointMatrix::column(xs), cfg), b = IsolationForest::fit(PointMatrix::column(xs), cfg);
  for (double x : {0.1, 2.0, -4.0}) EXPECT_EQ(a.score(std::vector<double>{x}), b.score(std::vector<double>{x}));
  cfg.n_estimators = 50;
  auto small = IsolationForest::fit(PointMatrix::column(xs), cfg);
  auto full = a.tree_path_lengths(std::vector<double>{0.7});
  auto part = small.tree_path_lengths(std::vector<double>{0.7});
  EXPECT_TRUE(std::equal(part.begin(), part.end(), full.begin()));
}

TEST(Forest, AntiMonotoneInPathLength) {
  Rng rng(56);
  std::vector<double> xs(300);
  for (double& x : xs) x = rng.normal();
  auto f = IsolationForest::fit(PointMatrix::column(xs), {});
  std::vector<std::pair<double, double>> hs;
  for (double x = -5; x <= 5; x += 0.25) {
    std::vector<double> p{x};
    hs.emplace_back(f.mean_path_length(p), f.score(p));
  }
  for (auto& a : hs)
    for (auto& b : hs)
      if (a.first < b.first) EXPECT_GT(a.second, b.second);
}

TEST(Detect, IdenticalAggregatesShortCircuit) {
  auto run = detect(records_from(std::vector<double>(50, 0.3)), {});
  EXPECT_TRUE(run.short_circuited);
  EXPECT_EQ(run.flagged(), 0u);
}

TEST(Detect, FlagCountOnTrainingSet) {
  Rng rng(57);
  std::vector<double> xs(4000);
  for (double& x : xs) x = rng.normal();
  auto run = detect(records_from(xs), {});
  EXPECT_EQ(run.flagged(), 232u);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_EQ(run.results[i].frame_id, "r" + std::to_string(i));
    EXPECT_EQ(run.results[i].label == Label::issue, run.results[i].score >= run.threshold);
  }
}

TEST(Detect, FlagCountWithinOneForSmallSets) {
  Rng rng(58);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> xs(20 + rng.index(300));
    for (double& x : xs) x = rng.uniform();
    const double c = rng.uniform(0.01, 0.5);
    auto run = detect(records_from(xs), {.contamination = c});
    const auto k = static_cast<long>(std::ceil(c * xs.size() - 1e-9));
    EXPECT_LE(std::abs(static_cast<long>(run.flagged()) - k), 1);
  }
}

TEST(Detect, ComponentsModeUsesThreeFeatures) {
  std::vector<DiscrepancyRecord> recs(30);
  Rng rng(59);
  for (auto& r : recs) {
    r.l1 = rng.uniform();
    r.l2 = rng.uniform();
    r.ssim = rng.uniform();
  }
  auto m = detector_features(recs, FeatureMode::components);
  EXPECT_EQ(m.cols, 3u);
  EXPECT_DOUBLE_EQ(m.row(4)[2], 1 - recs[4].ssim);
  EXPECT_NO_THROW(detect(recs, {}, FeatureMode::components));
}

TEST(Tune, PaperGridSize) {
  auto g = TuneGrid::paper_grid();
  EXPECT_EQ(g.contaminations.size(), 100u);
  EXPECT_EQ(g.n_estimators.size(), 51u);
  EXPECT_EQ(g.size(), 5100u);
  EXPECT_NEAR(g.contaminations.front(), 0.01, 1e-12);
  EXPECT_NEAR(g.contaminations.back(), 0.1, 1e-12);
}

TEST(Tune, SingleCellAndSingleClass) {
  Rng rng(60);
  std::vector<double> xs(100);
  for (double& x : xs) x = rng.normal();
  xs[0] = 9;
  std::vector<Label> labels(100, Label::normal);
  labels[0] = Label::issue;
  TuneGrid g{{0.058}, {110}};
  auto r = tune(records_from(xs), labels, g);
  EXPECT_EQ(r.best.contamination, 0.058);
  EXPECT_EQ(r.best.n_estimators, 110);
  EXPECT_EQ(r.table.size(), 1u);
  std::vector<Label> one(100, Label::normal);
  EXPECT_THROW(tune(records_from(xs), one, g), DataError);
}

TEST(Tune, TableMatchesDirectDetection) {
  Rng rng(61);
  std::vector<double> xs(300);
  std::vector<Label> labels(300, Label::normal);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const bool bad = i % 17 == 0;
    xs[i] = bad ? rng.uniform(2, 4) : rng.normal() * 0.5;
    if (bad) labels[i] = Label::issue;
  }
  TuneGrid g{{0.03, 0.058, 0.08}, {50, 60}};
  auto r = tune(records_from(xs), labels, g);
  ASSERT_EQ(r.table.size(), 6u);
  for (const auto& cell : r.table) {
    ForestConfig cfg;
    cfg.contamination = cell.contamination;
    cfg.n_estimators = cell.n_estimators;
    auto run = detect(records_from(xs), cfg);
    std::vector<Label> pred;
    for (auto& d : run.results) pred.push_back(d.label);
    EXPECT_NEAR(issue_f1(labels, pred), cell.f1, 1e-12);
    EXPECT_LE(cell.f1, r.best_f1);
  }
}

TEST(DetectionReport, RoundTrip) {
  auto dir = testutil::scratch_dir("det");
  Rng rng(62);
  std::vector<double> xs(40);
  for (double& x : xs) x = rng.normal();
  auto run = detect(records_from(xs), {});
  write_detection_report(dir / "d.csv", run);
  auto back = read_detection_report(dir / "d.csv");
  ASSERT_EQ(back.size(), run.results.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].score, run.results[i].score);
    EXPECT_EQ(back[i].label, run.results[i].label);
  }
}

TEST(TopK, TiesGoToEarlierEntries) {
  const std::vector<double> scores = {0.5, 0.9, 0.7, 0.7, 0.7, 0.1};
  auto labels = top_k_labels(scores, 0.5);  // k = 3
  const std::vector<Label> want = {Label::normal, Label::issue, Label::issue, Label::issue, Label::normal, Label::normal};
  EXPECT_EQ(labels, want);
}

TEST(Detect, DuplicatedRecordsStillFlagExactCount) {
  // Repeated values tie in score; self-scoring still flags exactly ceil(c * n).
  std::vector<DiscrepancyRecord> recs;
  for (int i = 0; i < 400; ++i) {
    DiscrepancyRecord r;
    r.frame_id = "d" + std::to_string(i);
    r.aggregate = (i % 40) * 0.1;
    recs.push_back(r);
  }
  ForestConfig cfg;
  cfg.contamination = 0.058;
  auto run = detect(recs, cfg);
  EXPECT_EQ(run.flagged(), 24u);
}
