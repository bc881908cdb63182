// Drives the stereoid executable through the shell and checks its files and exit codes.

#include <stereoid/dataset.hpp>
#include <stereoid/detector.hpp>
#include <stereoid/distance.hpp>
#include <stereoid/image_ops.hpp>
#include <stereoid/png_io.hpp>

#include "test_util.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <fstream>
#include <sstream>

using namespace stereoid;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Result run(const fs::path& cwd, const std::string& args, const std::string& env = "") {
  const auto out = cwd / ".stdout", err = cwd / ".stderr";
  const std::string cmd = "cd '" + cwd.string() + "' && " + env + " '" STEREOID_CLI "' " + args + " > '" + out.string() +
                          "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string out_dir(const std::string& args) {
  const auto at = args.find("--out ") + 6;
  return args.substr(at, args.find(' ', at) - at);
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

void expect_error(const Result& r, int code, const std::string& kind) {
  EXPECT_EQ(r.code, code) << r.err;
  EXPECT_EQ(count_lines(r.err), 1u) << r.err;
  EXPECT_EQ(r.err.rfind("stereoid: error kind=" + kind + " code=" + std::to_string(code) + " ", 0), 0u) << r.err;
}

std::vector<DiscrepancyRecord> random_records(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DiscrepancyRecord> recs;
  for (std::size_t i = 0; i < n; ++i) {
    DiscrepancyRecord r;
    r.frame_id = "r" + std::to_string(i);
    r.l1 = rng.uniform();
    r.l2 = rng.uniform();
    r.ssim = rng.uniform();
    r.aggregate = r.l1 + r.l2 + 1 - r.ssim;
    recs.push_back(r);
  }
  return recs;
}

}  // namespace

TEST(Cli, UsageErrorsAreConfigErrors) {
  auto dir = testutil::scratch_dir("cli_usage");
  expect_error(run(dir, ""), 2, "config");
  expect_error(run(dir, "detect --out x"), 2, "config");
  expect_error(run(dir, "detect --discrepancy a.csv --out x --bogus 1"), 2, "config");
  expect_error(run(dir, "score --translations t.jsonl --out x --reduction median"), 2, "config");
  EXPECT_EQ(run(dir, "--help").code, 0);
  EXPECT_EQ(run(dir, "--version").code, 0);
}

TEST(Cli, DetectFlags232Of4000) {
  auto dir = testutil::scratch_dir("cli_detect");
  write_discrepancy_csv(dir / "d.csv", random_records(4000, 1), {});
  auto r = run(dir, "detect --discrepancy d.csv --out det --contamination 0.058 --n-estimators 110");
  ASSERT_EQ(r.code, 0) << r.err;
  auto det = read_detection_report(dir / "det" / "detection.csv");
  ASSERT_EQ(det.size(), 4000u);
  EXPECT_EQ(std::count_if(det.begin(), det.end(), [](const auto& d) { return d.label == Label::issue; }), 232);
  auto meta = nlohmann::json::parse(slurp(dir / "det" / "detection.json"));
  EXPECT_EQ(meta["flagged"], 232);
  EXPECT_EQ(meta["config"]["n_estimators"], 110);
}

TEST(Cli, ValidationHappensBeforeWork) {
  auto dir = testutil::scratch_dir("cli_validate");
  write_discrepancy_csv(dir / "d.csv", random_records(50, 2), {});
  expect_error(run(dir, "detect --discrepancy d.csv --out det --contamination 0.9"), 2, "config");
  EXPECT_FALSE(fs::exists(dir / "det" / "detection.csv"));
  expect_error(run(dir, "detect --discrepancy missing.csv --out det"), 3, "data");
  {
    std::ofstream bad(dir / "bad.csv");
    bad << "frame_id,l1,l2,ssim,aggregate\nx,1,2\n";
  }
  auto r = run(dir, "detect --discrepancy bad.csv --out det");
  expect_error(r, 3, "data");
  EXPECT_NE(r.err.find("bad.csv:2"), std::string::npos) << r.err;
  expect_error(run(dir, "synth --out c --ratios 0.5,0.5,0.5"), 2, "config");
  expect_error(run(dir, "synth --out c --mix Nonsense=3"), 2, "config");
}

TEST(Cli, ConfigFileWithFlagOverrides) {
  auto dir = testutil::scratch_dir("cli_config");
  write_discrepancy_csv(dir / "d.csv", random_records(1000, 3), {});
  {
    std::ofstream cfg(dir / "run.toml");
    cfg << "[detect]\ncontamination = 0.1\nn-estimators = 50\n";
  }
  ASSERT_EQ(run(dir, "--config run.toml detect --discrepancy d.csv --out a").code, 0);
  ASSERT_EQ(run(dir, "--config run.toml detect --discrepancy d.csv --out b --contamination 0.02").code, 0);
  auto a = nlohmann::json::parse(slurp(dir / "a" / "detection.json"));
  auto b = nlohmann::json::parse(slurp(dir / "b" / "detection.json"));
  EXPECT_EQ(a["flagged"], 100);
  EXPECT_EQ(a["config"]["n_estimators"], 50);
  EXPECT_EQ(b["flagged"], 20);
  EXPECT_EQ(b["config"]["n_estimators"], 50);
  auto rec = nlohmann::json::parse(slurp(dir / "b" / "run.json"));
  EXPECT_EQ(rec["options"]["contamination"], "0.02");
  EXPECT_EQ(rec["options"]["n-estimators"], "50");
  expect_error(run(dir, "--config missing.toml detect --discrepancy d.csv --out c"), 2, "config");
}

TEST(Cli, GoldenPipelineRerunsByteIdentical) {
  auto dir = testutil::scratch_dir("cli_golden");
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"synth", "synth --out corpus --n-normal 120 --mix MonocularBlindness=6,ObjectOmission=4 --seed 3"},
      {"translate", "translate --manifest corpus/manifest.jsonl --translator identity --out trans"},
      {"score", "score --translations trans/translations.jsonl --out score"},
      {"detect", "detect --discrepancy score/discrepancy.csv --out detect --seed 5"},
      {"evaluate", "evaluate --detection detect/detection.csv --manifest corpus/manifest.jsonl "
                   "--discrepancy score/discrepancy.csv --out eval"},
      {"tune", "tune --discrepancy score/discrepancy.csv --manifest corpus/manifest.jsonl --out tune "
               "--contaminations 0.02:0.1:5 --trees 50:100:50"},
      {"report", "report --run . --manifest corpus/manifest.jsonl --out report"}};
  for (const auto& [name, args] : steps) {
    auto r = run(dir, args);
    ASSERT_EQ(r.code, 0) << name << ": " << r.err;
    EXPECT_TRUE(fs::exists(dir / out_dir(args) / "run.json")) << name;
  }
  for (const char* f : {"eval/classification_report.csv", "eval/classification_report.txt", "eval/recall_by_category.csv",
                        "eval/regression.csv", "eval/significance.csv", "tune/tune.csv", "tune/best.json",
                        "tune/heatmap.svg", "report/report.md", "report/report.html"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_NE(slurp(dir / "report/report.html").find("<svg"), std::string::npos);

  // Replaying each recorded step into a second tree reproduces every CSV.
  const std::vector<std::pair<std::string, std::string>> replays = {
      {"corpus", "corpus2"}, {"trans", "trans2"}, {"score", "score2"}, {"detect", "detect2"}, {"eval", "eval2"}};
  for (const auto& [from, to] : replays) {
    auto r = run(dir, "rerun " + from + "/run.json --out " + to);
    ASSERT_EQ(r.code, 0) << from << ": " << r.err;
  }
  for (const char* f : {"manifest.jsonl", "scenes.jsonl"}) EXPECT_EQ(slurp(dir / "corpus" / f), slurp(dir / "corpus2" / f)) << f;
  EXPECT_EQ(slurp(dir / "trans/translations.jsonl"), slurp(dir / "trans2/translations.jsonl"));
  EXPECT_EQ(slurp(dir / "score/discrepancy.csv"), slurp(dir / "score2/discrepancy.csv"));
  EXPECT_EQ(slurp(dir / "detect/detection.csv"), slurp(dir / "detect2/detection.csv"));
  for (const char* f : {"classification_report.csv", "recall_by_category.csv", "regression.csv", "significance.csv"})
    EXPECT_EQ(slurp(dir / "eval" / f), slurp(dir / "eval2" / f)) << f;
  expect_error(run(dir, "rerun nowhere/run.json"), 3, "data");
}

TEST(Cli, ParallelWorkersMatchSerial) {
  auto dir = testutil::scratch_dir("cli_workers");
  ASSERT_EQ(run(dir, "synth --out a --n-normal 40 --mix MonocularBlindness=3 --seed 9 --workers 1").code, 0);
  ASSERT_EQ(run(dir, "synth --out b --n-normal 40 --mix MonocularBlindness=3 --seed 9 --workers 3").code, 0);
  EXPECT_EQ(slurp(dir / "a/manifest.jsonl"), slurp(dir / "b/manifest.jsonl"));
  ASSERT_EQ(run(dir, "translate --manifest a/manifest.jsonl --translator reference --out t").code, 0);
  ASSERT_EQ(run(dir, "score --translations t/translations.jsonl --out s1").code, 0);
  ASSERT_EQ(run(dir, "score --translations t/translations.jsonl --out s3 --workers 3").code, 0);
  EXPECT_EQ(slurp(dir / "s1/discrepancy.csv"), slurp(dir / "s3/discrepancy.csv"));
}

TEST(Cli, TrainZeroStepsWritesInitialCheckpoint) {
  auto dir = testutil::scratch_dir("cli_train0");
  ASSERT_EQ(run(dir, "synth --out c --n-normal 30 --mix none --seed 2").code, 0);
  fs::create_directories(dir / "empty_cache");
  // STEREOID_CACHE without the frames falls through to the corpus depth maps.
  auto r = run(dir,
               "train --manifest c/manifest.jsonl --out m --max-steps 0 --ngf 4 --ndf 4 --depth-levels 2 --batch-size 2",
               "STEREOID_CACHE='" + (dir / "empty_cache").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"last.ckpt", "best.ckpt", "validation.csv", "training_log.jsonl", "train_summary.json"})
    EXPECT_TRUE(fs::exists(dir / "m" / f)) << f;
  auto s = nlohmann::json::parse(slurp(dir / "m/train_summary.json"));
  EXPECT_EQ(s["steps"], 0);
  EXPECT_EQ(slurp(dir / "m/training_log.jsonl"), "");
  expect_error(run(dir, "train --manifest c/manifest.jsonl --out m2 --ngf 0"), 2, "config");
  expect_error(run(dir, "translate --manifest c/manifest.jsonl --out t"), 2, "config");  // painter without checkpoint
  auto t = run(dir, "translate --manifest c/manifest.jsonl --out t --checkpoint m/last.ckpt --split test");
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(dir / "t/translations.jsonl"));
}

TEST(Cli, IngestBuildsManifest) {
  auto dir = testutil::scratch_dir("cli_ingest");
  fs::create_directories(dir / "shots");
  Rng rng(4);
  for (int i = 0; i < 6; ++i) {
    auto l = testutil::random_image(rng, 3, 8, 8), r = testutil::random_image(rng, 3, 8, 8);
    if (i % 2) {
      write_png_rgb(dir / "shots" / ("p" + std::to_string(i) + "_L.png"), l);
      write_png_rgb(dir / "shots" / ("p" + std::to_string(i) + "_R.png"), r);
    } else {
      write_png_rgb(dir / "shots" / ("s" + std::to_string(i) + ".png"), hconcat(l, r));
    }
  }
  {
    std::ofstream labels(dir / "labels.csv");
    labels << "frame_id,label,category\ns0,-1,ShaderAbsence\np1,1,\n";
  }
  auto r = run(dir, "ingest --input shots --out ds --labels labels.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  auto m = read_manifest(dir / "ds/manifest.jsonl");
  ASSERT_EQ(m.entries.size(), 6u);
  ASSERT_NE(m.find("s0"), nullptr);
  EXPECT_EQ(m.find("s0")->label, Label::issue);
  EXPECT_EQ(m.find("s0")->category, Category::ShaderAbsence);
  EXPECT_EQ(m.find("p1")->label, Label::normal);
  EXPECT_TRUE(m.find("p1")->left_path.has_value());
  EXPECT_FALSE(m.find("p3")->label.has_value());
  EXPECT_EQ(load_frame(*m.find("p3"), dir / "ds").left.width(), 8);

  write_png_rgb(dir / "shots" / "p9_L.png", testutil::random_image(rng, 3, 8, 8));
  auto missing = run(dir, "ingest --input shots --out ds2");
  expect_error(missing, 3, "data");
  EXPECT_NE(missing.err.find("p9"), std::string::npos);
}
