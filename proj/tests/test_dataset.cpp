#include <stereoid/dataset.hpp>
#include <stereoid/image_ops.hpp>

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>

using namespace stereoid;

namespace {

DatasetManifest numbered(std::size_t n) {
  DatasetManifest m;
  for (std::size_t i = 0; i < n; ++i) {
    ManifestEntry e;
    e.frame_id = "f" + std::to_string(i);
    e.sbs_path = "frames/" + e.frame_id + ".png";
    m.entries.push_back(e);
  }
  return m;
}

std::array<std::size_t, 3> sizes(const DatasetManifest& m) {
  return {m.count(Split::train), m.count(Split::val), m.count(Split::test)};
}

}  // namespace

TEST(SplitSbs, HalvesByColumn) {
  // Distinct fill per half so the column-slicing oracle is unambiguous.
  std::vector<float> v(3 * 576 * 1024);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 576; ++y)
      for (int x = 0; x < 1024; ++x) v[(c * 576 + y) * 1024 + x] = x < 512 ? 0.2f : 0.8f;
  auto f = split_sbs(TensorImage(3, 576, 1024, ValueRange::unit, v));
  EXPECT_EQ(f.left.width(), 512);
  EXPECT_EQ(f.left.height(), 576);
  EXPECT_EQ(f.right.width(), 512);
  for (float x : f.left.data()) ASSERT_EQ(x, 0.2f);
  for (float x : f.right.data()) ASSERT_EQ(x, 0.8f);
}

TEST(SplitSbs, TwoByTwo) {
  // Rows: [0 1], [0 1] in every channel.
  std::vector<float> v;
  for (int c = 0; c < 3; ++c) v.insert(v.end(), {0.f, 1.f, 0.f, 1.f});
  auto f = split_sbs(TensorImage(3, 2, 2, ValueRange::unit, v));
  for (float x : f.left.data()) EXPECT_EQ(x, 0.0f);
  for (float x : f.right.data()) EXPECT_EQ(x, 1.0f);
}

TEST(SplitSbs, OddWidthRejected) {
  EXPECT_THROW(split_sbs(TensorImage::filled(3, 2, 3, ValueRange::unit, 0.f)), ShapeError);
}

TEST(SplitSbs, ReconcatenationIsBitExact) {
  Rng rng(21);
  for (int t = 0; t < 10; ++t) {
    auto img = testutil::random_image(rng, 3, 1 + static_cast<int>(rng.index(10)), 2 * (1 + static_cast<int>(rng.index(10))));
    auto f = split_sbs(img);
    EXPECT_EQ(hconcat(f.left, f.right), img);
  }
}

TEST(Preprocess, TrainModeYieldsSquareCrop) {
  Rng rng(22);
  for (auto [w, h] : {std::pair{640, 360}, std::pair{512, 512}, std::pair{300, 700}}) {
    StereoFrame f(testutil::random_image(rng, 3, h, w), testutil::random_image(rng, 3, h, w), "x");
    auto out = preprocess(f, PreprocessMode::train, {}, 5);
    EXPECT_EQ(out.left.width(), 512);
    EXPECT_EQ(out.left.height(), 512);
    EXPECT_EQ(out.right.width(), 512);
    EXPECT_EQ(out.right.height(), 512);
  }
}

TEST(Preprocess, EvalOnAlreadyCroppedFrameIsIdentity) {
  Rng rng(23);
  StereoFrame f(testutil::random_image(rng, 3, 512, 512), testutil::random_image(rng, 3, 512, 512), "x");
  auto out = preprocess(f, PreprocessMode::eval, {}, 0);
  EXPECT_EQ(out.left, f.left);
  EXPECT_EQ(out.right, f.right);
}

TEST(Preprocess, SameSeedSameWindow) {
  Rng rng(24);
  StereoFrame f(testutil::random_image(rng, 3, 576, 512), testutil::random_image(rng, 3, 576, 512), "x");
  auto a = preprocess(f, PreprocessMode::train, {}, 99);
  auto b = preprocess(f, PreprocessMode::train, {}, 99);
  EXPECT_EQ(a.left, b.left);
  EXPECT_EQ(a.right, b.right);
}

TEST(Preprocess, WindowSharedAcrossEyes) {
  // Plant one marker at the same coordinates in both eyes; after cropping
  // it must land at the same place in both, or be cropped from both.
  const int w = 32, h = 48;
  PreprocessConfig cfg{w, h, 24};
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const int mx = static_cast<int>(rng.index(w)), my = static_cast<int>(rng.index(h));
    std::vector<float> l(3 * w * h, 0.0f), r(3 * w * h, 0.5f);
    l[my * w + mx] = 1.0f;
    r[my * w + mx] = 1.0f;
    StereoFrame f(TensorImage(3, h, w, ValueRange::unit, l), TensorImage(3, h, w, ValueRange::unit, r), "m");
    auto out = preprocess(f, PreprocessMode::train, cfg, seed);
    auto lp = out.left.plane(0), rp = out.right.plane(0);
    for (std::size_t i = 0; i < lp.size(); ++i) ASSERT_EQ(lp[i] == 1.0f, rp[i] == 1.0f) << "seed " << seed;
  }
}

TEST(Partition, PaperCorpusSizes) {
  auto m = partition(numbered(171740), kDefaultRatios, 3);
  EXPECT_EQ(sizes(m), (std::array<std::size_t, 3>{154566, 8587, 8587}));
}

TEST(Partition, SmallCounts) {
  EXPECT_EQ(sizes(partition(numbered(20), kDefaultRatios, 1)), (std::array<std::size_t, 3>{18, 1, 1}));
  EXPECT_EQ(sizes(partition(numbered(1), kDefaultRatios, 1)), (std::array<std::size_t, 3>{1, 0, 0}));
  EXPECT_THROW(partition(numbered(0), kDefaultRatios, 1), DataError);
  EXPECT_THROW(partition(numbered(5), {0.5, 0.5, 0.5}, 1), ConfigError);
}

TEST(Partition, DeterministicDisjointAndCovering) {
  auto m = numbered(97);
  auto a = partition(m, {0.7, 0.2, 0.1}, 8), b = partition(m, {0.7, 0.2, 0.1}, 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, partition(m, {0.7, 0.2, 0.1}, 9));
  // Each entry carries exactly one split, so the three sets are disjoint; the
  // sizes must add back up to the input.
  auto s = sizes(a);
  EXPECT_EQ(s[0] + s[1] + s[2], 97u);
  EXPECT_EQ(a.entries.size(), 97u);
}

TEST(Subsample, Counts) {
  auto m = partition(numbered(200), kDefaultRatios, 4);
  auto train_ids = [](const DatasetManifest& x) {
    std::set<std::string> s;
    for (auto& e : x.of_split(Split::train)) s.insert(e.frame_id);
    return s;
  };
  auto sub = subsample_training(m, 50, 1);
  EXPECT_EQ(sub.count(Split::train), 50u);
  EXPECT_EQ(sub.count(Split::val), m.count(Split::val));
  EXPECT_EQ(sub.count(Split::test), m.count(Split::test));
  EXPECT_EQ(train_ids(subsample_training(m, m.count(Split::train), 1)), train_ids(m));
  EXPECT_EQ(subsample_training(m, 0, 1).count(Split::train), 0u);
  EXPECT_THROW(subsample_training(m, m.count(Split::train) + 1, 1), DataError);
}

TEST(Subsample, PaperSize) {
  auto m = partition(numbered(171740), kDefaultRatios, 3);
  EXPECT_EQ(subsample_training(m, 20000, 1).count(Split::train), 20000u);
}

TEST(Manifest, RoundTrip) {
  auto dir = testutil::scratch_dir("manifest");
  auto m = partition(numbered(30), kDefaultRatios, 2);
  m.entries[3].label = Label::issue;
  m.entries[3].category = Category::ObjectOmission;
  m.entries[4].label = Label::normal;
  m.entries[5].sbs_path.reset();
  m.entries[5].left_path = "l.png";
  m.entries[5].right_path = "r.png";
  write_manifest(m, dir / "m.jsonl");
  EXPECT_EQ(read_manifest(dir / "m.jsonl"), m);
}

TEST(Manifest, EmptyIsValid) {
  auto dir = testutil::scratch_dir("manifest_empty");
  DatasetManifest m;
  write_manifest(m, dir / "m.jsonl");
  EXPECT_TRUE(read_manifest(dir / "m.jsonl").entries.empty());
}

TEST(Manifest, DuplicateIdRejected) {
  auto dir = testutil::scratch_dir("manifest_dup");
  std::ofstream(dir / "m.jsonl") << R"({"frame_id":"a","sbs_path":"a.png","label":null,"category":null,"split":"train"})"
                                 << "\n"
                                 << R"({"frame_id":"a","sbs_path":"b.png","label":null,"category":null,"split":"val"})"
                                 << "\n";
  EXPECT_THROW(read_manifest(dir / "m.jsonl"), DataError);
}

TEST(Manifest, MalformedLineNamesLine) {
  auto dir = testutil::scratch_dir("manifest_bad");
  std::ofstream(dir / "m.jsonl") << R"({"frame_id":"a","sbs_path":"a.png","label":null,"category":null,"split":"train"})"
                                 << "\n"
                                 << R"({"frame_id":"b","sbs_path":"b.png","label":7,"category":null,"split":"train"})"
                                 << "\n";
  try {
    read_manifest(dir / "m.jsonl");
    FAIL() << "expected a parse error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("m.jsonl:2:"), std::string::npos) << e.what();
  }
}
