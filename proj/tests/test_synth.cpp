#include <stereoid/distance.hpp>
#include <stereoid/synth.hpp>

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace stereoid;

namespace {

SceneSpec single(double z, Shape shape = Shape::rectangle) {
  SceneSpec s;
  s.objects.push_back({shape, {0.9f, 0.8f, 0.1f}, 32, 32, 12, 12, z});
  return s;
}

/// Column centroid of pixels that differ from the background in one eye.
double object_center_x(const TensorImage& eye, const SceneSpec& spec) {
  double sx = 0;
  int n = 0;
  for (int y = 0; y < eye.height(); ++y) {
    const Rgb bg = synth_detail::background_at(spec, y);
    for (int x = 0; x < eye.width(); ++x)
      if (eye.at(0, y, x) != bg.r) {
        sx += x + 0.5;
        ++n;
      }
  }
  return sx / n;
}

double clean_discrepancy(const RenderedScene& r, const TensorImage& right, const StereoCamera& cam) {
  auto ref = reference_right_view(r.frame.left, r.metric_left, r.metric_right, cam);
  return measure("x", ref, right).aggregate;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(RenderScene, UnitDisparityShiftsOnePixel) {
  auto spec = single(32.0 / 1.0 * 0.999);  // f*b = 32, so d rounds to 1
  spec.z_background = 64;
  ASSERT_EQ(spec.disparity(spec.objects[0].z), 1);
  auto r = render_scene(spec);
  EXPECT_DOUBLE_EQ(object_center_x(r.frame.left, spec) - object_center_x(r.frame.right, spec), 1.0);
  for (Shape sh : {Shape::ellipse, Shape::triangle}) {
    auto s2 = single(8, sh);
    auto r2 = render_scene(s2);
    EXPECT_DOUBLE_EQ(object_center_x(r2.frame.left, s2) - object_center_x(r2.frame.right, s2), 4.0);
  }
}

TEST(RenderScene, NearerObjectsHaveLargerDisparity) {
  SceneSpec s;
  for (double z1 = 3; z1 < 30; z1 += 1.5)
    for (double z2 = z1 + 0.5; z2 < 32; z2 += 2.5) EXPECT_GT(s.disparity_exact(z1), s.disparity_exact(z2));
}

TEST(RenderScene, EmptySceneEyesIdentical) {
  SceneSpec s;
  auto r = render_scene(s);
  EXPECT_EQ(r.frame.left, r.frame.right);
  EXPECT_EQ(r.frame.label, Label::normal);
}

TEST(RenderScene, InvariantViolationsRejected) {
  EXPECT_THROW(render_scene(single(40)), ConfigError);  // behind the background
  EXPECT_THROW(render_scene(single(2)), ConfigError);   // d = 16 = width / 4
  EXPECT_NO_THROW(render_scene(single(2.1)));
}

TEST(RenderScene, WarpReproducesRightEyeOutsideOcclusions) {
  // Pixels whose left-eye source is hidden behind a nearer surface or falls off
  // the canvas are occluded; every other warped pixel must reproduce the right eye.
  SceneSampler sampler;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto spec = sampler.sample(seed);
    auto r = render_scene(spec);
    const int w = spec.width;
    const std::size_t plane = r.frame.left.plane_size();
    std::size_t occluded = 0, mismatched = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const int x = static_cast<int>(i % w);
      const float z = r.metric_right[i];
      const int sx = x + spec.disparity(z);
      if (sx >= w || r.metric_left[i - x + sx] < z) {
        ++occluded;
        continue;
      }
      bool same = r.metric_left[i - x + sx] == z;
      for (int c = 0; c < 3; ++c) same = same && r.frame.right.data()[c * plane + i] == r.frame.left.data()[c * plane + i - x + sx];
      if (!same) ++mismatched;
    }
    EXPECT_LT(static_cast<double>(mismatched) / plane, 0.05) << seed;
    EXPECT_EQ(mismatched, 0u) << seed;
    EXPECT_NEAR(unmatched_fraction(r.metric_left, r.metric_right, w, spec.camera),
                static_cast<double>(occluded + mismatched) / plane, 1e-12) << seed;
  }
}

TEST(InjectFault, LeftEyeNeverModified) {
  SceneSampler sampler;
  for (Category c : kAllCategories) {
    auto spec = sampler.sample(7);
    auto r = render_scene(spec);
    FaultSpec f{c, 0.8, std::nullopt, 3};
    if (category_scope(c) == Scope::object_level) f.target = 0;
    auto out = inject_fault(r, spec, f);
    EXPECT_EQ(out.frame.left, r.frame.left) << category_name(c);
    EXPECT_EQ(out.frame.label, Label::issue);
    EXPECT_EQ(out.frame.category, c);
  }
}

TEST(InjectFault, MonocularBlindnessIsBlackAndMaximal) {
  SceneSampler sampler;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto spec = sampler.sample(seed);
    auto r = render_scene(spec);
    double blind = 0, others = 0;
    for (Category c : kAllCategories) {
      FaultSpec f{c, 1.0, std::nullopt, seed};
      if (category_scope(c) == Scope::object_level) f.target = 0;
      auto out = inject_fault(r, spec, f);
      const double d = clean_discrepancy(r, out.frame.right, spec.camera);
      if (c == Category::MonocularBlindness) {
        for (float v : out.frame.right.data()) ASSERT_EQ(v, 0.0f);
        blind = d;
      } else {
        others = std::max(others, d);
      }
    }
    EXPECT_GT(blind, others) << seed;
  }
}

TEST(InjectFault, OmissionOfOnlyObjectLeavesBackground) {
  auto spec = single(8);
  auto r = render_scene(spec);
  auto out = inject_fault(r, spec, {Category::ObjectOmission, 0.7, 0, 1});
  SceneSpec empty = spec;
  empty.objects.clear();
  EXPECT_EQ(out.frame.right, render_scene(empty).frame.right);
}

TEST(InjectFault, TinyMisalignmentIsNoOp) {
  auto spec = single(8);
  auto r = render_scene(spec);
  auto out = inject_fault(r, spec, {Category::ViewMisalignment, 0.05, std::nullopt, 1});  // 0.05 * 64 / 8 = 0.4 px
  EXPECT_TRUE(out.no_op);
  EXPECT_FALSE(out.warning.empty());
  EXPECT_EQ(out.frame.right, r.frame.right);
}

TEST(InjectFault, Errors) {
  auto spec = single(8);
  auto r = render_scene(spec);
  EXPECT_THROW(inject_fault(r, spec, {Category::ObjectWarping, 0.5, std::nullopt, 1}), DataError);
  EXPECT_THROW(inject_fault(r, spec, {Category::ObjectWarping, 0.5, 3, 1}), DataError);
  EXPECT_THROW(inject_fault(r, spec, {Category::ObjectWarping, 0.0, 0, 1}), ConfigError);
  EXPECT_THROW(inject_fault(r, spec, {Category::ObjectWarping, 1.5, 0, 1}), ConfigError);
}

TEST(InjectFault, DeterministicUnderSeed) {
  SceneSampler sampler;
  auto spec = sampler.sample(9);
  auto r = render_scene(spec);
  for (Category c : {Category::ParticleVisualEffectVariation, Category::Other, Category::UnilateralObjectRendering}) {
    FaultSpec f{c, 0.6, 0, 42};
    EXPECT_EQ(inject_fault(r, spec, f).frame.right, inject_fault(r, spec, f).frame.right);
  }
}

TEST(InjectFault, EveryCategoryExceedsCleanBaseline) {
  SceneSampler sampler;
  int no_ops = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto spec = sampler.sample(1000 + seed);
    auto r = render_scene(spec);
    const double clean = clean_discrepancy(r, r.frame.right, spec.camera);
    Rng rng(seed);
    for (Category c : kAllCategories) {
      for (double m : {0.5, 1.0}) {
        FaultSpec f{c, m, std::nullopt, seed};
        if (category_scope(c) == Scope::object_level) f.target = pick_target(spec, rng);
        auto out = inject_fault(r, spec, f);
        if (out.no_op) {
          // Flagged and reported rather than silently counted as a fault.
          EXPECT_FALSE(out.warning.empty());
          ++no_ops;
          continue;
        }
        EXPECT_GT(clean_discrepancy(r, out.frame.right, spec.camera), clean)
            << category_name(c) << " seed " << seed << " m " << m;
      }
    }
  }
  EXPECT_LE(no_ops, 8);  // of 640 injections
}

TEST(SceneJson, RoundTrip) {
  SceneSampler sampler;
  auto spec = sampler.sample(5);
  EXPECT_EQ(scene_from_json(nlohmann::json::parse(scene_to_json(spec).dump())), spec);
  FaultSpec f{Category::LevelOfDetailInconsistency, 0.25, 2, 77};
  auto back = fault_from_json(nlohmann::json::parse(fault_to_json(f).dump()));
  EXPECT_EQ(back.category, f.category);
  EXPECT_EQ(back.magnitude, f.magnitude);
  EXPECT_EQ(back.target, f.target);
  EXPECT_EQ(back.seed, f.seed);
  EXPECT_THROW(scene_from_json(nlohmann::json::parse(R"({"width": 4})")), DataError);
}

TEST(Corpus, Table1MixHas237Issues) {
  int total = 0;
  for (auto& [c, n] : table1_sampled_mix()) total += n;
  EXPECT_EQ(total, 237);
}

TEST(Corpus, NormalsOnly) {
  auto dir = testutil::scratch_dir("corpus_normal");
  CorpusConfig cfg;
  cfg.n_normal = 10;
  auto m = generate_corpus(cfg, dir);
  EXPECT_EQ(m.entries.size(), 10u);
  for (auto& e : m.entries) EXPECT_EQ(e.label, Label::normal);
  EXPECT_EQ(read_manifest(CorpusPaths{dir}.manifest()), m);
  auto f = load_frame(m.entries[0], dir);
  EXPECT_EQ(f.left.width(), 64);
}

TEST(Corpus, MixedLabelsAndByteIdenticalRerun) {
  auto a = testutil::scratch_dir("corpus_a"), b = testutil::scratch_dir("corpus_b");
  CorpusConfig cfg;
  cfg.n_normal = 12;
  cfg.fault_mix = {{Category::ObjectOmission, 3}, {Category::MonocularBlindness, 2}};
  cfg.seed = 17;
  auto m = generate_corpus(cfg, a);
  generate_corpus(cfg, b);
  std::size_t issues = 0;
  for (auto& e : m.entries) {
    if (e.label == Label::issue) {
      ++issues;
      EXPECT_TRUE(e.category.has_value());
    }
  }
  EXPECT_EQ(issues, 5u);
  for (auto& e : m.entries)
    EXPECT_EQ(read_file(a / *e.sbs_path), read_file(b / *e.sbs_path)) << e.frame_id;
  EXPECT_EQ(read_file(CorpusPaths{a}.manifest()), read_file(CorpusPaths{b}.manifest()));
  EXPECT_EQ(read_file(CorpusPaths{a}.scenes()), read_file(CorpusPaths{b}.scenes()));

  // The scene log regenerates each stored frame exactly.
  auto plans = read_scene_log(CorpusPaths{a}.scenes());
  ASSERT_EQ(plans.size(), m.entries.size());
  for (const auto& p : plans) {
    auto stored = load_frame(*m.find(p.frame_id), a);
    auto again = realize_frame(p);
    for (std::size_t i = 0; i < again.right.size(); ++i)
      ASSERT_EQ(stored.right.data()[i], to_u8(again.right.data()[i]) / 255.0f) << p.frame_id;
  }
}
