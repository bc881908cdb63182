#include <stereoid/depth.hpp>
#include <stereoid/synth.hpp>

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace stereoid;

namespace {

SceneSpec one_object_scene() {
  SceneSpec s;
  s.background = {0.2f, 0.3f, 0.4f};
  s.objects.push_back({Shape::rectangle, {0.9f, 0.1f, 0.1f}, 40, 32, 16, 16, 8});
  return s;
}

class ThrowingBackend : public DepthBackend {
 public:
  DepthMap infer(const TensorImage&) const override { throw std::runtime_error("model exploded"); }
  std::string name() const override { return "throwing"; }
};

class WrongSizeBackend : public DepthBackend {
 public:
  DepthMap infer(const TensorImage&) const override {
    return DepthMap(2, 2, {1, 2, 3, 4}, DepthConvention::relative_inverse, false);
  }
  std::string name() const override { return "wrong"; }
};

}  // namespace

TEST(EstimateDepth, NearObjectIsLargerThanBackground) {
  auto spec = one_object_scene();
  auto r = render_scene(spec);
  double obj = 0, bg = 0;
  int n_obj = 0, n_bg = 0;
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      // Analytic oracle: the left eye draws the object at its own center.
      const bool inside = std::abs(x + 0.5 - 40) < 8 && std::abs(y + 0.5 - 32) < 8;
      (inside ? obj : bg) += r.depth_left.at(y, x);
      (inside ? n_obj : n_bg) += 1;
      if (inside) {
        ASSERT_GT(r.depth_left.at(y, x), 0.5f);
      } else {
        ASSERT_LT(r.depth_left.at(y, x), 0.5f);
      }
    }
  EXPECT_GT(obj / n_obj, bg / n_bg);
}

TEST(EstimateDepth, ConstantDepthBecomesHalf) {
  auto img = TensorImage::filled(3, 5, 6, ValueRange::unit, 0.3f);
  auto d = estimate_depth(metric_depth_backend(std::vector<float>(30, 7.0f)), img);
  for (float v : d.data()) EXPECT_EQ(v, 0.5f);
}

TEST(EstimateDepth, OutputMatchesInputExtentAndIsDeterministic) {
  Rng rng(31);
  auto img = testutil::random_image(rng, 3, 9, 14);
  std::vector<float> z(9 * 14);
  for (float& v : z) v = static_cast<float>(rng.uniform(1, 10));
  auto backend = metric_depth_backend(z);
  auto a = estimate_depth(backend, img), b = estimate_depth(backend, img);
  EXPECT_EQ(a.height(), 9);
  EXPECT_EQ(a.width(), 14);
  EXPECT_TRUE(a.normalized());
  EXPECT_EQ(a, b);
}

TEST(EstimateDepth, BackendFailuresCarryCause) {
  auto img = TensorImage::filled(3, 4, 4, ValueRange::unit, 0.f);
  try {
    estimate_depth(ThrowingBackend{}, img);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("model exploded"), std::string::npos);
  }
  EXPECT_THROW(estimate_depth(WrongSizeBackend{}, img), ShapeError);
}

TEST(Normalize, Idempotent) {
  Rng rng(32);
  for (int t = 0; t < 20; ++t) {
    std::vector<float> v(40);
    for (float& x : v) x = static_cast<float>(rng.uniform(-5, 5));
    auto once = normalize_minmax(DepthMap(5, 8, v, DepthConvention::relative_inverse, false));
    auto twice = normalize_minmax(once);
    for (std::size_t i = 0; i < v.size(); ++i) ASSERT_NEAR(once.data()[i], twice.data()[i], 1e-6);
  }
}

TEST(DepthMapType, RejectsNonFiniteAndOutOfRange) {
  EXPECT_THROW(DepthMap(1, 1, {NAN}, DepthConvention::metric, false), NumericError);
  EXPECT_THROW(DepthMap(1, 1, {1.5f}, DepthConvention::relative_inverse, true), DataError);
}

TEST(DepthContext, Replication) {
  Rng rng(33);
  std::vector<float> v(512 * 512);
  for (float& x : v) x = static_cast<float>(rng.uniform());
  DepthMap d(512, 512, v, DepthConvention::relative_inverse, true);
  auto ctx = depth_to_context(d);
  ASSERT_EQ(ctx.channels(), 3);
  EXPECT_TRUE(std::equal(ctx.plane(0).begin(), ctx.plane(0).end(), ctx.plane(1).begin()));
  EXPECT_TRUE(std::equal(ctx.plane(0).begin(), ctx.plane(0).end(), ctx.plane(2).begin()));
  EXPECT_EQ(context_to_depth(ctx), d);
}

TEST(DepthContext, ZerosStayZerosAndUnnormalizedRejected) {
  auto ctx = depth_to_context(DepthMap(3, 3, std::vector<float>(9, 0.f), DepthConvention::relative_inverse, true));
  for (float v : ctx.data()) EXPECT_EQ(v, 0.f);
  EXPECT_THROW(depth_to_context(DepthMap(1, 1, {3.f}, DepthConvention::relative_inverse, false)), DataError);
}

TEST(EstimateDepth, MeanDepthRanksMatchSceneOrder) {
  // Rank correlation 1 between mean relative depth per object and 1/z.
  SceneSampler sampler;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto spec = sampler.sample(seed);
    auto r = render_scene(spec);
    std::vector<std::pair<double, double>> pts;  // (z, mean depth over visible pixels)
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
      double sum = 0;
      int n = 0;
      for (std::size_t p = 0; p < r.metric_left.size(); ++p)
        if (r.metric_left[p] == static_cast<float>(spec.objects[i].z)) {
          sum += r.depth_left.data()[p];
          ++n;
        }
      if (n > 0) pts.emplace_back(spec.objects[i].z, sum / n);
    }
    for (auto& a : pts)
      for (auto& b : pts)
        if (a.first < b.first) EXPECT_GT(a.second, b.second) << "seed " << seed;
  }
}

TEST(DepthCache, RoundTripAndEnvironment) {
  auto dir = testutil::scratch_dir("depthcache");
  DepthCache cache(dir);
  std::vector<float> v(12);
  std::iota(v.begin(), v.end(), 0.f);
  auto d = normalize_minmax(DepthMap(3, 4, v, DepthConvention::relative_inverse, false));
  cache.store("f1", Eye::left, d);
  auto back = cache.load("f1", Eye::left);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(back.data()[i], d.data()[i], 0.5 / 65535.0 + 1e-7);
  EXPECT_THROW(cache.load("f1", Eye::right), DataError);
  ::setenv("STEREOID_CACHE", (dir / "env").c_str(), 1);
  EXPECT_EQ(DepthCache::from_environment("/nonexistent").dir(), dir / "env");
  ::unsetenv("STEREOID_CACHE");
  EXPECT_EQ(DepthCache::from_environment(dir).dir(), dir);
}
