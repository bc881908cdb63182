#pragma once

#include <stereoid/core.hpp>
#include <stereoid/dataset.hpp>
#include <stereoid/image_ops.hpp>
#include <stereoid/depth.hpp>
#include <stereoid/png_io.hpp>
#include <stereoid/rng.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace stereoid {

enum class Shape { rectangle, ellipse, triangle };

inline std::string_view shape_name(Shape s) {
  switch (s) {
    case Shape::rectangle: return "rectangle";
    case Shape::ellipse: return "ellipse";
    case Shape::triangle: return "triangle";
  }
  return "rectangle";
}

inline Shape parse_shape(std::string_view s) {
  if (s == "rectangle") return Shape::rectangle;
  if (s == "ellipse") return Shape::ellipse;
  if (s == "triangle") return Shape::triangle;
  throw DataError("unknown shape '" + std::string(s) + "'");
}

struct Rgb {
  float r = 0, g = 0, b = 0;
  float operator[](int c) const { return c == 0 ? r : (c == 1 ? g : b); }
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  auto f = [t](float x, float y) { return static_cast<float>(std::clamp(x + (y - x) * t, 0.0, 1.0)); };
  return {f(a.r, b.r), f(a.g, b.g), f(a.b, b.b)};
}

/// Flat fronto-parallel shape at depth z; center and size in left-eye pixels.
struct SceneObject {
  Shape shape = Shape::rectangle;
  Rgb color;
  double cx = 0, cy = 0;
  double width = 1, height = 1;
  double z = 1;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct StereoCamera {
  double focal_px = 64;
  double baseline = 0.5;
  friend bool operator==(const StereoCamera&, const StereoCamera&) = default;
};

struct SceneSpec {
  int width = 64;
  int height = 64;
  Rgb background{0.2f, 0.25f, 0.3f};
  double background_gradient = 0.2;  // brightness change from top row to bottom row
  double z_background = 32;
  std::vector<SceneObject> objects;
  StereoCamera camera;
  std::uint64_t seed = 0;

  double disparity_exact(double z) const { return camera.focal_px * camera.baseline / z; }
  /// d = f * b / z rounded to whole pixels.
  int disparity(double z) const { return static_cast<int>(std::lround(disparity_exact(z))); }

  void validate() const {
    if (width < 2 || height < 2) throw ConfigError("scene canvas must be at least 2x2");
    if (!(camera.focal_px > 0 && camera.baseline > 0)) throw ConfigError("camera focal length and baseline must be positive");
    if (!(z_background > 0)) throw ConfigError("background depth must be positive");
    if (!(disparity_exact(z_background) < width / 4.0)) throw ConfigError("background disparity exceeds width/4");
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const auto& o = objects[i];
      if (!(o.z > 0 && o.z < z_background))
        throw ConfigError("object " + std::to_string(i) + " depth must satisfy 0 < z < z_background");
      if (!(disparity_exact(o.z) < width / 4.0))
        throw ConfigError("object " + std::to_string(i) + " disparity " + std::to_string(disparity_exact(o.z)) +
                          " exceeds width/4");
      if (!(o.width > 0 && o.height > 0)) throw ConfigError("object " + std::to_string(i) + " needs a positive size");
    }
  }
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// Per-eye draw instruction: the object plus the edits a fault may apply.
struct DrawItem {
  SceneObject object;
  int shift = 0;              // object drawn at cx - shift
  double stretch_x = 1.0;
  int block = 1;              // >1 rasterizes the coverage test on block x block cells
  bool clip_lower_half = false;
  double chamfer = 0;         // corner cut of the low-detail rectangle proxy
};

namespace synth_detail {

inline bool covers(const DrawItem& item, int px, int py) {
  const auto& o = item.object;
  // Integer shift is applied before the subpixel offset so both eyes evaluate
  // identical expressions for corresponding pixels.
  double sx = px + item.shift, sy = py;
  if (item.block > 1) {
    sx = std::floor(sx / item.block) * item.block + (item.block - 1) * 0.5;
    sy = std::floor(sy / item.block) * item.block + (item.block - 1) * 0.5;
  }
  const double dx = (sx + 0.5) - o.cx;
  const double dy = (sy + 0.5) - o.cy;
  const double hw = o.width * 0.5 * item.stretch_x, hh = o.height * 0.5;
  if (item.clip_lower_half && dy > 0) return false;
  switch (o.shape) {
    case Shape::rectangle:
      return std::abs(dx) <= hw && std::abs(dy) <= hh && (hw - std::abs(dx)) + (hh - std::abs(dy)) >= item.chamfer;
    case Shape::ellipse: return (dx * dx) / (hw * hw) + (dy * dy) / (hh * hh) <= 1.0;
    case Shape::triangle:
      if (dy < -hh || dy > hh) return false;
      return std::abs(dx) <= hw * (dy + hh) / (2 * hh);
  }
  return false;
}

inline Rgb background_at(const SceneSpec& s, int y) {
  const double t = s.height > 1 ? static_cast<double>(y) / (s.height - 1) - 0.5 : 0.0;
  const double delta = s.background_gradient * t;
  auto f = [delta](float v) { return static_cast<float>(std::clamp(v + delta, 0.0, 1.0)); };
  return {f(s.background.r), f(s.background.g), f(s.background.b)};
}

struct EyeRender {
  std::vector<float> rgb;  // 3 x h x w
  std::vector<float> z;    // metric depth, h x w
};

/// Painter's algorithm, far to near; ties keep list order.
inline EyeRender render_eye(const SceneSpec& s, std::vector<DrawItem> items) {
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.object.z > b.object.z; });
  const std::size_t plane = static_cast<std::size_t>(s.width) * s.height;
  EyeRender out{std::vector<float>(3 * plane), std::vector<float>(plane, static_cast<float>(s.z_background))};
  for (int y = 0; y < s.height; ++y) {
    Rgb bg = background_at(s, y);
    for (int x = 0; x < s.width; ++x)
      for (int c = 0; c < 3; ++c) out.rgb[c * plane + static_cast<std::size_t>(y) * s.width + x] = bg[c];
  }
  for (const auto& item : items)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        if (!covers(item, x, y)) continue;
        const std::size_t i = static_cast<std::size_t>(y) * s.width + x;
        for (int c = 0; c < 3; ++c) out.rgb[c * plane + i] = item.object.color[c];
        out.z[i] = static_cast<float>(item.object.z);
      }
  return out;
}

}  // namespace synth_detail

inline std::vector<DrawItem> draw_items(const SceneSpec& s, bool right_eye) {
  std::vector<DrawItem> items;
  for (const auto& o : s.objects) items.push_back(DrawItem{o, right_eye ? s.disparity(o.z) : 0});
  return items;
}

struct RenderedScene {
  StereoFrame frame;
  DepthMap depth_left;   // normalized relative inverse depth
  DepthMap depth_right;
  std::vector<float> metric_left;  // z per pixel
  std::vector<float> metric_right;
};

/// Analytic depth oracle: relative inverse depth from rendered metric z.
inline AnalyticDepthBackend metric_depth_backend(std::vector<float> metric) {
  return AnalyticDepthBackend([m = std::move(metric)](int h, int w) {
    if (m.size() != static_cast<std::size_t>(h) * w) throw ShapeError("analytic depth does not match image extent");
    return m;
  });
}

/// Left eye draws objects at their centers, right eye shifts each one left by
/// its rounded disparity. The frame is labeled normal.
inline RenderedScene render_scene(const SceneSpec& spec, std::string frame_id = "scene") {
  spec.validate();
  auto left = synth_detail::render_eye(spec, draw_items(spec, false));
  auto right = synth_detail::render_eye(spec, draw_items(spec, true));
  TensorImage li(3, spec.height, spec.width, ValueRange::unit, std::move(left.rgb));
  TensorImage ri(3, spec.height, spec.width, ValueRange::unit, std::move(right.rgb));
  DepthMap dl = estimate_depth(metric_depth_backend(left.z), li);
  DepthMap dr = estimate_depth(metric_depth_backend(right.z), ri);
  return RenderedScene{StereoFrame(std::move(li), std::move(ri), std::move(frame_id), FrameSource::synthetic, Label::normal),
                       std::move(dl), std::move(dr), std::move(left.z), std::move(right.z)};
}

/// Right view predicted from the left image and both eyes' metric depth: each
/// right pixel samples the left eye at its analytic disparity when the left
/// eye sees the same surface there; other pixels copy the nearest matched
/// pixel of the same surface in the row, else the nearest matched pixel.
inline TensorImage reference_right_view(const TensorImage& left, std::span<const float> metric_left,
                                        std::span<const float> metric_right, const StereoCamera& cam) {
  const int w = left.width(), h = left.height();
  if (metric_left.size() != left.plane_size() || metric_right.size() != left.plane_size())
    throw ShapeError("metric depth does not match image");
  const std::size_t plane = left.plane_size();
  std::vector<float> out(3 * plane, 0.0f);
  std::vector<char> matched(plane, 0);
  for (int y = 0; y < h; ++y) {
    const std::size_t row = static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) {
      const float z = metric_right[row + x];
      const int sx = x + static_cast<int>(std::lround(cam.focal_px * cam.baseline / z));
      if (sx < 0 || sx >= w || metric_left[row + sx] != z) continue;
      matched[row + x] = 1;
      for (int c = 0; c < 3; ++c) out[c * plane + row + x] = left.data()[c * plane + row + sx];
    }
    for (int x = 0; x < w; ++x) {
      if (matched[row + x]) continue;
      int pick = -1, fallback = -1;
      for (int r = 1; r < w && pick < 0; ++r)
        for (int cand : {x - r, x + r}) {
          if (cand < 0 || cand >= w || !matched[row + cand]) continue;
          if (fallback < 0) fallback = cand;
          if (metric_right[row + cand] == metric_right[row + x]) {
            pick = cand;
            break;
          }
        }
      if (pick < 0) pick = fallback;
      if (pick < 0) continue;
      for (int c = 0; c < 3; ++c) out[c * plane + row + x] = out[c * plane + row + pick];
    }
  }
  return TensorImage(3, h, w, left.range(), std::move(out));
}

/// Fraction of right-eye pixels with no same-surface correspondence in the left eye.
inline double unmatched_fraction(std::span<const float> metric_left, std::span<const float> metric_right, int width,
                                 const StereoCamera& cam) {
  std::size_t miss = 0;
  for (std::size_t i = 0; i < metric_right.size(); ++i) {
    const int x = static_cast<int>(i % width);
    const float z = metric_right[i];
    const int sx = x + static_cast<int>(std::lround(cam.focal_px * cam.baseline / z));
    if (sx < 0 || sx >= width || metric_left[i - x + sx] != z) ++miss;
  }
  return static_cast<double>(miss) / static_cast<double>(metric_right.size());
}

struct FaultSpec {
  Category category = Category::MonocularBlindness;
  double magnitude = 1.0;
  std::optional<std::size_t> target;
  std::uint64_t seed = 0;
};

struct FaultResult {
  StereoFrame frame;
  bool no_op = false;
  std::string warning;
};

namespace synth_detail {

/// Bilinear sample of one plane with edge clamping.
inline float sample(std::span<const float> p, int w, int h, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int xx, int yy) { return static_cast<double>(p[static_cast<std::size_t>(yy) * w + xx]); };
  const double top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
  const double bot = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
  return static_cast<float>(std::clamp(top + (bot - top) * fy, 0.0, 1.0));
}

/// Output pixel (x, y) takes the source value at map(x, y).
template <typename Map>
TensorImage resample(const TensorImage& img, Map map) {
  const int w = img.width(), h = img.height();
  std::vector<float> out(img.size());
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto [sx, sy] = map(x, y);
        out[(static_cast<std::size_t>(c) * h + y) * w + x] = sample(img.plane(c), w, h, sx, sy);
      }
  return TensorImage(img.channels(), h, w, img.range(), std::move(out));
}

inline TensorImage gaussian_blur(const TensorImage& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-(i * i) / (2 * sigma * sigma));
  for (double& v : k) v /= sum;
  const int w = img.width(), h = img.height();
  std::vector<float> tmp(img.size()), out(img.size());
  for (int c = 0; c < img.channels(); ++c) {
    auto p = img.plane(c);
    float* t = tmp.data() + static_cast<std::size_t>(c) * h * w;
    float* o = out.data() + static_cast<std::size_t>(c) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * p[static_cast<std::size_t>(y) * w + std::clamp(x + i, 0, w - 1)];
        t[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * t[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
        o[static_cast<std::size_t>(y) * w + x] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  }
  return TensorImage(img.channels(), h, w, img.range(), std::move(out));
}

inline Rgb random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform(0.3, 1.0)), static_cast<float>(rng.uniform(0.3, 1.0)),
          static_cast<float>(rng.uniform(0.3, 1.0))};
}

}  // namespace synth_detail

/// Mutates the right eye according to the fault category; the left eye is
/// never touched. Returns the original frame with no_op set when the fault
/// rounds away to nothing.
inline FaultResult inject_fault(const RenderedScene& rendered, const SceneSpec& spec, const FaultSpec& fault) {
  using namespace synth_detail;
  if (!(fault.magnitude > 0.0 && fault.magnitude <= 1.0)) throw ConfigError("fault magnitude must lie in (0, 1]");
  const StereoFrame& frame = rendered.frame;
  const TensorImage& right = frame.right;
  const double m = fault.magnitude;
  const int w = right.width(), h = right.height();
  Rng rng(derive_seed(fault.seed, 0xfa017));

  const bool object_level = category_scope(fault.category) == Scope::object_level;
  if (object_level && !spec.objects.empty() && !fault.target)
    throw DataError(std::string(category_name(fault.category)) + " needs a target object");
  if (object_level && fault.target && *fault.target >= spec.objects.size())
    throw DataError("fault target " + std::to_string(*fault.target) + " does not exist");
  if (object_level && spec.objects.empty() && fault.category != Category::UnilateralObjectRendering)
    throw DataError(std::string(category_name(fault.category)) + " needs a scene with objects");

  auto finish = [&](TensorImage new_right) {
    if (new_right == right)
      return FaultResult{frame, true, std::string(category_name(fault.category)) + " left the right eye unchanged"};
    return FaultResult{StereoFrame(frame.left, std::move(new_right), frame.frame_id, FrameSource::synthetic, Label::issue,
                                   fault.category),
                       false, {}};
  };
  auto rerender = [&](std::vector<DrawItem> items) {
    auto eye = render_eye(spec, std::move(items));
    return TensorImage(3, h, w, ValueRange::unit, std::move(eye.rgb));
  };

  std::vector<DrawItem> items = draw_items(spec, true);
  const std::size_t t = fault.target.value_or(0);
  switch (fault.category) {
    case Category::MonocularBlindness:
      return finish(TensorImage::filled(3, h, w, ValueRange::unit, 0.0f));
    case Category::ViewMisalignment: {
      const int shift = static_cast<int>(std::lround(m * w / 8.0)) * (rng.index(2) ? 1 : -1);
      if (shift == 0) return FaultResult{frame, true, "ViewMisalignment shift rounds to 0 px; frame unchanged"};
      return finish(resample(right, [shift](int x, int y) { return std::pair<double, double>(x - shift, y); }));
    }
    case Category::WarpedViews: {
      const double sx = 1.0 + 0.3 * m, cx = w / 2.0;
      return finish(resample(right, [=](int x, int y) {
        return std::pair<double, double>(cx + (x + 0.5 - cx) / sx - 0.5, y);
      }));
    }
    case Category::AsymmetricViewingAngles: {
      const double k = 0.25 * m * (rng.index(2) ? 1 : -1), cy = h / 2.0;
      return finish(resample(right, [=](int x, int y) { return std::pair<double, double>(x - k * (y + 0.5 - cy), y); }));
    }
    case Category::LightingShadowDiscrepancy: {
      std::vector<float> d(right.data().begin(), right.data().end());
      for (float& v : d) v *= static_cast<float>(1.0 - m / 2.0);
      return finish(TensorImage(3, h, w, ValueRange::unit, std::move(d)));
    }
    case Category::PostProcessingInconsistency:
      return finish(gaussian_blur(right, 0.5 + 2.0 * m));
    case Category::ParticleVisualEffectVariation: {
      std::vector<float> d(right.data().begin(), right.data().end());
      const std::size_t plane = right.plane_size();
      const std::size_t count = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround((0.02 + 0.08 * m) * plane)));
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t p = rng.index(plane);
        const float v = static_cast<float>(rng.uniform(0.85, 1.0));
        for (int c = 0; c < 3; ++c) d[c * plane + p] = v;
      }
      return finish(TensorImage(3, h, w, ValueRange::unit, std::move(d)));
    }
    case Category::Other: {
      std::vector<float> d(right.data().begin(), right.data().end());
      const int bw = std::max(1, static_cast<int>(std::lround(m * w / 3.0)));
      const int bh = std::max(1, static_cast<int>(std::lround(m * h / 3.0)));
      const int x0 = rng.uniform_int(0, w - bw), y0 = rng.uniform_int(0, h - bh);
      Rgb color = random_color(rng);
      const std::size_t plane = right.plane_size();
      for (int y = y0; y < y0 + bh; ++y)
        for (int x = x0; x < x0 + bw; ++x)
          for (int c = 0; c < 3; ++c) d[c * plane + static_cast<std::size_t>(y) * w + x] = color[c];
      return finish(TensorImage(3, h, w, ValueRange::unit, std::move(d)));
    }
    case Category::ShaderAbsence:
      items[t].object.color = lerp(items[t].object.color, Rgb{1.0f, 0.0f, 1.0f}, m);
      return finish(rerender(std::move(items)));
    case Category::MaterialTextureMismatch: {
      const Rgb c = items[t].object.color;
      items[t].object.color = lerp(c, Rgb{1.0f - c.r, 1.0f - c.g, 1.0f - c.b}, m);
      return finish(rerender(std::move(items)));
    }
    case Category::ObjectOmission:
      items.erase(items.begin() + static_cast<std::ptrdiff_t>(t));
      return finish(rerender(std::move(items)));
    case Category::UnilateralObjectRendering: {
      DrawItem extra;
      if (spec.objects.empty()) {
        extra.object = SceneObject{Shape::rectangle, random_color(rng), w / 2.0, h / 2.0, w * 0.2, h * 0.2,
                                   spec.z_background * 0.5};
        extra.shift = spec.disparity(extra.object.z);
      } else {
        extra = items[t];
        double offset = extra.object.width * (0.75 + 0.5 * m) * (rng.index(2) ? 1 : -1);
        const double shifted = extra.object.cx - extra.shift + offset;
        if (shifted < 0 || shifted >= w) offset = -offset;  // keep the copy on the canvas
        extra.object.cx += offset;
      }
      items.push_back(extra);
      return finish(rerender(std::move(items)));
    }
    case Category::ObjectPositionDiscrepancy: {
      const int extra = static_cast<int>(std::lround(m * 20.0)) * (rng.index(2) ? 1 : -1);
      if (extra == 0) return FaultResult{frame, true, "ObjectPositionDiscrepancy offset rounds to 0 px; frame unchanged"};
      items[t].shift += extra;
      return finish(rerender(std::move(items)));
    }
    case Category::ObjectWarping:
      items[t].stretch_x = 1.0 + m;
      return finish(rerender(std::move(items)));
    case Category::LevelOfDetailInconsistency:
      items[t].block = 2 + static_cast<int>(std::lround(2 * m));
      items[t].chamfer = 0.25 * m * std::min(items[t].object.width, items[t].object.height);
      return finish(rerender(std::move(items)));
    case Category::PartialObjectRendering:
      items[t].clip_lower_half = true;
      return finish(rerender(std::move(items)));
  }
  throw DataError("unhandled fault category");
}

/// Number of right-eye pixels where the object is the front-most surface.
inline std::size_t visible_pixels(const SceneSpec& spec, std::size_t index) {
  auto items = draw_items(spec, true);
  std::size_t count = 0;
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      if (!synth_detail::covers(items[index], x, y)) continue;
      bool hidden = false;
      for (std::size_t j = 0; j < items.size() && !hidden; ++j)
        if (j != index && (items[j].object.z < items[index].object.z || (items[j].object.z == items[index].object.z && j > index)) &&
            synth_detail::covers(items[j], x, y))
          hidden = true;
      count += !hidden;
    }
  return count;
}

/// Random scene generator for desk-scale corpora.
struct SceneSampler {
  int width = 64;
  int height = 64;
  int min_objects = 2;
  int max_objects = 4;
  double min_size = 0.18;  // fraction of canvas width
  double max_size = 0.40;
  double min_z = 3.0;
  double max_z = 12.0;
  double z_background = 32.0;
  StereoCamera camera{64.0, 0.5};

  SceneSpec sample(std::uint64_t seed) const {
    Rng rng(seed);
    SceneSpec s;
    s.width = width;
    s.height = height;
    s.seed = seed;
    s.camera = camera;
    s.z_background = z_background;
    s.background = {static_cast<float>(rng.uniform(0.05, 0.3)), static_cast<float>(rng.uniform(0.05, 0.3)),
                    static_cast<float>(rng.uniform(0.05, 0.3))};
    s.background_gradient = rng.uniform(0.0, 0.2);
    const int n = rng.uniform_int(min_objects, max_objects);
    for (int i = 0; i < n; ++i) {
      SceneObject o;
      o.shape = static_cast<Shape>(rng.index(3));
      o.color = synth_detail::random_color(rng);
      o.width = rng.uniform(min_size, max_size) * width;
      o.height = rng.uniform(min_size, max_size) * height;
      o.z = rng.uniform(min_z, max_z);
      const double d = s.disparity_exact(o.z);
      o.cx = rng.uniform(o.width / 2 + d, width - o.width / 2);
      o.cy = rng.uniform(o.height / 2, height - o.height / 2);
      s.objects.push_back(o);
    }
    s.validate();
    return s;
  }
};

/// Visible object preferred as fault target; falls back to the most visible one.
inline std::optional<std::size_t> pick_target(const SceneSpec& spec, Rng& rng, std::size_t min_visible = 20) {
  if (spec.objects.empty()) return std::nullopt;
  std::vector<std::size_t> ok;
  std::size_t best = 0, best_count = 0;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const std::size_t v = visible_pixels(spec, i);
    if (v >= min_visible) ok.push_back(i);
    if (v > best_count) best = i, best_count = v;
  }
  if (ok.empty()) return best;
  return ok[rng.index(ok.size())];
}

inline nlohmann::ordered_json rgb_json(const Rgb& c) { return nlohmann::ordered_json::array({c.r, c.g, c.b}); }

inline Rgb rgb_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("color must be an [r, g, b] array");
  return {j[0].get<float>(), j[1].get<float>(), j[2].get<float>()};
}

inline nlohmann::ordered_json scene_to_json(const SceneSpec& s) {
  nlohmann::ordered_json j;
  j["width"] = s.width;
  j["height"] = s.height;
  j["background"] = rgb_json(s.background);
  j["background_gradient"] = s.background_gradient;
  j["z_background"] = s.z_background;
  j["camera"] = {{"focal_px", s.camera.focal_px}, {"baseline", s.camera.baseline}};
  j["seed"] = s.seed;
  auto objs = nlohmann::ordered_json::array();
  for (const auto& o : s.objects) {
    nlohmann::ordered_json oj;
    oj["shape"] = std::string(shape_name(o.shape));
    oj["color"] = rgb_json(o.color);
    oj["center"] = {o.cx, o.cy};
    oj["size"] = {o.width, o.height};
    oj["z"] = o.z;
    objs.push_back(oj);
  }
  j["objects"] = objs;
  return j;
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  try {
    SceneSpec s;
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    s.background = rgb_from_json(j.at("background"));
    s.background_gradient = j.value("background_gradient", 0.0);
    s.z_background = j.at("z_background").get<double>();
    s.camera.focal_px = j.at("camera").at("focal_px").get<double>();
    s.camera.baseline = j.at("camera").at("baseline").get<double>();
    s.seed = j.value("seed", std::uint64_t{0});
    for (const auto& oj : j.at("objects")) {
      SceneObject o;
      o.shape = parse_shape(oj.at("shape").get<std::string>());
      o.color = rgb_from_json(oj.at("color"));
      o.cx = oj.at("center").at(0).get<double>();
      o.cy = oj.at("center").at(1).get<double>();
      o.width = oj.at("size").at(0).get<double>();
      o.height = oj.at("size").at(1).get<double>();
      o.z = oj.at("z").get<double>();
      s.objects.push_back(o);
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("scene spec: ") + e.what());
  }
}

inline nlohmann::ordered_json fault_to_json(const FaultSpec& f) {
  nlohmann::ordered_json j;
  j["category"] = std::string(category_name(f.category));
  j["magnitude"] = f.magnitude;
  j["target"] = f.target ? nlohmann::ordered_json(*f.target) : nlohmann::ordered_json(nullptr);
  j["seed"] = f.seed;
  return j;
}

inline FaultSpec fault_from_json(const nlohmann::json& j) {
  try {
    FaultSpec f;
    f.category = parse_category(j.at("category").get<std::string>());
    f.magnitude = j.at("magnitude").get<double>();
    if (j.contains("target") && !j["target"].is_null()) f.target = j["target"].get<std::size_t>();
    f.seed = j.value("seed", std::uint64_t{0});
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("fault spec: ") + e.what());
  }
}

/// Category counts of the manually labeled sample (237 issues in 4,000 frames).
inline std::map<Category, int> table1_sampled_mix() {
  return {{Category::ObjectPositionDiscrepancy, 105}, {Category::ObjectOmission, 44},
          {Category::AsymmetricViewingAngles, 37},    {Category::ObjectWarping, 21},
          {Category::MonocularBlindness, 17},         {Category::UnilateralObjectRendering, 7},
          {Category::PartialObjectRendering, 6}};
}

struct CorpusConfig {
  int n_normal = 10;
  std::map<Category, int> fault_mix;
  SceneSampler sampler;
  double min_magnitude = 0.5;
  double max_magnitude = 1.0;
  SplitRatios ratios = kDefaultRatios;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct CorpusFrame {
  std::string frame_id;
  SceneSpec scene;
  std::optional<FaultSpec> fault;
};

/// Records written next to the manifest so reference translations can be rebuilt.
inline void write_scene_log(const std::filesystem::path& path, const std::vector<CorpusFrame>& frames) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& f : frames) {
    nlohmann::ordered_json j;
    j["frame_id"] = f.frame_id;
    j["scene"] = scene_to_json(f.scene);
    j["fault"] = f.fault ? fault_to_json(*f.fault) : nlohmann::ordered_json(nullptr);
    out << j.dump() << '\n';
  }
}

inline std::vector<CorpusFrame> read_scene_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open scene log '" + path.string() + "'");
  std::vector<CorpusFrame> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      CorpusFrame f{j.at("frame_id").get<std::string>(), scene_from_json(j.at("scene")), std::nullopt};
      if (!j.at("fault").is_null()) f.fault = fault_from_json(j["fault"]);
      out.push_back(std::move(f));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

struct CorpusPaths {
  std::filesystem::path root;
  std::filesystem::path manifest() const { return root / "manifest.jsonl"; }
  std::filesystem::path scenes() const { return root / "scenes.jsonl"; }
  std::filesystem::path depth_dir() const { return root / "depth"; }
  std::filesystem::path frames_dir() const { return root / "frames"; }
};

/// Renders one corpus frame (clean or faulty) from its plan.
inline StereoFrame realize_frame(const CorpusFrame& plan) {
  RenderedScene rendered = render_scene(plan.scene, plan.frame_id);
  if (!plan.fault) return rendered.frame;
  return inject_fault(rendered, plan.scene, *plan.fault).frame;
}

/// Draws one scene and optional fault per frame; the order of clean and faulty
/// frames is a seeded shuffle.
inline std::vector<CorpusFrame> plan_corpus(const CorpusConfig& cfg) {
  if (cfg.n_normal < 0) throw ConfigError("n_normal must be nonnegative");
  if (!(cfg.min_magnitude > 0 && cfg.min_magnitude <= cfg.max_magnitude && cfg.max_magnitude <= 1))
    throw ConfigError("fault magnitudes must satisfy 0 < min <= max <= 1");
  std::vector<std::optional<Category>> kinds(static_cast<std::size_t>(cfg.n_normal));
  for (const auto& [cat, count] : cfg.fault_mix) {
    if (count < 0) throw ConfigError("fault counts must be nonnegative");
    for (int i = 0; i < count; ++i) kinds.emplace_back(cat);
  }
  if (kinds.empty()) throw ConfigError("corpus would be empty");
  Rng order_rng(derive_seed(cfg.seed, 0x0de5));
  order_rng.shuffle(std::span(kinds));

  std::vector<CorpusFrame> plans(kinds.size());
  const int digits = std::max<int>(6, static_cast<int>(std::to_string(kinds.size()).size()));
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    std::string id = std::to_string(i);
    plans[i].frame_id = "f" + std::string(digits - id.size(), '0') + id;
    plans[i].scene = cfg.sampler.sample(derive_seed(cfg.seed, 0x5ce7e, i));
    if (kinds[i]) {
      Rng frng(derive_seed(cfg.seed, 0xfa017, i));
      FaultSpec f;
      f.category = *kinds[i];
      f.magnitude = frng.uniform(cfg.min_magnitude, cfg.max_magnitude);
      if (category_scope(f.category) == Scope::object_level) f.target = pick_target(plans[i].scene, frng);
      f.seed = frng.next();
      plans[i].fault = f;
    }
  }
  return plans;
}

/// Renders planned frames and writes side-by-side PNGs under frames/, analytic
/// depth PNGs under depth/, scenes.jsonl and the partitioned manifest.
template <typename ParallelFor>
DatasetManifest write_corpus(const std::vector<CorpusFrame>& plans, const SplitRatios& ratios, std::uint64_t seed,
                             const std::filesystem::path& out_dir, ParallelFor&& parallel_for) {
  if (plans.empty()) throw ConfigError("corpus would be empty");
  CorpusPaths paths{out_dir};
  std::filesystem::create_directories(paths.frames_dir());
  std::filesystem::create_directories(paths.depth_dir());
  DepthCache cache(paths.depth_dir());
  parallel_for(plans.size(), [&](std::size_t i) {
    RenderedScene rendered = render_scene(plans[i].scene, plans[i].frame_id);
    StereoFrame frame = plans[i].fault ? inject_fault(rendered, plans[i].scene, *plans[i].fault).frame : rendered.frame;
    write_png_rgb(paths.frames_dir() / (plans[i].frame_id + ".png"), hconcat(frame.left, frame.right));
    // Depth follows the scene geometry; injected faults do not alter it.
    cache.store(plans[i].frame_id, Eye::left, rendered.depth_left);
    cache.store(plans[i].frame_id, Eye::right, rendered.depth_right);
  });
  write_scene_log(paths.scenes(), plans);

  DatasetManifest manifest;
  for (const auto& p : plans) {
    ManifestEntry e;
    e.frame_id = p.frame_id;
    e.sbs_path = "frames/" + p.frame_id + ".png";
    e.label = p.fault ? Label::issue : Label::normal;
    if (p.fault) e.category = p.fault->category;
    manifest.entries.push_back(std::move(e));
  }
  manifest = partition(manifest, ratios, seed);
  write_manifest(manifest, paths.manifest());
  return manifest;
}

template <typename ParallelFor>
DatasetManifest generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir, ParallelFor&& parallel_for) {
  return write_corpus(plan_corpus(cfg), cfg.ratios, cfg.seed, out_dir, std::forward<ParallelFor>(parallel_for));
}

inline DatasetManifest generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir) {
  return generate_corpus(cfg, out_dir, [](std::size_t n, auto&& fn) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
  });
}

}  // namespace stereoid
