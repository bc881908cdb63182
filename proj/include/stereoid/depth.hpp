#pragma once

#include <stereoid/core.hpp>
#include <stereoid/png_io.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace stereoid {

enum class DepthConvention { relative_inverse, metric };

/// Height x width depth values. relative_inverse means larger = closer.
class DepthMap {
 public:
  DepthMap(int height, int width, std::vector<float> data, DepthConvention convention, bool normalized)
      : height_(height), width_(width), data_(std::move(data)), convention_(convention), normalized_(normalized) {
    if (height < 1 || width < 1) throw ShapeError("depth map dimensions must be positive");
    if (data_.size() != static_cast<std::size_t>(height) * width) throw ShapeError("depth data size mismatch");
    for (float v : data_) {
      if (!std::isfinite(v)) throw NumericError("depth map contains non-finite values");
      if (normalized && (v < 0.0f || v > 1.0f)) throw DataError("normalized depth value outside [0,1]");
    }
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::span<const float> data() const noexcept { return data_; }
  float at(int y, int x) const noexcept { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  DepthConvention convention() const noexcept { return convention_; }
  bool normalized() const noexcept { return normalized_; }

  friend bool operator==(const DepthMap&, const DepthMap&) = default;

 private:
  int height_;
  int width_;
  std::vector<float> data_;
  DepthConvention convention_;
  bool normalized_;
};

/// Per-image min-max normalization to [0,1]; a constant map becomes all 0.5.
inline DepthMap normalize_minmax(const DepthMap& depth) {
  auto [lo_it, hi_it] = std::minmax_element(depth.data().begin(), depth.data().end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<float> out(depth.data().size());
  if (hi - lo <= 0.0) {
    std::fill(out.begin(), out.end(), 0.5f);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<float>(std::clamp((depth.data()[i] - lo) / (hi - lo), 0.0, 1.0));
  }
  return DepthMap(depth.height(), depth.width(), std::move(out), depth.convention(), true);
}

/// Replicates a normalized depth map into a 3-channel unit-range image.
inline TensorImage depth_to_context(const DepthMap& depth) {
  if (!depth.normalized()) throw DataError("depth_to_context needs a normalized depth map");
  std::vector<float> data;
  data.reserve(depth.data().size() * 3);
  for (int c = 0; c < 3; ++c) data.insert(data.end(), depth.data().begin(), depth.data().end());
  return TensorImage(3, depth.height(), depth.width(), ValueRange::unit, std::move(data));
}

/// Channel 0 of a depth context, as a normalized relative depth map.
inline DepthMap context_to_depth(const TensorImage& context) {
  auto p = context.plane(0);
  return DepthMap(context.height(), context.width(), std::vector<float>(p.begin(), p.end()),
                  DepthConvention::relative_inverse, true);
}

/// Source of per-image relative depth. Implementations report whether
/// concurrent calls are allowed.
class DepthBackend {
 public:
  virtual ~DepthBackend() = default;
  /// Raw (unnormalized) depth for a unit-range RGB image, same extent as the input.
  virtual DepthMap infer(const TensorImage& image) const = 0;
  virtual bool thread_safe() const { return true; }
  virtual std::string name() const = 0;
};

/// Runs the backend and min-max normalizes its output.
inline DepthMap estimate_depth(const DepthBackend& backend, const TensorImage& image) {
  if (image.range() != ValueRange::unit) throw DataError("estimate_depth expects a unit-range image");
  if (image.channels() != 3) throw ShapeError("estimate_depth expects a 3-channel image");
  DepthMap raw = [&] {
    try {
      return backend.infer(image);
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw NumericError("depth backend '" + backend.name() + "' failed: " + e.what());
    }
  }();
  if (raw.height() != image.height() || raw.width() != image.width())
    throw ShapeError("depth backend '" + backend.name() + "' returned " + std::to_string(raw.height()) + "x" +
                     std::to_string(raw.width()) + " for a " + image.dims_string() + " image");
  return normalize_minmax(raw);
}

/// Backend driven by a callable that produces metric depth (distance) for
/// an image, e.g. an analytic renderer of a known scene. Converted to
/// relative inverse depth (1/z) before normalization.
class AnalyticDepthBackend : public DepthBackend {
 public:
  using Source = std::function<std::vector<float>(int height, int width)>;
  AnalyticDepthBackend(Source metric_depth, std::string label = "synthetic_oracle")
      : source_(std::move(metric_depth)), label_(std::move(label)) {}

  DepthMap infer(const TensorImage& image) const override {
    auto z = source_(image.height(), image.width());
    for (float& v : z) {
      if (!(v > 0.0f)) throw NumericError("analytic depth must be positive");
      v = 1.0f / v;
    }
    return DepthMap(image.height(), image.width(), std::move(z), DepthConvention::relative_inverse, false);
  }
  std::string name() const override { return label_; }

 private:
  Source source_;
  std::string label_;
};

enum class Eye { left, right };

inline std::string_view eye_suffix(Eye e) { return e == Eye::left ? "L" : "R"; }

/// 16-bit PNG cache of normalized depth maps, one file per frame and eye.
class DepthCache {
 public:
  explicit DepthCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  /// STEREOID_CACHE wins over the fallback directory when set.
  static DepthCache from_environment(const std::filesystem::path& fallback) {
    if (const char* env = std::getenv("STEREOID_CACHE"); env && *env) return DepthCache(env);
    return DepthCache(fallback);
  }

  const std::filesystem::path& dir() const noexcept { return dir_; }

  std::filesystem::path path_for(std::string_view frame_id, Eye eye) const {
    return dir_ / (std::string(frame_id) + "_" + std::string(eye_suffix(eye)) + ".png");
  }

  bool contains(std::string_view frame_id, Eye eye) const { return std::filesystem::exists(path_for(frame_id, eye)); }

  void store(std::string_view frame_id, Eye eye, const DepthMap& depth) const {
    if (!depth.normalized()) throw DataError("only normalized depth maps are cached");
    write_png_gray16(path_for(frame_id, eye), depth.width(), depth.height(), depth.data());
  }

  DepthMap load(std::string_view frame_id, Eye eye) const {
    auto path = path_for(frame_id, eye);
    if (!std::filesystem::exists(path)) throw DataError("depth cache miss: '" + path.string() + "'");
    auto g = read_png_gray16(path);
    return DepthMap(g.height, g.width, std::move(g.values), DepthConvention::relative_inverse, true);
  }

  /// Cached value if present, otherwise runs the backend and stores the result.
  DepthMap get_or_compute(std::string_view frame_id, Eye eye, const TensorImage& image,
                          const DepthBackend* backend) const {
    if (contains(frame_id, eye)) return load(frame_id, eye);
    if (!backend) throw DataError("no depth cached for '" + std::string(frame_id) + "' and no backend configured");
    store(frame_id, eye, estimate_depth(*backend, image));
    return load(frame_id, eye);  // quantized, so later cache hits return identical values
  }

 private:
  std::filesystem::path dir_;
};

}  // namespace stereoid
