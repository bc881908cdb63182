#pragma once

#include <stereoid/errors.hpp>

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace stereoid {

enum class ValueRange { unit, signed_unit };

inline float range_min(ValueRange r) { return r == ValueRange::unit ? 0.0f : -1.0f; }
inline float range_max(ValueRange /*r*/) { return 1.0f; }

/// Channels x height x width float image with a declared value range.
///
/// Immutable after construction; the constructor validates shape and that
/// every element lies inside the declared range.
class TensorImage {
 public:
  TensorImage(int channels, int height, int width, ValueRange range, std::vector<float> data)
      : channels_(channels), height_(height), width_(width), range_(range), data_(std::move(data)) {
    if (channels < 1 || height < 1 || width < 1)
      throw ShapeError("image dimensions must be positive, got " + dims_string());
    if (data_.size() != static_cast<std::size_t>(channels) * height * width)
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match " + dims_string());
    const float lo = range_min(range), hi = range_max(range);
    for (float v : data_) {
      if (!(v >= lo && v <= hi))
        throw DataError("pixel value " + std::to_string(v) + " outside declared range");
    }
  }

  static TensorImage filled(int channels, int height, int width, ValueRange range, float value) {
    return TensorImage(channels, height, width, range,
                       std::vector<float>(static_cast<std::size_t>(channels) * height * width, value));
  }

  int channels() const noexcept { return channels_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  ValueRange range() const noexcept { return range_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height_) * width_; }

  std::span<const float> data() const noexcept { return data_; }
  std::span<const float> plane(int c) const noexcept {
    return std::span<const float>(data_).subspan(c * plane_size(), plane_size());
  }
  float at(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }

  bool same_extent(const TensorImage& o) const noexcept { return height_ == o.height_ && width_ == o.width_; }
  bool same_shape(const TensorImage& o) const noexcept { return same_extent(o) && channels_ == o.channels_; }

  std::string dims_string() const {
    return std::to_string(channels_) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
  }

  friend bool operator==(const TensorImage& a, const TensorImage& b) {
    return a.same_shape(b) && a.range_ == b.range_ && a.data_ == b.data_;
  }

 private:
  int channels_;
  int height_;
  int width_;
  ValueRange range_;
  std::vector<float> data_;
};

enum class Label : int { issue = -1, normal = 1 };

inline int label_value(Label l) { return static_cast<int>(l); }

inline Label label_from_int(int v) {
  if (v == -1) return Label::issue;
  if (v == 1) return Label::normal;
  throw DataError("label must be -1 or 1, got " + std::to_string(v));
}

enum class Scope { view_level, object_level };

enum class Category {
  MonocularBlindness,
  ViewMisalignment,
  WarpedViews,
  AsymmetricViewingAngles,
  LightingShadowDiscrepancy,
  ShaderAbsence,
  MaterialTextureMismatch,
  PostProcessingInconsistency,
  ParticleVisualEffectVariation,
  ObjectOmission,
  UnilateralObjectRendering,
  ObjectPositionDiscrepancy,
  ObjectWarping,
  LevelOfDetailInconsistency,
  PartialObjectRendering,
  Other,
};

inline constexpr std::array<Category, 16> kAllCategories = {
    Category::MonocularBlindness,          Category::ViewMisalignment,
    Category::WarpedViews,                 Category::AsymmetricViewingAngles,
    Category::LightingShadowDiscrepancy,   Category::ShaderAbsence,
    Category::MaterialTextureMismatch,     Category::PostProcessingInconsistency,
    Category::ParticleVisualEffectVariation, Category::ObjectOmission,
    Category::UnilateralObjectRendering,   Category::ObjectPositionDiscrepancy,
    Category::ObjectWarping,               Category::LevelOfDetailInconsistency,
    Category::PartialObjectRendering,      Category::Other,
};

inline constexpr std::string_view category_name(Category c) {
  constexpr std::array<std::string_view, 16> names = {
      "MonocularBlindness",          "ViewMisalignment",
      "WarpedViews",                 "AsymmetricViewingAngles",
      "LightingShadowDiscrepancy",   "ShaderAbsence",
      "MaterialTextureMismatch",     "PostProcessingInconsistency",
      "ParticleVisualEffectVariation", "ObjectOmission",
      "UnilateralObjectRendering",   "ObjectPositionDiscrepancy",
      "ObjectWarping",               "LevelOfDetailInconsistency",
      "PartialObjectRendering",      "Other",
  };
  return names[static_cast<std::size_t>(c)];
}

inline Category parse_category(std::string_view name) {
  for (Category c : kAllCategories)
    if (category_name(c) == name) return c;
  throw DataError("unknown manifestation category '" + std::string(name) + "'");
}

/// The first four categories are view-level. Other is treated as view-level
/// when no target is involved, so callers may override it.
inline constexpr Scope category_scope(Category c) {
  switch (c) {
    case Category::MonocularBlindness:
    case Category::ViewMisalignment:
    case Category::WarpedViews:
    case Category::AsymmetricViewingAngles:
    case Category::Other:
      return Scope::view_level;
    default:
      return Scope::object_level;
  }
}

enum class FrameSource { captured, synthetic };

struct StereoFrame {
  TensorImage left;
  TensorImage right;
  std::string frame_id;
  FrameSource source = FrameSource::captured;
  std::optional<Label> label;  // nullopt means unlabeled
  std::optional<Category> category;

  StereoFrame(TensorImage l, TensorImage r, std::string id, FrameSource src = FrameSource::captured,
              std::optional<Label> lab = std::nullopt, std::optional<Category> cat = std::nullopt)
      : left(std::move(l)), right(std::move(r)), frame_id(std::move(id)), source(src), label(lab), category(cat) {
    if (!left.same_extent(right))
      throw ShapeError("left " + left.dims_string() + " and right " + right.dims_string() + " differ in extent");
    if (left.channels() != 3 || right.channels() != 3) throw ShapeError("stereo eyes must be 3-channel");
    if (source == FrameSource::synthetic && !label) throw DataError("synthetic frame '" + frame_id + "' needs a label");
  }
};

/// Stacks images along the channel axis in list order.
inline TensorImage concat_channels(std::span<const TensorImage> images) {
  if (images.empty()) throw ShapeError("concat_channels needs at least one image");
  const TensorImage& first = images.front();
  int channels = 0;
  for (const auto& img : images) {
    if (!img.same_extent(first))
      throw ShapeError("cannot concatenate " + img.dims_string() + " with " + first.dims_string());
    if (img.range() != first.range()) throw ShapeError("cannot concatenate images with different value ranges");
    channels += img.channels();
  }
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(channels) * first.plane_size());
  for (const auto& img : images) data.insert(data.end(), img.data().begin(), img.data().end());
  return TensorImage(channels, first.height(), first.width(), first.range(), std::move(data));
}

inline TensorImage concat_channels(std::initializer_list<TensorImage> images) {
  return concat_channels(std::span<const TensorImage>(images.begin(), images.size()));
}

/// Inverse of concat_channels given the per-part channel counts.
inline std::vector<TensorImage> split_channels(const TensorImage& image, std::span<const int> counts) {
  int total = 0;
  for (int c : counts) total += c;
  if (total != image.channels())
    throw ShapeError("split counts sum to " + std::to_string(total) + ", image has " +
                     std::to_string(image.channels()) + " channels");
  std::vector<TensorImage> parts;
  std::size_t offset = 0;
  for (int c : counts) {
    const std::size_t n = static_cast<std::size_t>(c) * image.plane_size();
    auto src = image.data().subspan(offset, n);
    parts.emplace_back(c, image.height(), image.width(), image.range(), std::vector<float>(src.begin(), src.end()));
    offset += n;
  }
  return parts;
}

/// Affine map between [0,1] and [-1,1].
inline TensorImage convert_range(const TensorImage& image, ValueRange target) {
  if (image.range() == target) return image;
  std::vector<float> out(image.data().begin(), image.data().end());
  if (target == ValueRange::signed_unit) {
    for (float& v : out) v = std::clamp(v * 2.0f - 1.0f, -1.0f, 1.0f);
  } else {
    for (float& v : out) v = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
  }
  return TensorImage(image.channels(), image.height(), image.width(), target, std::move(out));
}

}  // namespace stereoid
