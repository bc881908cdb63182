#pragma once

#include <stereoid/core.hpp>
#include <stereoid/image_ops.hpp>
#include <stereoid/png_io.hpp>
#include <stereoid/rng.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace stereoid {

enum class Split { train, val, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string frame_id;
  std::optional<std::string> sbs_path;
  std::optional<std::string> left_path;
  std::optional<std::string> right_path;
  std::optional<Label> label;
  std::optional<Category> category;
  Split split = Split::train;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

using SplitRatios = std::array<double, 3>;
inline constexpr SplitRatios kDefaultRatios = {0.90, 0.05, 0.05};

inline void validate_ratios(const SplitRatios& r) {
  for (double v : r)
    if (!(v >= 0.0)) throw ConfigError("split ratios must be nonnegative");
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  SplitRatios ratios = kDefaultRatios;

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
  }

  std::vector<ManifestEntry> of_split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }

  const ManifestEntry* find(std::string_view id) const {
    for (const auto& e : entries)
      if (e.frame_id == id) return &e;
    return nullptr;
  }

  void validate() const {
    validate_ratios(ratios);
    std::set<std::string> seen;
    for (const auto& e : entries) {
      if (!seen.insert(e.frame_id).second) throw DataError("duplicate frame_id '" + e.frame_id + "'");
      const bool pair = e.left_path.has_value() && e.right_path.has_value();
      if (e.sbs_path.has_value() == pair || e.left_path.has_value() != e.right_path.has_value())
        throw DataError("entry '" + e.frame_id + "' needs sbs_path or both left_path and right_path");
    }
  }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Left eye = columns [0, w/2), right eye = columns [w/2, w).
inline StereoFrame split_sbs(const TensorImage& screenshot, std::string frame_id = {}) {
  if (screenshot.width() % 2 != 0)
    throw ShapeError("side-by-side screenshot width " + std::to_string(screenshot.width()) + " is odd");
  if (screenshot.channels() != 3) throw ShapeError("side-by-side screenshot must be RGB");
  const int half = screenshot.width() / 2;
  return StereoFrame(crop(screenshot, 0, 0, half, screenshot.height()),
                     crop(screenshot, half, 0, half, screenshot.height()), std::move(frame_id));
}

enum class PreprocessMode { train, eval };

/// Per-eye target geometry. The default matches a 1024x576 side-by-side pair
/// cropped to 512x512; desk-scale runs shrink all three numbers.
struct PreprocessConfig {
  int eye_width = 512;
  int eye_height = 576;
  int crop = 512;

  void validate() const {
    if (eye_width < 1 || eye_height < 1 || crop < 1) throw ConfigError("preprocess sizes must be positive");
    if (crop > eye_width || crop > eye_height) throw ConfigError("crop must fit inside the resized eye");
  }
};

/// Resize each eye to eye_width x eye_height, then crop a square window at
/// identical coordinates in both eyes: random in train mode, centered in eval
/// mode. Eyes already at crop x crop or eye_width x eye_height are not resampled.
inline StereoFrame preprocess(const StereoFrame& frame, PreprocessMode mode, const PreprocessConfig& cfg,
                              std::uint64_t rng_seed) {
  cfg.validate();
  auto fit = [&](const TensorImage& eye) {
    if (eye.width() == cfg.crop && eye.height() == cfg.crop) return eye;
    return resize_bilinear(eye, cfg.eye_width, cfg.eye_height);
  };
  TensorImage left = fit(frame.left);
  TensorImage right = fit(frame.right);
  const int w = left.width(), h = left.height();
  int x0 = (w - cfg.crop) / 2, y0 = (h - cfg.crop) / 2;
  if (mode == PreprocessMode::train) {
    Rng rng(rng_seed);
    x0 = rng.uniform_int(0, w - cfg.crop);
    y0 = rng.uniform_int(0, h - cfg.crop);
  }
  return StereoFrame(crop(left, x0, y0, cfg.crop, cfg.crop), crop(right, x0, y0, cfg.crop, cfg.crop), frame.frame_id,
                     frame.source, frame.label, frame.category);
}

namespace detail {
inline std::size_t floor_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}
}  // namespace detail

/// Seeded shuffle, then floor-sized val/test splits; the remainder goes to train.
inline DatasetManifest partition(const DatasetManifest& manifest, const SplitRatios& ratios = kDefaultRatios,
                                 std::uint64_t seed = 0) {
  validate_ratios(ratios);
  if (manifest.entries.empty()) throw DataError("cannot partition an empty manifest");
  const std::size_t n = manifest.entries.size();
  const std::size_t n_val = detail::floor_count(ratios[1], n);
  const std::size_t n_test = detail::floor_count(ratios[2], n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span(order));
  DatasetManifest out = manifest;
  out.seed = seed;
  out.ratios = ratios;
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t k = 0; k < n; ++k) {
    Split s = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
    out.entries[order[k]].split = s;
  }
  return out;
}

/// Keeps a seeded uniform subset of n training entries; other splits untouched.
inline DatasetManifest subsample_training(const DatasetManifest& manifest, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i)
    if (manifest.entries[i].split == Split::train) train.push_back(i);
  if (n > train.size())
    throw DataError("requested " + std::to_string(n) + " training entries, only " + std::to_string(train.size()) +
                    " available");
  Rng rng(seed);
  rng.shuffle(std::span(train));
  std::vector<bool> keep(manifest.entries.size(), true);
  for (std::size_t k = n; k < train.size(); ++k) keep[train[k]] = false;
  DatasetManifest out = manifest;
  out.entries.clear();
  for (std::size_t i = 0; i < manifest.entries.size(); ++i)
    if (keep[i]) out.entries.push_back(manifest.entries[i]);
  return out;
}

inline nlohmann::json entry_to_json(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["frame_id"] = e.frame_id;
  if (e.sbs_path) {
    j["sbs_path"] = *e.sbs_path;
  } else {
    j["left_path"] = e.left_path.value_or("");
    j["right_path"] = e.right_path.value_or("");
  }
  j["label"] = e.label ? nlohmann::json(label_value(*e.label)) : nlohmann::json(nullptr);
  j["category"] = e.category ? nlohmann::json(std::string(category_name(*e.category))) : nlohmann::json(nullptr);
  j["split"] = std::string(split_name(e.split));
  return j;
}

inline std::filesystem::path manifest_meta_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".meta.json";
  return p;
}

/// One JSON object per line; seed and ratios go to a `.meta.json` sidecar.
inline void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  manifest.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
    for (const auto& e : manifest.entries) out << nlohmann::ordered_json(entry_to_json(e)).dump() << '\n';
  }
  nlohmann::ordered_json meta;
  meta["seed"] = manifest.seed;
  meta["ratios"] = manifest.ratios;
  std::ofstream m(manifest_meta_path(path), std::ios::binary);
  m << meta.dump(2) << '\n';
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  DatasetManifest manifest;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = [&](const std::string& msg) {
      return DataError(path.string() + ":" + std::to_string(lineno) + ": " + msg);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw where(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw where("record is not an object");
    ManifestEntry e;
    try {
      e.frame_id = j.at("frame_id").get<std::string>();
      if (j.contains("sbs_path")) e.sbs_path = j["sbs_path"].get<std::string>();
      if (j.contains("left_path")) e.left_path = j["left_path"].get<std::string>();
      if (j.contains("right_path")) e.right_path = j["right_path"].get<std::string>();
      const auto& lab = j.at("label");
      if (!lab.is_null()) e.label = label_from_int(lab.get<int>());
      const auto& cat = j.at("category");
      if (!cat.is_null()) e.category = parse_category(cat.get<std::string>());
      e.split = parse_split(j.at("split").get<std::string>());
    } catch (const nlohmann::json::exception& ex) {
      throw where(std::string("field error: ") + ex.what());
    } catch (const DataError& ex) {
      throw where(ex.what());
    }
    if (!seen.insert(e.frame_id).second) throw where("duplicate frame_id '" + e.frame_id + "'");
    if (e.sbs_path.has_value() == (e.left_path.has_value() || e.right_path.has_value()) ||
        e.left_path.has_value() != e.right_path.has_value())
      throw where("field error: need sbs_path or both left_path and right_path");
    manifest.entries.push_back(std::move(e));
  }
  const auto meta_path = manifest_meta_path(path);
  if (std::filesystem::exists(meta_path)) {
    std::ifstream m(meta_path);
    try {
      auto meta = nlohmann::json::parse(m);
      manifest.seed = meta.at("seed").get<std::uint64_t>();
      manifest.ratios = meta.at("ratios").get<SplitRatios>();
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(meta_path.string() + ": " + ex.what());
    }
  }
  manifest.validate();
  return manifest;
}

inline std::filesystem::path resolve_path(const std::filesystem::path& root, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : root / path;
}

/// Loads the raw (unpreprocessed) stereo pair referenced by an entry; relative
/// paths resolve against `root`, normally the manifest's directory.
inline StereoFrame load_frame(const ManifestEntry& e, const std::filesystem::path& root) {
  if (e.sbs_path) {
    StereoFrame f = split_sbs(read_png_rgb(resolve_path(root, *e.sbs_path)), e.frame_id);
    return StereoFrame(std::move(f.left), std::move(f.right), e.frame_id, FrameSource::captured, e.label, e.category);
  }
  return StereoFrame(read_png_rgb(resolve_path(root, *e.left_path)), read_png_rgb(resolve_path(root, *e.right_path)),
                     e.frame_id, FrameSource::captured, e.label, e.category);
}

}  // namespace stereoid
