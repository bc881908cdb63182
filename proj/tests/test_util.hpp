#pragma once

#include <stereoid/core.hpp>
#include <stereoid/rng.hpp>

#include <filesystem>
#include <string>
#include <unistd.h>

namespace stereoid::testutil {

inline TensorImage random_image(Rng& rng, int c, int h, int w, ValueRange range = ValueRange::unit) {
  std::vector<float> v(static_cast<std::size_t>(c) * h * w);
  const double lo = range_min(range);
  for (float& x : v) x = static_cast<float>(rng.uniform(lo, 1.0));
  return TensorImage(c, h, w, range, std::move(v));
}

/// Fresh per-process scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("stereoid_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace stereoid::testutil
