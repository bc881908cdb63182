#pragma once

#include <stereoid/core.hpp>

#include <cmath>
#include <vector>

namespace stereoid {

/// Columns [x0, x0 + w) and rows [y0, y0 + h).
inline TensorImage crop(const TensorImage& img, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || w < 1 || h < 1 || x0 + w > img.width() || y0 + h > img.height())
    throw ShapeError("crop window (" + std::to_string(x0) + "," + std::to_string(y0) + "," + std::to_string(w) + "," +
                     std::to_string(h) + ") outside " + img.dims_string());
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(img.channels()) * w * h);
  for (int c = 0; c < img.channels(); ++c)
    for (int y = y0; y < y0 + h; ++y) {
      auto row = img.plane(c).subspan(static_cast<std::size_t>(y) * img.width() + x0, w);
      out.insert(out.end(), row.begin(), row.end());
    }
  return TensorImage(img.channels(), h, w, img.range(), std::move(out));
}

/// Places b to the right of a.
inline TensorImage hconcat(const TensorImage& a, const TensorImage& b) {
  if (a.height() != b.height() || a.channels() != b.channels() || a.range() != b.range())
    throw ShapeError("hconcat of " + a.dims_string() + " and " + b.dims_string());
  const int w = a.width() + b.width();
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(a.channels()) * a.height() * w);
  for (int c = 0; c < a.channels(); ++c)
    for (int y = 0; y < a.height(); ++y) {
      auto ra = a.plane(c).subspan(static_cast<std::size_t>(y) * a.width(), a.width());
      auto rb = b.plane(c).subspan(static_cast<std::size_t>(y) * b.width(), b.width());
      out.insert(out.end(), ra.begin(), ra.end());
      out.insert(out.end(), rb.begin(), rb.end());
    }
  return TensorImage(a.channels(), a.height(), w, a.range(), std::move(out));
}

/// Bilinear resampling with half-pixel centers and edge clamping.
inline TensorImage resize_bilinear(const TensorImage& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw ShapeError("resize target must be positive");
  if (out_w == img.width() && out_h == img.height()) return img;
  const double sx = static_cast<double>(img.width()) / out_w;
  const double sy = static_cast<double>(img.height()) / out_h;
  std::vector<int> x0(out_w), x1(out_w);
  std::vector<float> fx(out_w);
  for (int x = 0; x < out_w; ++x) {
    double src = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width() - 1));
    x0[x] = static_cast<int>(std::floor(src));
    x1[x] = std::min(x0[x] + 1, img.width() - 1);
    fx[x] = static_cast<float>(src - x0[x]);
  }
  std::vector<float> out(static_cast<std::size_t>(img.channels()) * out_w * out_h);
  const float lo = range_min(img.range()), hi = range_max(img.range());
  for (int c = 0; c < img.channels(); ++c) {
    auto p = img.plane(c);
    for (int y = 0; y < out_h; ++y) {
      double src = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height() - 1));
      int y0 = static_cast<int>(std::floor(src));
      int y1 = std::min(y0 + 1, img.height() - 1);
      float fy = static_cast<float>(src - y0);
      const float* r0 = p.data() + static_cast<std::size_t>(y0) * img.width();
      const float* r1 = p.data() + static_cast<std::size_t>(y1) * img.width();
      float* dst = out.data() + (static_cast<std::size_t>(c) * out_h + y) * out_w;
      for (int x = 0; x < out_w; ++x) {
        float top = r0[x0[x]] + (r0[x1[x]] - r0[x0[x]]) * fx[x];
        float bot = r1[x0[x]] + (r1[x1[x]] - r1[x0[x]]) * fx[x];
        dst[x] = std::clamp(top + (bot - top) * fy, lo, hi);
      }
    }
  }
  return TensorImage(img.channels(), out_h, out_w, img.range(), std::move(out));
}

}  // namespace stereoid
