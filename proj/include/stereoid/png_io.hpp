#pragma once

#include <stereoid/core.hpp>

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace stereoid {

namespace png_detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* where = static_cast<std::string*>(png_get_error_ptr(png));
  if (where) *where = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

struct Decoded {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;  // row-major interleaved
};

inline Decoded decode(const std::filesystem::path& path, bool want_gray16) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open PNG '" + path.string() + "'");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DataError("'" + path.string() + "' is not a PNG file");

  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  Decoded out;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("PNG decode failed for '" + path.string() + "': " + err);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (want_gray16) {
    if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_GRAY_ALPHA) {
      png_destroy_read_struct(&png, &info, nullptr);
      throw DataError("'" + path.string() + "' is not a grayscale PNG");
    }
    if (depth < 16) png_set_expand_16(png);
    png_set_swap(png);  // little-endian host order for uint16 copies
  } else {
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);

  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
  out.samples.resize(n);
  if (out.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i)
      out.samples[i] = static_cast<std::uint16_t>(buffer[2 * i] | (buffer[2 * i + 1] << 8));
  } else {
    for (std::size_t i = 0; i < n; ++i) out.samples[i] = buffer[i];
  }
  return out;
}

inline void encode(const std::filesystem::path& path, int width, int height, int channels, int bit_depth,
                   const std::vector<unsigned char>& buffer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    FilePtr fp(std::fopen(tmp.c_str(), "wb"));
    if (!fp) throw DataError("cannot write PNG '" + path.string() + "'");
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw DataError("PNG encode failed for '" + path.string() + "': " + err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, bit_depth, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
    for (int y = 0; y < height; ++y)
      png_write_row(png, const_cast<png_bytep>(buffer.data() + y * rowbytes));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace png_detail

/// Reads an 8-bit PNG (gray, RGB, palette or with alpha) as a 3-channel unit-range image.
inline TensorImage read_png_rgb(const std::filesystem::path& path) {
  auto dec = png_detail::decode(path, false);
  const std::size_t plane = static_cast<std::size_t>(dec.width) * dec.height;
  std::vector<float> data(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) data[c * plane + i] = dec.samples[i * 3 + c] / 255.0f;
  return TensorImage(3, dec.height, dec.width, ValueRange::unit, std::move(data));
}

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Writes a 3-channel image as 8-bit RGB. Signed images are mapped to unit range first.
inline void write_png_rgb(const std::filesystem::path& path, const TensorImage& image) {
  if (image.channels() != 3) throw ShapeError("RGB PNG needs a 3-channel image, got " + image.dims_string());
  TensorImage img = convert_range(image, ValueRange::unit);
  const std::size_t plane = img.plane_size();
  std::vector<unsigned char> buf(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) buf[i * 3 + c] = to_u8(img.data()[c * plane + i]);
  png_detail::encode(path, img.width(), img.height(), 3, 8, buf);
}

/// 16-bit grayscale plane, values in [0,1] stored as round(v * 65535).
inline void write_png_gray16(const std::filesystem::path& path, int width, int height, std::span<const float> values) {
  if (values.size() != static_cast<std::size_t>(width) * height) throw ShapeError("gray16 buffer size mismatch");
  std::vector<unsigned char> buf(values.size() * 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto q = static_cast<std::uint16_t>(std::lround(std::clamp(values[i], 0.0f, 1.0f) * 65535.0f));
    buf[2 * i] = static_cast<unsigned char>(q >> 8);  // PNG is big-endian
    buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  png_detail::encode(path, width, height, 1, 16, buf);
}

struct Gray16 {
  int width = 0;
  int height = 0;
  std::vector<float> values;
};

inline Gray16 read_png_gray16(const std::filesystem::path& path) {
  auto dec = png_detail::decode(path, true);
  Gray16 g{dec.width, dec.height, std::vector<float>(dec.samples.size())};
  for (std::size_t i = 0; i < dec.samples.size(); ++i) g.values[i] = dec.samples[i] / 65535.0f;
  return g;
}

}  // namespace stereoid
