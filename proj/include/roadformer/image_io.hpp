// SPDX-License-Identifier: Apache-2.0
//
// Minimal PNG reading and writing over libpng: 8-bit gray/RGB, 16-bit gray,
// and 8-bit palette images whose indices are returned unexpanded.
#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "roadformer/errors.hpp"
#include "roadformer/grid.hpp"

namespace roadformer {

using Rgb8 = std::array<std::uint8_t, 3>;

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;   // samples per pixel after reading (palette images: 1)
  int bit_depth = 8;  // 8 or 16
  bool palette = false;
  std::vector<std::uint16_t> samples;  // interleaved, row-major
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path);
  return f;
}

/// color_type is a PNG_COLOR_TYPE_*; `samples` interleaved row-major.
inline void write_png(const std::string& path, int width, int height, int color_type, int bit_depth,
                      const std::vector<std::uint16_t>& samples, const std::vector<Rgb8>* palette = nullptr) {
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width) * height * channels * (bit_depth / 8));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (bit_depth == 16) {
      bytes[2 * i] = static_cast<std::uint8_t>(samples[i] >> 8);
      bytes[2 * i + 1] = static_cast<std::uint8_t>(samples[i] & 0xff);
    } else {
      bytes[i] = static_cast<std::uint8_t>(samples[i]);
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  const std::size_t stride = bytes.size() / static_cast<std::size_t>(height);
  for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + y * stride;
  std::vector<png_color> pal;
  if (palette)
    for (const auto& c : *palette) pal.push_back({c[0], c[1], c[2]});

  FilePtr file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (!pal.empty()) png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline PngImage read_png(const std::string& path) {
  detail::FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path);
  std::array<unsigned char, 8> sig{};
  if (std::fread(sig.data(), 1, sig.size(), file.get()) != sig.size() || png_sig_cmp(sig.data(), 0, sig.size()))
    throw FormatError("not a PNG file: " + path);

  PngImage img;
  std::vector<std::uint8_t> bytes;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt PNG: " + path);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, static_cast<int>(sig.size()));
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    img.palette = true;
    if (depth < 8) png_set_packing(png);
    depth = 8;
  } else if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    depth = 8;
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = depth;
  const std::size_t stride = png_get_rowbytes(png, info);
  bytes.resize(stride * static_cast<std::size_t>(img.height));
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.samples[i] = depth == 16 ? static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]) : bytes[i];
  return img;
}

inline void write_png_gray16(const std::string& path, const Grid<std::uint16_t>& g) {
  detail::write_png(path, g.width, g.height, PNG_COLOR_TYPE_GRAY, 16, g.data);
}

/// `rgb` is a planar 3-channel grid of bytes.
inline void write_png_rgb8(const std::string& path, const Grid<std::uint8_t>& rgb) {
  std::vector<std::uint16_t> s(rgb.plane() * 3);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x)
      for (int c = 0; c < 3; ++c) s[(static_cast<std::size_t>(y) * rgb.width + x) * 3 + c] = rgb.at(y, x, c);
  detail::write_png(path, rgb.width, rgb.height, PNG_COLOR_TYPE_RGB, 8, s);
}

inline void write_png_palette(const std::string& path, const Grid<std::uint8_t>& indices,
                              const std::vector<Rgb8>& palette) {
  std::vector<Rgb8> pal = palette;
  std::uint8_t max_index = 0;
  for (auto v : indices.data) max_index = std::max(max_index, v);
  if (pal.size() <= max_index) pal.resize(static_cast<std::size_t>(max_index) + 1, Rgb8{255, 255, 255});
  std::vector<std::uint16_t> s(indices.data.begin(), indices.data.end());
  detail::write_png(path, indices.width, indices.height, PNG_COLOR_TYPE_PALETTE, 8, s, &pal);
}

inline Grid<std::uint16_t> read_png_gray16(const std::string& path) {
  auto img = read_png(path);
  if (img.channels != 1 || img.bit_depth != 16)
    throw FormatError(path + ": expected 16-bit single-channel PNG");
  Grid<std::uint16_t> g(img.height, img.width);
  g.data = std::move(img.samples);
  return g;
}

/// Returns a planar 3-channel byte grid.
inline Grid<std::uint8_t> read_png_rgb8(const std::string& path) {
  auto img = read_png(path);
  if (img.channels != 3 || img.bit_depth != 8 || img.palette) throw FormatError(path + ": expected 8-bit RGB PNG");
  Grid<std::uint8_t> g(img.height, img.width, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        g.at(y, x, c) = static_cast<std::uint8_t>(img.samples[(static_cast<std::size_t>(y) * img.width + x) * 3 + c]);
  return g;
}

/// Palette indices (or 8-bit gray values) of a single-channel image.
inline Grid<std::uint8_t> read_png_indices(const std::string& path) {
  auto img = read_png(path);
  if (img.channels != 1 || img.bit_depth != 8) throw FormatError(path + ": expected 8-bit indexed PNG");
  Grid<std::uint8_t> g(img.height, img.width);
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = static_cast<std::uint8_t>(img.samples[i]);
  return g;
}

}  // namespace roadformer
