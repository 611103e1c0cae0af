// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "nerfus/core/common.hpp"

namespace nerfus {

/// Grayscale image, values in [0,1], row-major.
struct Image {
  int h = 0, w = 0;
  std::vector<double> v;

  Image() = default;
  Image(int h_, int w_, double fill = 0.0) : h(h_), w(w_), v(std::size_t(h_) * w_, fill) {}

  double& at(int r, int c) { return v[std::size_t(r) * w + c]; }
  double at(int r, int c) const { return v[std::size_t(r) * w + c]; }
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline Image load_png_gray(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed reading " + path);
  }
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG file: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  // Normalize any input to 8-bit grayscale.
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  buf.resize(std::size_t(h) * w);
  rows.resize(h);
  for (png_uint_32 r = 0; r < h; ++r) rows[r] = buf.data() + std::size_t(r) * w;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(static_cast<int>(h), static_cast<int>(w));
  for (std::size_t i = 0; i < buf.size(); ++i) img.v[i] = buf[i] / 255.0;
  return img;
}

inline void save_png_gray(const Image& img, const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write PNG file: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed writing " + path);
  }
  std::vector<unsigned char> buf(std::size_t(img.h) * img.w);
  std::vector<png_bytep> rows(img.h);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.w, img.h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(clamp01(img.v[i]) * 255.0));
  for (int r = 0; r < img.h; ++r) rows[r] = buf.data() + std::size_t(r) * img.w;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Raw float dump alongside PNG output (--float-out): "NUSF" magic,
/// i32 h, i32 w, then h*w little-endian f32 values row-major.
inline void save_float_raw(const Image& img, const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write float file: " + path);
  std::fwrite("NUSF", 1, 4, fp.get());
  std::int32_t h = img.h, w = img.w;
  std::fwrite(&h, 4, 1, fp.get());
  std::fwrite(&w, 4, 1, fp.get());
  std::vector<float> f(img.v.begin(), img.v.end());
  if (std::fwrite(f.data(), 4, f.size(), fp.get()) != f.size())
    throw IoError("short write on float file: " + path);
}

inline Image load_float_raw(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open float file: " + path);
  char magic[4];
  std::int32_t h = 0, w = 0;
  if (std::fread(magic, 1, 4, fp.get()) != 4 || std::string(magic, 4) != "NUSF" ||
      std::fread(&h, 4, 1, fp.get()) != 1 || std::fread(&w, 4, 1, fp.get()) != 1 ||
      h <= 0 || w <= 0)
    throw IoError("corrupt float file: " + path);
  std::vector<float> f(std::size_t(h) * w);
  if (std::fread(f.data(), 4, f.size(), fp.get()) != f.size())
    throw IoError("corrupt float file: " + path);
  Image img(h, w);
  for (std::size_t i = 0; i < f.size(); ++i) img.v[i] = f[i];
  return img;
}

}  // namespace nerfus
