#pragma once

// 8-bit RGB images on disk (PNG, binary PPM) and their [-1, 1] tensor form.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "idn/tensor.hpp"

namespace idn {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major
};

namespace detail {

inline bool has_suffix(const std::string& s, const char* suf) {
  const std::size_t n = std::strlen(suf);
  if (s.size() < n) return false;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::tolower(static_cast<unsigned char>(s[s.size() - n + i])) != suf[i]) return false;
  }
  return true;
}

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

inline Image8 read_png(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ImageError("cannot open image '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageError("libpng initialisation failed");
  }
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("malformed PNG '" + path + "'");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != img.width * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("unsupported PNG layout in '" + path + "'");
  }
  img.rgb.resize(img.width * img.height * 3);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.rgb.data() + y * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png(const std::string& path, const Image8& img) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ImageError("cannot write image '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("failed writing PNG '" + path + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.rgb.data() + y * img.width * 3);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Binary PPM header token, skipping whitespace and comments.
inline std::size_t ppm_token(std::istream& in, const std::string& path) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  std::size_t v = 0;
  bool any = false;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    any = true;
    ch = in.get();
  }
  if (!any) throw ImageError("malformed PPM header in '" + path + "'");
  return v;  // the single whitespace after the token has been consumed
}

inline Image8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image '" + path + "'");
  char magic[2] = {};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '6') throw ImageError("'" + path + "' is not a binary (P6) PPM");
  Image8 img;
  img.width = ppm_token(in, path);
  img.height = ppm_token(in, path);
  const std::size_t maxval = ppm_token(in, path);
  if (maxval != 255) throw ImageError("only 8-bit PPM is supported ('" + path + "')");
  img.rgb.resize(img.width * img.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!in) throw ImageError("truncated PPM '" + path + "'");
  return img;
}

inline void write_ppm(const std::string& path, const Image8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write image '" + path + "'");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw ImageError("failed writing '" + path + "'");
}

}  // namespace detail

inline bool is_image_path(const std::string& path) {
  return detail::has_suffix(path, ".png") || detail::has_suffix(path, ".ppm");
}

inline Image8 read_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw ImageError("cannot open image '" + path + "'");
  unsigned char sig[8] = {};
  probe.read(reinterpret_cast<char*>(sig), 8);
  probe.close();
  if (png_sig_cmp(sig, 0, 8) == 0) return detail::read_png(path);
  if (sig[0] == 'P' && sig[1] == '6') return detail::read_ppm(path);
  throw ImageError("'" + path + "' is neither PNG nor binary PPM");
}

inline void write_image(const std::string& path, const Image8& img) {
  if (img.rgb.size() != img.width * img.height * 3) throw ImageError("image buffer size does not match its dims");
  if (detail::has_suffix(path, ".png")) return detail::write_png(path, img);
  if (detail::has_suffix(path, ".ppm")) return detail::write_ppm(path, img);
  throw ImageError("output '" + path + "' needs a .png or .ppm extension");
}

// Byte b -> 2b/255 - 1.
inline Tensor to_tensor(const Image8& img) {
  Tensor t({1, 3, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        t.at(0, c, y, x) = static_cast<float>(2.0 * img.rgb[(y * img.width + x) * 3 + c] / 255.0 - 1.0);
      }
    }
  }
  return t;
}

// Clamp to [-1, 1], map to [0, 255], round half to even.
inline std::uint8_t to_byte(float v) {
  const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
  const double b = (c + 1.0) * 127.5;
  double r = std::floor(b);
  const double frac = b - r;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(r, 2.0) != 0.0)) r += 1.0;
  return static_cast<std::uint8_t>(r);
}

inline Image8 from_tensor(const Tensor& t, std::size_t n = 0) {
  const Dims d = t.dims();
  if (d.c != 3) shape_fail("image tensor needs 3 channels, got ", d.c);
  if (n >= d.n) shape_fail("image index ", n, " out of batch ", d.n);
  Image8 img{d.w, d.h, std::vector<std::uint8_t>(d.w * d.h * 3)};
  for (std::size_t y = 0; y < d.h; ++y) {
    for (std::size_t x = 0; x < d.w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.rgb[(y * d.w + x) * 3 + c] = to_byte(t.at(n, c, y, x));
    }
  }
  return img;
}

inline Tensor load_image(const std::string& path) { return to_tensor(read_image(path)); }
inline void save_image(const std::string& path, const Tensor& t) { write_image(path, from_tensor(t)); }

// Masks are stored as images; channel 0 mapped b -> b/255 gives (1, 1, H, W) in [0, 1].
inline Tensor load_mask(const std::string& path) {
  const Image8 img = read_image(path);
  Tensor m({1, 1, img.height, img.width});
  for (std::size_t i = 0; i < img.width * img.height; ++i) m[i] = static_cast<float>(img.rgb[i * 3] / 255.0);
  return m;
}

inline void save_mask(const std::string& path, const Tensor& m) {
  const Dims d = m.dims();
  if (d.c != 1) shape_fail("mask tensor needs 1 channel, got ", d.c);
  Image8 img{d.w, d.h, std::vector<std::uint8_t>(d.w * d.h * 3)};
  for (std::size_t i = 0; i < d.w * d.h; ++i) {
    const std::uint8_t b = to_byte(static_cast<float>(2.0 * std::clamp(static_cast<double>(m[i]), 0.0, 1.0) - 1.0));
    img.rgb[i * 3] = img.rgb[i * 3 + 1] = img.rgb[i * 3 + 2] = b;
  }
  write_image(path, img);
}

}  // namespace idn
