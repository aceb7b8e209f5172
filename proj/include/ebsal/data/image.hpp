#pragma once

// Planar images in [0,1] with PNG file I/O and bilinear resizing.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebsal/tensor/tensor.hpp"

namespace ebsal {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Channel-major image, values nominally in [0,1].
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  std::size_t pixels() const { return height * width; }

  template <typename T>
  Tensor<T> tensor() const {
    return Tensor<T>({channels, height, width}, std::vector<T>(data.begin(), data.end()));
  }

  template <typename T>
  static Image from_tensor(const Tensor<T>& t) {
    if (t.rank() != 3) throw DimensionError("image tensor must be (c, h, w), got " + shape_str(t.shape()));
    Image im(t.dim(0), t.dim(1), t.dim(2));
    for (std::size_t i = 0; i < t.size(); ++i) im.data[i] = static_cast<double>(t[i]);
    return im;
  }
};

// Round-half-up quantization of a [0,1] value to [0, maxval].
inline std::uint32_t quantize(double v, std::uint32_t maxval) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint32_t>(std::floor(c * maxval + 0.5));
}

namespace detail {

struct PngFile {
  std::FILE* f = nullptr;
  ~PngFile() {
    if (f) std::fclose(f);
  }
};

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

inline void png_warn(png_structp, png_const_charp) {}

}  // namespace detail

// Reads an 8- or 16-bit PNG. Palette and low-bit-depth images are expanded,
// alpha is dropped. Gray files give one channel, colour files three.
inline Image read_png(const std::filesystem::path& path) {
  detail::PngFile file;
  file.f = std::fopen(path.c_str(), "rb");
  if (!file.f) throw DataError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw DataError(path.string() + " is not a PNG file");
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_fail, detail::png_warn);
  if (!png) throw DataError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png_create_info_struct failed");
  }
  Image im;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("failed to decode " + path.string() + ": " + error);
  }
  png_init_io(png, file.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const auto w = png_get_image_width(png, info);
  const auto h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const std::size_t ch = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * h);
  rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  im = Image(ch, h, w);
  const double scale = depth == 16 ? 1.0 / 65535.0 : 1.0 / 255.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t k = x * ch + c;
        const unsigned v = depth == 16 ? (unsigned{rows[y][2 * k]} << 8) | rows[y][2 * k + 1] : rows[y][k];
        im.at(c, y, x) = v * scale;
      }
  return im;
}

// Writes a 1- or 3-channel image, quantized with round-half-up.
inline void write_png(const std::filesystem::path& path, const Image& im, int bit_depth = 8) {
  if (im.channels != 1 && im.channels != 3) throw DataError("PNG output needs 1 or 3 channels");
  if (bit_depth != 8 && bit_depth != 16) throw DataError("PNG bit depth must be 8 or 16");
  if (im.height == 0 || im.width == 0) throw DataError("cannot write an empty image");
  detail::PngFile file;
  file.f = std::fopen(path.c_str(), "wb");
  if (!file.f) throw DataError("cannot open " + path.string() + " for writing");

  const std::size_t ch = im.channels, bytes = bit_depth / 8;
  const std::uint32_t maxval = bit_depth == 16 ? 65535 : 255;
  std::vector<png_byte> buffer(im.height * im.width * ch * bytes);
  std::vector<png_bytep> rows(im.height);
  for (std::size_t y = 0; y < im.height; ++y) {
    rows[y] = buffer.data() + y * im.width * ch * bytes;
    for (std::size_t x = 0; x < im.width; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        const auto q = quantize(im.at(c, y, x), maxval);
        png_bytep p = rows[y] + (x * ch + c) * bytes;
        if (bytes == 2) {
          p[0] = static_cast<png_byte>(q >> 8);
          p[1] = static_cast<png_byte>(q & 0xFF);
        } else {
          p[0] = static_cast<png_byte>(q);
        }
      }
  }

  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_fail, detail::png_warn);
  if (!png) throw DataError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed to encode " + path.string() + ": " + error);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(im.width), static_cast<png_uint_32>(im.height), bit_depth,
               ch == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Bilinear resampling with half-pixel centres and edge clamping.
inline Image resize_bilinear(const Image& src, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DataError("resize target must be non-empty");
  if (src.height == height && src.width == width) return src;
  Image out(src.channels, height, width);
  const double sy = static_cast<double>(src.height) / height, sx = static_cast<double>(src.width) / width;
  auto coord = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, n - 1);
    t = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double ty;
    coord((y + 0.5) * sy - 0.5, src.height, y0, y1, ty);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double tx;
      coord((x + 0.5) * sx - 0.5, src.width, x0, x1, tx);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(c, y0, x0) * (1 - tx) + src.at(c, y0, x1) * tx;
        const double bottom = src.at(c, y1, x0) * (1 - tx) + src.at(c, y1, x1) * tx;
        out.at(c, y, x) = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

// Gray image to three identical channels; three-channel input is returned as is.
inline Image to_rgb(const Image& im) {
  if (im.channels == 3) return im;
  if (im.channels != 1) throw DataError("expected a gray or RGB image");
  Image out(3, im.height, im.width);
  for (std::size_t c = 0; c < 3; ++c) std::copy(im.data.begin(), im.data.end(), out.data.begin() + c * im.pixels());
  return out;
}

// Luma of an RGB image; gray input is returned as is.
inline Image to_gray(const Image& im) {
  if (im.channels == 1) return im;
  if (im.channels != 3) throw DataError("expected a gray or RGB image");
  Image out(1, im.height, im.width);
  for (std::size_t i = 0; i < im.pixels(); ++i) {
    out.data[i] = 0.299 * im.data[i] + 0.587 * im.data[im.pixels() + i] + 0.114 * im.data[2 * im.pixels() + i];
  }
  return out;
}

}  // namespace ebsal
