#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "unigaze/common.hpp"

namespace unigaze {

/// H x W x C image, row-major with interleaved channels, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h <= 0 || w <= 0 || c <= 0) throw DataError("Image: extents must be positive");
  }

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int y, int x, int c) { return data[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data[index(y, x, c)]; }

  bool empty() const { return data.empty(); }
  bool operator==(const Image&) const = default;
};

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes an 8-bit PNG (gray, RGB). Values are clamped and rounded.
inline void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) {
    throw DataError("write_png: only 1 or 3 channels supported, got " +
                    std::to_string(img.channels));
  }
  std::vector<std::uint8_t> bytes(img.data.size());
  std::transform(img.data.begin(), img.data.end(), bytes.begin(), to_u8);

  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(img.width);
  out.height = static_cast<png_uint_32>(img.height);
  out.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&out, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string msg = out.message;
    png_image_free(&out);
    throw DataError("write_png: " + path.string() + ": " + msg);
  }
}

/// Reads a PNG as RGB in [0, 1].
inline Image read_png(const std::filesystem::path& path) {
  png_image in{};
  in.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&in, path.c_str())) {
    throw DataError("read_png: " + path.string() + ": " + in.message);
  }
  in.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(in));
  if (!png_image_finish_read(&in, nullptr, bytes.data(), 0, nullptr)) {
    std::string msg = in.message;
    png_image_free(&in);
    throw DataError("read_png: " + path.string() + ": " + msg);
  }
  Image img(static_cast<int>(in.height), static_cast<int>(in.width), 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

/// Bilinear resize (align-corners off, pixel centers at +0.5).
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  Image dst(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

}  // namespace unigaze
