#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "posegen/common.hpp"
#include "posegen/tensor.hpp"

namespace posegen {

// Images on disk are 8-bit PNG (gray for 1 channel, RGB for 3). Pixel values
// map linearly between byte [0,255] and [-1,1]; the mapping round-trips
// byte-exactly.
inline unsigned char value_to_byte(double v) {
  double b = std::round((v + 1.0) * 0.5 * 255.0);
  if (b < 0.0) b = 0.0;
  if (b > 255.0) b = 255.0;
  return static_cast<unsigned char>(b);
}

inline float byte_to_value(unsigned char b) {
  return static_cast<float>(b) / 255.0f * 2.0f - 1.0f;
}

template <typename T>
void write_png(const std::string& path, const Tensor<T>& img) {
  check_arg(img.rank() == 3, "write_png: expected {C,H,W}");
  const std::int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  check_arg(C == 1 || C == 3, "write_png: channels must be 1 or 3");

  std::vector<unsigned char> bytes(static_cast<std::size_t>(C * H * W));
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w)
      for (std::int64_t c = 0; c < C; ++c)
        bytes[(h * W + w) * C + c] = value_to_byte(static_cast<double>(img.at3(c, h, w)));

  png_image im;
  std::memset(&im, 0, sizeof(im));
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(W);
  im.height = static_cast<png_uint_32>(H);
  im.format = (C == 1) ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, bytes.data(), static_cast<png_int_32>(W * C), nullptr))
    throw io_error("failed to write PNG '" + path + "': " + im.message);
}

// Reads a PNG and returns {channels,H,W} in [-1,1]. Gray files are replicated
// across the requested channel count; RGB files requested as 1 channel are
// averaged.
template <typename T = float>
Tensor<T> read_png(const std::string& path, int channels = 3) {
  check_arg(channels == 1 || channels == 3, "read_png: channels must be 1 or 3");
  if (!std::filesystem::exists(path)) throw io_error("no such file: " + path);

  png_image im;
  std::memset(&im, 0, sizeof(im));
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    throw io_error("failed to read PNG '" + path + "': " + im.message);
  im.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, bytes.data(), 0, nullptr))
    throw io_error("failed to decode PNG '" + path + "': " + im.message);

  const std::int64_t H = im.height, W = im.width;
  Tensor<T> out({channels, H, W});
  for (std::int64_t h = 0; h < H; ++h)
    for (std::int64_t w = 0; w < W; ++w) {
      const unsigned char* px = &bytes[(h * W + w) * 3];
      if (channels == 3) {
        for (int c = 0; c < 3; ++c) out.at3(c, h, w) = static_cast<T>(byte_to_value(px[c]));
      } else {
        float v = (byte_to_value(px[0]) + byte_to_value(px[1]) + byte_to_value(px[2])) / 3.0f;
        out.at3(0, h, w) = static_cast<T>(v);
      }
    }
  return out;
}

}  // namespace posegen
