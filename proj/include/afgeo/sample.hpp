#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afgeo/box.hpp"
#include "afgeo/gpe.hpp"
#include "afgeo/tensor.hpp"

namespace afgeo {

/// 8-bit planar image, channel-major [C,H,W]. Pixel value v reads as v/255.
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w) : channels(c), height(h), width(w), pixels(c * h * w, 0) {}

  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  double value(std::size_t c, std::size_t y, std::size_t x) const { return at(c, y, x) / 255.0; }

  bool operator==(const Image&) const = default;
};

/// One query/reference pair.
struct GeoSample {
  std::string sample_id;
  Image query;
  ClickPoint click;  // query-image pixels
  Image reference;
  Box gt_box;  // reference-image pixels

  bool operator==(const GeoSample&) const = default;
};

/// Network input: values mapped to [-1, 1].
template <typename T>
Tensor<T> image_tensor(const Image& image);

}  // namespace afgeo
