#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "camforge/tensor.hpp"

namespace camforge {

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// Binary PGM (P5), maxval <= 255. Throws std::runtime_error on malformed input.
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// x / 255 per pixel, as a 1 x H x W tensor.
Tensor normalize_pixels(const GrayImage& image);

/// Values in [0,1] to bytes, rounding half up; out-of-range values saturate.
GrayImage quantize(std::span<const double> values, std::size_t height, std::size_t width);

/// Bilinear resize (half-pixel centres) of a C x H x W image.
Tensor resize_image(const Tensor& image, std::size_t height, std::size_t width);

}  // namespace camforge
