#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace vlm::vision {

/// RGB image with values in [0, 1], stored row-major as (row, col, channel).
struct ImageGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  static constexpr std::size_t kChannels = 3;

  static ImageGrid filled(std::size_t height, std::size_t width, double r, double g, double b);
  bool empty() const { return height == 0 || width == 0; }
  double at(std::size_t row, std::size_t col, std::size_t ch) const {
    return pixels[(row * width + col) * kChannels + ch];
  }
  double& at(std::size_t row, std::size_t col, std::size_t ch) { return pixels[(row * width + col) * kChannels + ch]; }
};

/// Throws an input error for zero-sized images or a pixel buffer that does
/// not match height * width * 3.
void validate(const ImageGrid& img);

/// Bilinear resampling with half-pixel centers; same-size resizes return an
/// exact copy.
ImageGrid resize_bilinear(const ImageGrid& img, std::size_t height, std::size_t width);

ImageGrid crop(const ImageGrid& img, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

/// Binary PPM (P6, maxval 255). Pixel values are byte / 255.
ImageGrid read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const ImageGrid& img);

}  // namespace vlm::vision
