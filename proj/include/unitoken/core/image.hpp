#pragma once

#include <filesystem>

#include "unitoken/autodiff/tensor.hpp"

namespace unitoken {

/// H×W×C image with values in [0, 1]. Pixels are rows in (y, x) row-major
/// order; channels are columns.
struct Image {
  Index height = 0;
  Index width = 0;
  Matrix<float> pixels;

  Image() = default;
  Image(Index h, Index w, Index channels = 3)
      : height(h), width(w), pixels(Matrix<float>::Zero(h * w, channels)) {}

  Index channels() const { return pixels.cols(); }
  bool empty() const { return height == 0 || width == 0; }

  auto at(Index y, Index x) { return pixels.row(y * width + x); }
  auto at(Index y, Index x) const { return pixels.row(y * width + x); }

  bool operator==(const Image& o) const {
    return height == o.height && width == o.width && pixels == o.pixels;
  }
};

/// Bilinear resampling with half-pixel centers.
Image resize_bilinear(const Image& src, Index height, Index width);

/// Copy of the window [y0, y0+h) × [x0, x0+w).
Image crop(const Image& src, Index y0, Index x0, Index h, Index w);

double mean_squared_error(const Image& a, const Image& b);

/// Binary PPM (P6, maxval 255). Values are quantized to 8 bits on write.
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

}  // namespace unitoken
