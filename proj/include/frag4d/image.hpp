#pragma once

#include <cstddef>
#include <vector>

namespace frag4d {

/// Row-major H x W x C float image; values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * height;
  }
  std::size_t offset(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c = 0) { return data[offset(x, y, c)]; }
  double at(int x, int y, int c = 0) const { return data[offset(x, y, c)]; }

  bool same_shape(const Image& other) const {
    return width == other.width && height == other.height &&
           channels == other.channels;
  }
  bool empty() const { return data.empty(); }
};

}  // namespace frag4d
