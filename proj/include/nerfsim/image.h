#pragma once

#include <algorithm>
#include <cstring>
#include <vector>

#include "nerfsim/common.h"

namespace nerfsim {

// Row-major planar-free image: data[(y*width + x)*channels + c].
template <typename T>
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, T fill = T{})
      : width_(width), height_(height), channels_(channels),
        data_(size_t(width) * height * channels, fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }
  size_t size() const { return data_.size(); }

  T& at(int x, int y, int c = 0) {
    return data_[(size_t(y) * width_ + x) * channels_ + c];
  }
  const T& at(int x, int y, int c = 0) const {
    return data_[(size_t(y) * width_ + x) * channels_ + c];
  }

  bool contains(int x, int y) const {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  int width_ = 0, height_ = 0, channels_ = 0;
  std::vector<T> data_;
};

using ImageF = Image<float>;
using ImageD = Image<double>;
using ImageU8 = Image<uint8_t>;

// Bilinear sample of channel c at continuous pixel coordinates (x, y), where
// integer coordinates address pixel centers. Out-of-frame lookups clamp.
template <typename T>
double bilinear(const Image<T>& img, double x, double y, int c) {
  x = std::min(std::max(x, 0.0), double(img.width() - 1));
  y = std::min(std::max(y, 0.0), double(img.height() - 1));
  int x0 = int(std::floor(x));
  int y0 = int(std::floor(y));
  int x1 = std::min(x0 + 1, img.width() - 1);
  int y1 = std::min(y0 + 1, img.height() - 1);
  double fx = x - x0, fy = y - y0;
  double v00 = img.at(x0, y0, c), v10 = img.at(x1, y0, c);
  double v01 = img.at(x0, y1, c), v11 = img.at(x1, y1, c);
  return (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 +
         (1 - fx) * fy * v01 + fx * fy * v11;
}

inline ImageD to_gray(const ImageD& rgb) {
  ImageD g(rgb.width(), rgb.height(), 1);
  if (rgb.channels() == 1) return rgb;
  for (int y = 0; y < rgb.height(); ++y)
    for (int x = 0; x < rgb.width(); ++x)
      g.at(x, y) = 0.299 * rgb.at(x, y, 0) + 0.587 * rgb.at(x, y, 1) +
                   0.114 * rgb.at(x, y, 2);
  return g;
}

}  // namespace nerfsim
