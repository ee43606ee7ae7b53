// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace roadformer {

/// Planar (channel-major) H x W x C raster.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, int c = 1, T fill = T{})
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t index(int y, int x, int c = 0) const {
    return (static_cast<std::size_t>(c) * height + y) * width + x;
  }
  T& at(int y, int x, int c = 0) { return data[index(y, x, c)]; }
  const T& at(int y, int x, int c = 0) const { return data[index(y, x, c)]; }

  bool in_bounds(int y, int x) const { return y >= 0 && y < height && x >= 0 && x < width; }

  template <typename U>
  bool same_size(const Grid<U>& other) const {
    return height == other.height && width == other.width;
  }

  bool operator==(const Grid&) const = default;
};

using LabelMap = Grid<std::uint8_t>;
using Mask = Grid<std::uint8_t>;

}  // namespace roadformer
