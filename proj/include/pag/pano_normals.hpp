#pragma once

// Global-to-camera surface normals for cylindrical panoramas. Each column is
// rotated about the vertical (z) axis by an angle proportional to its
// circular offset from the canonical column, whose wall normal faces the
// camera.
//
// Conventions: the camera-facing local normal is (0, 1, 0); a positive
// angle rotates (x, y) counter-clockwise. All-zero pixels are void and pass
// through untouched.

#include <cmath>
#include <numbers>

#include "pag/tensor.hpp"

namespace pag {

inline constexpr double kUnitNormTolerance = 1e-6;

// Signed offset x - x0 wrapped into [-W/2, W/2).
inline long long circular_offset(long long x, long long x0, long long width) {
  if (width <= 0) throw Error("panorama width must be positive");
  long long d = (x - x0) % width;
  if (d < 0) d += width;
  if (2 * d >= width) d -= width;
  return d;
}

inline double rotation_for_column(long long x, long long x0, long long width) {
  if (width <= 0) throw Error("panorama width must be positive");
  return 2.0 * std::numbers::pi * double(circular_offset(x, x0, width)) / double(width);
}

namespace detail {

inline void check_normal_map(const Tensor& map, bool require_unit) {
  if (map.rank() != 3 || map.channels() != 3) {
    throw Error("normal map must be 3 x H x W, got " + dims_to_string(map.dims()));
  }
  if (!require_unit) return;
  const std::size_t plane = map.height() * map.width();
  for (std::size_t p = 0; p < plane; ++p) {
    const double x = map[p], y = map[plane + p], z = map[2 * plane + p];
    if (x == 0.0 && y == 0.0 && z == 0.0) continue;
    const double n = std::sqrt(x * x + y * y + z * z);
    if (std::abs(n - 1.0) > kUnitNormTolerance) {
      throw Error("normal map pixel " + std::to_string(p) + " has norm " + std::to_string(n));
    }
  }
}

// Rotates the horizontal components of every column by sign * theta(x).
inline Tensor rotate_columns(const Tensor& map, long long x0, double sign) {
  const std::size_t h = map.height(), w = map.width(), plane = h * w;
  const auto width = static_cast<long long>(w);
  if (x0 < 0 || x0 >= width) throw Error("canonical column outside the panorama");
  Tensor out = map;
  for (std::size_t x = 0; x < w; ++x) {
    const double theta = sign * rotation_for_column(static_cast<long long>(x), x0, width);
    const double c = std::cos(theta), s = std::sin(theta);
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t p = y * w + x;
      const double nx = map[p], ny = map[plane + p];
      if (nx == 0.0 && ny == 0.0 && map[2 * plane + p] == 0.0) continue;
      out[p] = c * nx - s * ny;
      out[plane + p] = s * nx + c * ny;
    }
  }
  return out;
}

}  // namespace detail

inline Tensor globals_to_locals(const Tensor& map, long long x0) {
  detail::check_normal_map(map, true);
  return detail::rotate_columns(map, x0, 1.0);
}

// Undoes globals_to_locals for the same canonical column.
inline Tensor locals_to_globals(const Tensor& map, long long x0) {
  detail::check_normal_map(map, false);
  return detail::rotate_columns(map, x0, -1.0);
}

// Largest angle (degrees) between the maps produced by two canonical columns.
inline double compare_canonical_choices(const Tensor& map, long long x0a, long long x0b) {
  const Tensor a = globals_to_locals(map, x0a);
  const Tensor b = globals_to_locals(map, x0b);
  const std::size_t plane = map.height() * map.width();
  double worst = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      dot += a[c * plane + p] * b[c * plane + p];
      na += a[c * plane + p] * a[c * plane + p];
      nb += b[c * plane + p] * b[c * plane + p];
    }
    if (na == 0.0 || nb == 0.0) continue;
    const double cosang = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
    worst = std::max(worst, std::acos(cosang) * 180.0 / std::numbers::pi);
  }
  return worst;
}

}  // namespace pag
