#pragma once

// Binary PGM/PPM writers and CSV helpers.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "pag/tensor.hpp"

namespace pag::harness {

inline std::uint8_t to_byte(double v) {
  const double r = std::round(v);
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

// P5 from an H x W map already scaled to [0, 255].
inline void write_pgm(const std::string& path, const Tensor& grey) {
  const std::size_t h = grey.height(), w = grey.width();
  if (grey.size() != h * w) throw Error("write_pgm: expected a single-channel map");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  for (double v : grey.data()) os.put(static_cast<char>(to_byte(v)));
  if (!os) throw Error("failed writing " + path);
}

// P6 from a 3 x H x W map already scaled to [0, 255].
inline void write_ppm(const std::string& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.channels() != 3) throw Error("write_ppm: expected 3 x H x W");
  const std::size_t h = rgb.height(), w = rgb.width(), plane = h * w;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) os.put(static_cast<char>(to_byte(rgb[c * plane + p])));
  if (!os) throw Error("failed writing " + path);
}

// Reads a P5 file back as an H x W tensor of byte values.
inline Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (!is || magic != "P5" || maxval != 255 || w == 0 || h == 0) {
    throw Error("not an 8-bit P5 file: " + path);
  }
  is.get();
  Tensor t({h, w});
  for (auto& v : t.storage()) {
    const int c = is.get();
    if (c == EOF) throw Error("truncated PGM: " + path);
    v = double(c);
  }
  return t;
}

// Unit normals in [-1, 1] to bytes: round(127.5 (n + 1)).
inline Tensor normals_to_rgb(const Tensor& normals) {
  Tensor out(normals.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 127.5 * (normals[i] + 1.0);
  return out;
}

// Fixed-precision field; NaN becomes an empty field.
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += fields[i];
  }
  return out + "\n";
}

}  // namespace pag::harness
