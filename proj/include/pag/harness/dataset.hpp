#pragma once

// Seeded synthetic dense-prediction tasks.
//
//   shapes-semantic  coloured shapes on grey textured ground; class 0 is the
//                    ground, classes 1..K-1 are shape types. Shape colour is
//                    random, so the class can only be read from the outline.
//   shapes-boundary  the same scenes, target is the 1-pixel label edge map.
//   ramp-depth       piecewise-planar log-depth; intensity follows depth.
//   facet-normal     piecewise-constant unit normals under fixed lights.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pag/gating.hpp"
#include "pag/objectives.hpp"
#include "pag/tensor.hpp"

namespace pag::harness {

inline constexpr std::uint64_t kEvalSeedOffset = 1000003;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ull));
}

// image: 3 x H x W. target by kind: labels H x W; edges H x W; log-depth
// 1 x H x W; normals 3 x H x W.
struct Sample {
  Tensor image;
  Tensor target;
};

struct SyntheticDataset {
  std::string kind;
  std::size_t size = 0;
  std::size_t classes = 0;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;
};

inline std::size_t target_channels(const std::string& kind, std::size_t classes) {
  if (kind == "shapes-semantic") return classes;
  if (kind == "shapes-boundary" || kind == "ramp-depth") return 1;
  if (kind == "facet-normal") return 3;
  throw Error("unknown dataset kind '" + kind + "'");
}

namespace detail {

// Grey ground: base level, oriented stripes and pixel noise, equal in all
// channels.
inline void paint_ground(Tensor& img, RngStream& rng) {
  const std::size_t h = img.height(), w = img.width();
  const double base = rng.uniform(0.3, 0.7);
  const double angle = rng.uniform(0.0, M_PI);
  const double freq = rng.uniform(0.4, 1.2);
  const double phase = rng.uniform(0.0, 2 * M_PI);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double s = std::sin(freq * (std::cos(angle) * x + std::sin(angle) * y) + phase);
      const double v = base + 0.08 * s;
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = v;
    }
}

inline std::array<double, 3> saturated_colour(RngStream& rng) {
  const double hue = rng.uniform(0.0, 6.0);
  const double v = rng.uniform(0.6, 1.0);
  const double lo = v * rng.uniform(0.0, 0.25);
  const double f = hue - std::floor(hue);
  std::array<double, 3> c{};
  switch (static_cast<int>(hue)) {
    case 0: c = {v, lo + (v - lo) * f, lo}; break;
    case 1: c = {v - (v - lo) * f, v, lo}; break;
    case 2: c = {lo, v, lo + (v - lo) * f}; break;
    case 3: c = {lo, v - (v - lo) * f, v}; break;
    case 4: c = {lo + (v - lo) * f, lo, v}; break;
    default: c = {v, lo, v - (v - lo) * f}; break;
  }
  return c;
}

// Shape type t (1-based) centred at (cx, cy) with radius r.
inline bool inside_shape(std::size_t t, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch ((t - 1) % 7) {
    case 0: return dx * dx + dy * dy <= r * r;                       // disc
    case 1: return ax <= r && ay <= 0.4 * r;                         // bar
    case 2: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);  // cross
    case 3: return ax <= 0.85 * r && ay <= 0.85 * r;                 // square
    case 4: return dy <= 0.8 * r && dy >= -1.2 * r + 1.6 * ax;       // triangle
    case 5: return ax + ay <= r;                                     // diamond
    default: {                                                       // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
  }
}

inline void add_noise(Tensor& img, RngStream& rng, double amplitude) {
  for (auto& v : img.storage()) v += amplitude * rng.uniform(-1.0, 1.0);
}

inline Tensor shape_scene(std::size_t size, std::size_t classes, RngStream& rng, Tensor& img) {
  img = Tensor({3, size, size});
  paint_ground(img, rng);
  Tensor labels({size, size});
  const std::size_t count = 2 + rng.below(2);
  const double rmin = std::max(3.0, size / 6.0), rmax = std::max(rmin + 1.0, size / 3.5);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t type = 1 + rng.below(classes - 1);
    const double r = rng.uniform(rmin, rmax);
    const double cx = rng.uniform(0.0, double(size)), cy = rng.uniform(0.0, double(size));
    const auto colour = saturated_colour(rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        if (!inside_shape(type, x + 0.5 - cx, y + 0.5 - cy, r)) continue;
        labels.at(y, x) = double(type);
        for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = colour[c];
      }
  }
  add_noise(img, rng, 0.04);
  return labels;
}

inline bool differs_from_neighbour(const Tensor& labels, std::size_t y, std::size_t x) {
  const std::size_t h = labels.dim(0), w = labels.dim(1);
  const double v = labels.at(y, x);
  return (x + 1 < w && labels.at(y, x + 1) != v) || (y + 1 < h && labels.at(y + 1, x) != v) ||
         (x > 0 && labels.at(y, x - 1) != v) || (y > 0 && labels.at(y - 1, x) != v);
}

inline Sample semantic_sample(std::size_t size, std::size_t classes, RngStream& rng) {
  Sample s;
  Tensor labels = shape_scene(size, classes, rng, s.image);
  // Where two shapes touch the occlusion order is ambiguous; those pixels
  // are ignored.
  s.target = labels;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      if (labels.at(y, x) == 0.0 || !differs_from_neighbour(labels, y, x)) continue;
      bool touches_shape = false;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const long yy = long(y) + dy, xx = long(x) + dx;
          if (yy < 0 || xx < 0 || yy >= long(size) || xx >= long(size)) continue;
          const double v = labels.at(std::size_t(yy), std::size_t(xx));
          touches_shape = touches_shape || (v != 0.0 && v != labels.at(y, x));
        }
      if (touches_shape) s.target.at(y, x) = kIgnoreLabel;
    }
  return s;
}

inline Sample boundary_sample(std::size_t size, std::size_t classes, RngStream& rng) {
  Sample s;
  Tensor labels = shape_scene(size, classes, rng, s.image);
  s.target = Tensor({size, size});
  // Edge pixels lie on the shape side of each label change.
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      if (labels.at(y, x) != 0.0 && differs_from_neighbour(labels, y, x)) s.target.at(y, x) = 1.0;
  return s;
}

// Regions cut by random lines; each region gets its own plane in log-depth.
inline Sample depth_sample(std::size_t size, RngStream& rng) {
  Sample s;
  s.image = Tensor({3, size, size});
  s.target = Tensor({1, size, size});
  const std::size_t cuts = 1 + rng.below(2);
  // Each cut: unit direction and a point it passes through.
  std::vector<std::array<double, 4>> lines(cuts);
  for (auto& l : lines) {
    const double a = rng.uniform(0.0, 2 * M_PI);
    l = {std::cos(a), std::sin(a), rng.uniform(0.3, 0.7) * size, rng.uniform(0.3, 0.7) * size};
  }
  const std::size_t regions = std::size_t(1) << cuts;
  std::vector<std::array<double, 3>> planes(regions), tints(regions);
  for (std::size_t r = 0; r < regions; ++r) {
    planes[r] = {rng.uniform(0.2, 2.0), rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04)};
    tints[r] = saturated_colour(rng);
  }
  const double c0 = size / 2.0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t region = 0;
      for (std::size_t k = 0; k < cuts; ++k) {
        const auto& l = lines[k];
        const bool side = l[0] * (x + 0.5 - l[2]) + l[1] * (y + 0.5 - l[3]) > 0.0;
        region |= std::size_t(side) << k;
      }
      const auto& p = planes[region];
      const double logd = p[0] + p[1] * (x - c0) + p[2] * (y - c0);
      s.target.at(0, y, x) = logd;
      // Brightness falls off with depth; hue marks the region.
      const double shade = std::exp(-0.6 * logd);
      for (std::size_t c = 0; c < 3; ++c) s.image.at(c, y, x) = shade * (0.4 + 0.6 * tints[region][c]);
    }
  add_noise(s.image, rng, 0.02);
  return s;
}

// Voronoi facets, each with a unit normal facing the viewer half-space;
// channels are Lambertian shading under three fixed lights.
inline Sample normal_sample(std::size_t size, RngStream& rng) {
  Sample s;
  s.image = Tensor({3, size, size});
  s.target = Tensor({3, size, size});
  const std::size_t facets = 3 + rng.below(3);
  std::vector<std::array<double, 2>> sites(facets);
  std::vector<std::array<double, 3>> normals(facets);
  for (std::size_t f = 0; f < facets; ++f) {
    sites[f] = {rng.uniform(0.0, double(size)), rng.uniform(0.0, double(size))};
    double n[3] = {rng.normal() * 0.6, 1.0, rng.normal() * 0.6};
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    normals[f] = {n[0] / len, n[1] / len, n[2] / len};
  }
  static constexpr double kLights[3][3] = {
      {0.80, 0.55, 0.20}, {-0.70, 0.60, 0.39}, {0.05, 0.60, -0.80}};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t f = 0; f < facets; ++f) {
        const double dx = x + 0.5 - sites[f][0], dy = y + 0.5 - sites[f][1];
        if (dx * dx + dy * dy < bd) bd = dx * dx + dy * dy, best = f;
      }
      const auto& n = normals[best];
      for (std::size_t c = 0; c < 3; ++c) {
        s.target.at(c, y, x) = n[c];
        const double lambert = n[0] * kLights[c][0] + n[1] * kLights[c][1] + n[2] * kLights[c][2];
        s.image.at(c, y, x) = std::max(0.0, lambert);
      }
    }
  add_noise(s.image, rng, 0.02);
  return s;
}

}  // namespace detail

inline Sample generate_sample(const std::string& kind, std::size_t size, std::size_t classes,
                              std::uint64_t seed, std::size_t index) {
  RngStream rng(mix_seed(seed, index));
  if (kind == "shapes-semantic") return detail::semantic_sample(size, classes, rng);
  if (kind == "shapes-boundary") return detail::boundary_sample(size, classes, rng);
  if (kind == "ramp-depth") return detail::depth_sample(size, rng);
  if (kind == "facet-normal") return detail::normal_sample(size, rng);
  throw Error("unknown dataset kind '" + kind + "'");
}

inline SyntheticDataset gen_dataset(const std::string& kind, std::size_t size, std::size_t n,
                                    std::uint64_t seed, std::size_t classes = 4) {
  if (n == 0) throw Error("gen_dataset: n must be at least 1");
  if (size < 4) throw Error("gen_dataset: size must be at least 4");
  if (kind == "shapes-semantic" || kind == "shapes-boundary") {
    if (classes < 2) throw Error("gen_dataset: need at least two classes");
  }
  target_channels(kind, classes);
  SyntheticDataset d{kind, size, classes, seed, {}};
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(generate_sample(kind, size, classes, seed, i));
  return d;
}

// "kind:size:n:seed"
struct DataSpec {
  std::string kind;
  std::size_t size = 0, n = 0;
  std::uint64_t seed = 0;
};

inline DataSpec parse_data_spec(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i == text.size() || text[i] == ':') {
      parts.push_back(text.substr(start, i - start));
      start = i + 1;
    }
  }
  if (parts.size() != 4) throw Error("data spec must be kind:size:n:seed, got '" + text + "'");
  DataSpec d;
  d.kind = parts[0];
  try {
    d.size = std::stoul(parts[1]);
    d.n = std::stoul(parts[2]);
    d.seed = std::stoull(parts[3]);
  } catch (const std::exception&) {
    throw Error("data spec must be kind:size:n:seed, got '" + text + "'");
  }
  target_channels(d.kind, 2);
  return d;
}

// ---------------------------------------------------------------------------
// Augmentation

inline Tensor crop(const Tensor& t, std::size_t y0, std::size_t x0, std::size_t size) {
  const bool planar = t.rank() == 2;
  const std::size_t ch = planar ? 1 : t.channels();
  const std::size_t w = planar ? t.dim(1) : t.width();
  const std::size_t h = planar ? t.dim(0) : t.height();
  if (y0 + size > h || x0 + size > w) throw Error("crop window outside the image");
  Tensor out = planar ? Tensor({size, size}) : Tensor({ch, size, size});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        out[(c * size + y) * size + x] = t[(c * h + y0 + y) * w + x0 + x];
  return out;
}

// Left-right mirror; flipping a normal map also negates its x component.
inline Tensor flip_lr(const Tensor& t, bool is_normal_map = false) {
  const bool planar = t.rank() == 2;
  const std::size_t ch = planar ? 1 : t.channels();
  const std::size_t h = planar ? t.dim(0) : t.height(), w = planar ? t.dim(1) : t.width();
  Tensor out(t.dims());
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double v = t[(c * h + y) * w + (w - 1 - x)];
        out[(c * h + y) * w + x] = is_normal_map && c == 0 ? -v : v;
      }
  return out;
}

// Random margin crop to `size` and a coin-flip mirror.
inline Sample augment(const Sample& s, const std::string& kind, std::size_t size, RngStream& rng) {
  const std::size_t full = s.image.height();
  if (full < size) throw Error("augment: sample smaller than crop");
  const std::size_t slack = full - size;
  const std::size_t y0 = rng.below(slack + 1), x0 = rng.below(slack + 1);
  Sample out{crop(s.image, y0, x0, size), crop(s.target, y0, x0, size)};
  if (rng.uniform() < 0.5) {
    out.image = flip_lr(out.image);
    out.target = flip_lr(out.target, kind == "facet-normal");
  }
  return out;
}

}  // namespace pag::harness
