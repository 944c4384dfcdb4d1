#include <gtest/gtest.h>

#include <numbers>

#include "oracles.hpp"
#include "pag/pano_normals.hpp"

namespace pag {
namespace {

Tensor random_normal_map(std::size_t h, std::size_t w, RngStream& rng) {
  Tensor n({3, h, w});
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < plane; ++p) {
    double v[3] = {rng.normal(), rng.normal(), rng.normal()};
    const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (std::size_t c = 0; c < 3; ++c) n[c * plane + p] = v[c] / len;
  }
  return n;
}

Tensor uniform_map(std::size_t h, std::size_t w, double x, double y, double z) {
  Tensor n({3, h, w});
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < plane; ++p) {
    n[p] = x;
    n[plane + p] = y;
    n[2 * plane + p] = z;
  }
  return n;
}

TEST(PanoNormals, CanonicalColumnIsUnchanged) {
  RngStream rng(1);
  Tensor map = random_normal_map(4, 16, rng);
  Tensor local = globals_to_locals(map, 5);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(local.at(c, y, 5), map.at(c, y, 5));
}

TEST(PanoNormals, VerticalComponentIsInvariant) {
  RngStream rng(2);
  Tensor map = random_normal_map(3, 20, rng);
  Tensor local = globals_to_locals(map, 7);
  for (std::size_t p = 0; p < 60; ++p) EXPECT_EQ(local[2 * 60 + p], map[2 * 60 + p]);
  Tensor up = uniform_map(2, 9, 0, 0, 1);
  EXPECT_EQ(globals_to_locals(up, 3), up);
}

TEST(PanoNormals, QuarterTurnMatchesExplicitRotation) {
  const std::size_t w = 16;
  Tensor map = uniform_map(1, w, 1, 0, 0);
  Tensor local = globals_to_locals(map, 0);
  // Counter-clockwise rotation by pi/2 about z.
  const double theta = std::numbers::pi / 2;
  const double r[3][3] = {{std::cos(theta), -std::sin(theta), 0},
                          {std::sin(theta), std::cos(theta), 0},
                          {0, 0, 1}};
  const double n[3] = {1, 0, 0};
  for (std::size_t c = 0; c < 3; ++c) {
    const double expected = r[c][0] * n[0] + r[c][1] * n[1] + r[c][2] * n[2];
    EXPECT_NEAR(local.at(c, 0, w / 4), expected, 1e-15);
  }
  EXPECT_NEAR(local.at(0, 0, w / 4), 0.0, 1e-15);
  EXPECT_NEAR(local.at(1, 0, w / 4), 1.0, 1e-15);
}

TEST(PanoNormals, RoundTripAndNormPreservation) {
  RngStream rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t w = 2 + rng.below(60);
    Tensor map = random_normal_map(5, w, rng);
    const long long x0 = static_cast<long long>(rng.below(w));
    Tensor local = globals_to_locals(map, x0);
    EXPECT_LT(max_abs_diff(locals_to_globals(local, x0), map), 1e-12);
    const std::size_t plane = 5 * w;
    for (std::size_t p = 0; p < plane; ++p) {
      double len = 0.0;
      for (std::size_t c = 0; c < 3; ++c) len += local[c * plane + p] * local[c * plane + p];
      EXPECT_NEAR(std::sqrt(len), 1.0, 1e-12);
    }
  }
}

TEST(PanoNormals, VoidPixelsPassThrough) {
  RngStream rng(4);
  Tensor map = random_normal_map(2, 8, rng);
  for (std::size_t c = 0; c < 3; ++c) map.at(c, 1, 3) = 0.0;
  Tensor local = globals_to_locals(map, 0);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(local.at(c, 1, 3), 0.0);
}

TEST(PanoNormals, NonUnitNormalsAreRejected) {
  EXPECT_THROW(globals_to_locals(uniform_map(1, 4, 0.5, 0, 0), 0), Error);
  EXPECT_THROW(globals_to_locals(Tensor({2, 1, 4}), 0), Error);
  EXPECT_THROW(globals_to_locals(uniform_map(1, 4, 0, 0, 1), 4), Error);
}

TEST(PanoNormals, CompareCanonicalChoices) {
  RngStream rng(5);
  Tensor map = random_normal_map(3, 360, rng);
  EXPECT_EQ(compare_canonical_choices(map, 10, 10), 0.0);
  // Horizontal normals feel the full column shift; one column is one degree.
  Tensor flat = uniform_map(2, 360, 1, 0, 0);
  EXPECT_NEAR(compare_canonical_choices(flat, 0, 1), 1.0, 1e-9);
  // Tilted normals rotate by less than the column angle.
  EXPECT_LT(compare_canonical_choices(map, 0, 1), 1.0);
  EXPECT_GT(compare_canonical_choices(map, 0, 1), 0.0);
}

TEST(PanoNormals, OffsetsWrapAroundTheSeam) {
  EXPECT_EQ(circular_offset(0, 15, 16), 1);
  EXPECT_EQ(circular_offset(15, 0, 16), -1);
  EXPECT_EQ(circular_offset(8, 0, 16), -8);
  EXPECT_EQ(circular_offset(7, 0, 16), 7);
  EXPECT_NEAR(rotation_for_column(0, 15, 16), 2 * std::numbers::pi / 16, 1e-15);
  for (long long x = 0; x < 16; ++x) {
    const double t = rotation_for_column(x, 3, 16);
    EXPECT_GE(t, -std::numbers::pi);
    EXPECT_LT(t, std::numbers::pi);
  }
}

TEST(PanoNormals, NonPositiveWidthIsAnError) {
  EXPECT_THROW(rotation_for_column(0, 0, 0), Error);
  EXPECT_THROW(circular_offset(1, 0, -4), Error);
}

}  // namespace
}  // namespace pag
