#include <gtest/gtest.h>

#include <cmath>

#include "gfprune/datasets.hpp"
#include "gfprune/error.hpp"

using namespace gfprune;
using namespace gfprune::data;

namespace {

Tensor make(Kind k, std::size_t n, std::uint64_t seed, bool standardize = true) {
  DatasetSpec s;
  s.kind = k;
  s.size = n;
  s.seed = seed;
  s.standardize = standardize;
  return generate(s);
}

void column_moments(const Tensor& t, std::size_t j, double& mean, double& var) {
  mean = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) mean += t.at(i, j);
  mean /= static_cast<double>(t.rows());
  var = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) var += (t.at(i, j) - mean) * (t.at(i, j) - mean);
  var /= static_cast<double>(t.rows() - 1);
}

}  // namespace

TEST(Ring, StandardisedMoments) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const Tensor t = make(Kind::kRingMixture, 10000, seed);
    ASSERT_EQ(t.shape(), (Shape{10000, 2}));
    for (std::size_t j = 0; j < 2; ++j) {
      double m, v;
      column_moments(t, j, m, v);
      EXPECT_LT(std::abs(m), 0.05);
      EXPECT_NEAR(v, 1.0, 0.05);
    }
  }
}

TEST(Ring, RawPointsSitNearTheUnitCircle) {
  const Tensor t = make(Kind::kRingMixture, 2000, 3, false);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    EXPECT_NEAR(std::hypot(t.at(i, 0), t.at(i, 1)), 1.0, 0.3);
  }
}

TEST(Ring, ScaleIsAnalyticStandardDeviation) {
  // Each coordinate: cos/sin of 8 equally spaced angles (variance 1/2) plus N(0, 0.05^2).
  EXPECT_NEAR(standard_scale(Kind::kRingMixture), std::sqrt(0.5 + 0.05 * 0.05), 1e-15);
  // Uniform marginal on [-2, 2].
  EXPECT_NEAR(standard_scale(Kind::kCheckerboard), std::sqrt(16.0 / 12.0), 1e-15);
  EXPECT_EQ(standard_scale(Kind::kTinyShapes), 1.0);
}

TEST(Checkerboard, AllPointsOnEvenSquares) {
  const Tensor t = make(Kind::kCheckerboard, 5000, 4, false);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const double x = t.at(i, 0);
    const double y = t.at(i, 1);
    ASSERT_GE(x, -2.0);
    ASSERT_LT(x, 2.0);
    ASSERT_GE(y, -2.0);
    ASSERT_LT(y, 2.0);
    const long s = static_cast<long>(std::floor(x)) + static_cast<long>(std::floor(y));
    ASSERT_EQ(((s % 2) + 2) % 2, 0) << x << "," << y;
  }
}

TEST(Checkerboard, StandardisedMoments) {
  const Tensor t = make(Kind::kCheckerboard, 10000, 5);
  for (std::size_t j = 0; j < 2; ++j) {
    double m, v;
    column_moments(t, j, m, v);
    EXPECT_LT(std::abs(m), 0.05);
    EXPECT_NEAR(v, 1.0, 0.05);
  }
}

TEST(TinyShapes, BinaryNonEmptyImagesOfOneShape) {
  const Tensor t = make(Kind::kTinyShapes, 500, 6);
  ASSERT_EQ(t.shape(), (Shape{500, 64}));
  for (std::size_t i = 0; i < t.rows(); ++i) {
    std::size_t on = 0;
    std::size_t r0 = 8, r1 = 0, c0 = 8, c1 = 0;
    for (std::size_t p = 0; p < 64; ++p) {
      const double v = t.at(i, p);
      ASSERT_TRUE(v == 0.0 || v == 1.0);
      if (v == 1.0) {
        ++on;
        r0 = std::min(r0, p / 8);
        r1 = std::max(r1, p / 8);
        c0 = std::min(c0, p % 8);
        c1 = std::max(c1, p % 8);
      }
    }
    ASSERT_GT(on, 0u);
    // One axis-aligned filled block: its bounding box is fully lit.
    EXPECT_EQ(on, (r1 - r0 + 1) * (c1 - c0 + 1));
  }
  EXPECT_EQ(kind_dim(Kind::kTinyShapes), 64u);
  EXPECT_EQ(kImageSide * kImageSide, 64u);
}

TEST(Generate, Deterministic) {
  for (auto k : {Kind::kRingMixture, Kind::kCheckerboard, Kind::kTinyShapes}) {
    EXPECT_TRUE(bit_identical(make(k, 300, 9), make(k, 300, 9)));
    EXPECT_FALSE(bit_identical(make(k, 300, 9), make(k, 300, 10)));
  }
}

TEST(Generate, FrozenReferenceValues) {
  // Recorded from the SplitMix64 stream; any change to the generators shows up here.
  const Tensor ring = make(Kind::kRingMixture, 4, 7);
  EXPECT_EQ(ring[0], 1.0251392664089851);
  EXPECT_EQ(ring[1], -1.0036720043013891);
  EXPECT_EQ(ring[2], -1.0066034502846655);
  EXPECT_EQ(ring[3], -0.96838649235162355);
  const Tensor board = make(Kind::kCheckerboard, 4, 7);
  EXPECT_EQ(board[0], -0.083173905658300323);
  EXPECT_EQ(board[1], -0.75402302825826051);
  double lit = 0.0;
  for (double v : make(Kind::kTinyShapes, 4, 7).data()) lit += v;
  EXPECT_EQ(lit, 26.0);
}

TEST(Generate, Errors) {
  EXPECT_THROW(make(Kind::kRingMixture, 0, 1), ArgumentError);
  EXPECT_THROW(parse_kind("cifar10"), ArgumentError);
  for (auto k : {Kind::kRingMixture, Kind::kCheckerboard, Kind::kTinyShapes}) EXPECT_EQ(parse_kind(kind_name(k)), k);
}
