#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "gfprune/error.hpp"
#include "gfprune/masking.hpp"
#include "gfprune/metrics.hpp"

using namespace gfprune;
using namespace gfprune::metrics;

namespace {

Tensor gaussian_points(std::size_t n, double mx, double my, double sx, double sy, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    t[i * 2] = mx + sx * rng.normal();
    t[i * 2 + 1] = my + sy * rng.normal();
  }
  return t;
}

struct Moments {
  double m[2];
  double c[2][2];
};

Moments moments(const Tensor& x) {
  Moments r{};
  const double n = static_cast<double>(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < 2; ++j) r.m[j] += x.at(i, j) / n;
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < 2; ++j) {
      for (int k = 0; k < 2; ++k) r.c[j][k] += (x.at(i, j) - r.m[j]) * (x.at(i, k) - r.m[k]) / (n - 1);
    }
  }
  return r;
}

}  // namespace

TEST(Frechet, SelfDistanceIsZero) {
  const Tensor a = gaussian_points(500, 0.3, -1, 1, 2, 1);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
}

TEST(Frechet, OneDimensionalMeanShift) {
  // Two points at +-1/sqrt(2) have mean 0 and unbiased variance exactly 1.
  const double h = std::sqrt(0.5);
  const Tensor a = Tensor::matrix(2, 1, {-h, h});
  const Tensor b = Tensor::matrix(2, 1, {3 - h, 3 + h});
  EXPECT_NEAR(frechet_distance(a, b), 9.0, 1e-12);
}

TEST(Frechet, TwoDimensionalMatchesClosedFormTraceRoot) {
  // For 2x2 M with positive eigenvalues, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)).
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor a = gaussian_points(400, 0, 0, 1.0, 0.5, seed);
    Tensor b = gaussian_points(300, 0.5, -0.2, 0.7, 1.3, seed + 10);
    for (std::size_t i = 0; i < b.rows(); ++i) b[i * 2 + 1] += 0.6 * b[i * 2];
    const Moments ma = moments(a);
    const Moments mb = moments(b);
    double M[2][2];
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) M[i][j] = ma.c[i][0] * mb.c[0][j] + ma.c[i][1] * mb.c[1][j];
    }
    const double tr = M[0][0] + M[1][1];
    const double det = M[0][0] * M[1][1] - M[0][1] * M[1][0];
    const double tr_sqrt = std::sqrt(tr + 2.0 * std::sqrt(det));
    const double dm = (ma.m[0] - mb.m[0]) * (ma.m[0] - mb.m[0]) + (ma.m[1] - mb.m[1]) * (ma.m[1] - mb.m[1]);
    const double want = dm + ma.c[0][0] + ma.c[1][1] + mb.c[0][0] + mb.c[1][1] - 2.0 * tr_sqrt;
    EXPECT_NEAR(frechet_distance(a, b), want, 1e-9);
  }
}

TEST(Frechet, Symmetric) {
  const Tensor a = gaussian_points(300, 0, 1, 1, 0.4, 3);
  const Tensor b = gaussian_points(250, 1, 0, 0.6, 1.5, 4);
  EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-9);
}

TEST(Frechet, GrowsWithAddedNoise) {
  const Tensor base = fixtures::ring_data(3000, 5);
  Rng rng(6);
  Tensor noise({3000, 2});
  for (double& v : noise.data()) v = rng.normal();
  double prev = 0.0;
  for (double sigma : {0.1, 0.5, 1.5}) {
    Tensor noisy = base;
    for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += sigma * noise[i];
    const double fd = frechet_distance(base, noisy);
    EXPECT_GT(fd, prev) << sigma;
    prev = fd;
  }
}

TEST(Frechet, SingularCovarianceIsRegularised) {
  const Tensor a({10, 2}, 1.0);
  const Tensor b = gaussian_points(10, 0, 0, 1, 1, 2);
  const double fd = frechet_distance(a, b);
  EXPECT_TRUE(std::isfinite(fd));
  EXPECT_GE(fd, -1e-8);
}

TEST(Frechet, RejectsTooFewSamplesAndMismatchedDims) {
  EXPECT_THROW(frechet_distance(Tensor({2, 2}), gaussian_points(10, 0, 0, 1, 1, 1)), ArgumentError);
  EXPECT_THROW(frechet_distance(Tensor({10, 3}), gaussian_points(10, 0, 0, 1, 1, 1)), ShapeError);
}

TEST(Ssim, IdenticalImagesScoreOne) {
  Rng rng(1);
  const Tensor img = fixtures::random_tensor({8, 8}, rng, 0.0, 1.0);
  EXPECT_EQ(ssim(img, img), 1.0);
}

TEST(Ssim, EqualConstantImagesScoreOne) {
  EXPECT_DOUBLE_EQ(ssim(Tensor({8, 8}, 0.4), Tensor({8, 8}, 0.4)), 1.0);
}

TEST(Ssim, NegativeImageScoresBelowZero) {
  Tensor a({8, 8});
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) a[r * 8 + c] = ((r / 2 + c) % 3 == 0) ? 1.0 : 0.25 * (c % 2);
  }
  Tensor b = a;
  for (double& v : b.data()) v = 1.0 - v;
  const double s = ssim(a, b);
  EXPECT_LT(s, 0.0);
  EXPECT_GE(s, -1.0);
}

TEST(Ssim, StaysWithinUnitRange) {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const double s = ssim(fixtures::random_tensor({9, 11}, rng, 0, 1), fixtures::random_tensor({9, 11}, rng, 0, 1));
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Ssim, RejectsMismatchedOrSmallImages) {
  EXPECT_THROW(ssim(Tensor({8, 8}), Tensor({8, 9})), ShapeError);
  EXPECT_THROW(ssim(Tensor({6, 6}), Tensor({6, 6})), ShapeError);
  EXPECT_THROW(mean_ssim(Tensor({2, 64}), Tensor({3, 64}), 8, 8), ShapeError);
}

TEST(Ssim, BatchMeanPairsRows) {
  Rng rng(3);
  const Tensor a = fixtures::random_tensor({3, 64}, rng, 0, 1);
  const Tensor b = fixtures::random_tensor({3, 64}, rng, 0, 1);
  double want = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor x({8, 8});
    Tensor y({8, 8});
    for (std::size_t j = 0; j < 64; ++j) {
      x[j] = a.at(i, j);
      y[j] = b.at(i, j);
    }
    want += ssim(x, y) / 3.0;
  }
  EXPECT_NEAR(mean_ssim(a, b, 8, 8), want, 1e-15);
}

TEST(PointSetSsim, IdenticalSetsScoreOneAndShiftedSetsLess) {
  const Tensor a = fixtures::ring_data(2000, 1);
  EXPECT_DOUBLE_EQ(point_set_ssim(a, a), 1.0);
  Tensor b = a;
  for (std::size_t i = 0; i < b.rows(); ++i) b[i * 2] += 0.5;
  EXPECT_LT(point_set_ssim(a, b), 0.9);
}

TEST(Kde, RasterPeaksAtThePoint) {
  RasterOptions opt;
  opt.resolution = 32;
  const Tensor r = rasterize_kde(Tensor::matrix(1, 2, {0.05, 0.05}), opt);
  ASSERT_EQ(r.shape(), (Shape{32, 32}));
  std::size_t best = 0;
  for (std::size_t i = 1; i < r.size(); ++i) {
    if (r[i] > r[best]) best = i;
  }
  // Pixel width is 6/32, so (0.05, 0.05) falls in the pixel just above the centre.
  EXPECT_EQ(best / 32, 16u);
  EXPECT_EQ(best % 32, 16u);
  EXPECT_THROW(rasterize_kde(Tensor({3, 3})), ShapeError);
}

TEST(Macs, SingleSquareLayer) {
  Rng rng(4);
  std::vector<mask::MaskedParam> ps;
  ps.emplace_back("w", fixtures::random_tensor({128, 128}, rng));
  EXPECT_EQ(count_macs(ps, mask::Granularity::kElement).dense, 16384u);
  EXPECT_EQ(count_macs(ps, mask::Granularity::kElement).sparse, 16384u);
  ps[0].granularity = mask::Granularity::kRowGroup;
  ImportanceScores s;
  s.scores["w"] = fixtures::random_tensor({128, 128}, rng);
  mask::apply_mask_update(ps, s, 0.5, 0.0);
  const auto m = count_macs(ps, mask::Granularity::kRowGroup);
  EXPECT_EQ(m.dense, 16384u);
  EXPECT_EQ(m.sparse, 8192u);
}

TEST(Macs, FullModelElementSparsityHalves) {
  diffusion::NoisePredictor model(diffusion::ModelSpec{}, 5);
  std::size_t dense = 0;
  for (const auto& w : model.weights()) dense += w.weights.size();
  Rng rng(5);
  ImportanceScores s;
  for (const auto& w : model.weights()) s.scores[w.name] = fixtures::random_tensor(w.weights.shape(), rng);
  mask::apply_mask_update(model.weights(), s, 0.5, 0.0);
  const auto m = count_macs(model, mask::Granularity::kElement);
  EXPECT_EQ(m.dense, dense);
  EXPECT_EQ(m.sparse, dense - mask::prune_count(0.5, dense));
  EXPECT_LE(m.sparse, m.dense);
}

TEST(Macs, ColumnGroupsCountSurvivingColumns) {
  std::vector<mask::MaskedParam> ps;
  ps.emplace_back("w", Tensor({4, 6}, 1.0));
  for (std::size_t r = 0; r < 4; ++r) ps[0].mask[r * 6 + 2] = 0.0;
  EXPECT_EQ(count_macs(ps, mask::Granularity::kColumnGroup).sparse, 20u);
}
