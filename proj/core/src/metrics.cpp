#include "gfprune/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "gfprune/error.hpp"

namespace gfprune::metrics {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

void moments(const Tensor& x, Vec& mean, Mat& cov) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto d = static_cast<Eigen::Index>(x.cols());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      x.data().data(), n, d);
  mean = m.colwise().mean().transpose();
  const Mat centered = m.rowwise() - mean.transpose();
  cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
}

bool singular(const Mat& cov) {
  Eigen::SelfAdjointEigenSolver<Mat> es(cov, Eigen::EigenvaluesOnly);
  const double top = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() <= 1e-12 * top;
}

/// Tr((A B)^(1/2)) for symmetric PSD A, B via the similar matrix A^(1/2) B A^(1/2).
double trace_sqrt_product(const Mat& a, const Mat& b) {
  Eigen::SelfAdjointEigenSolver<Mat> ea(a);
  const Vec root = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Mat a_half = ea.eigenvectors() * root.asDiagonal() * ea.eigenvectors().transpose();
  const Mat inner = a_half * b * a_half;
  Eigen::SelfAdjointEigenSolver<Mat> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  return ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace

double frechet_distance(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ShapeError("frechet_distance: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const std::size_t d = a.cols();
  if (a.rows() < d + 1 || b.rows() < d + 1) {
    throw ArgumentError("frechet_distance needs at least dim+1 samples per set");
  }
  Vec mu_a;
  Vec mu_b;
  Mat cov_a;
  Mat cov_b;
  moments(a, mu_a, cov_a);
  moments(b, mu_b, cov_b);
  if (singular(cov_a) || singular(cov_b)) {
    cov_a += 1e-6 * Mat::Identity(cov_a.rows(), cov_a.cols());
    cov_b += 1e-6 * Mat::Identity(cov_b.rows(), cov_b.cols());
  }
  const double mean_term = (mu_a - mu_b).squaredNorm();
  const double value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(cov_a, cov_b);
  if (!std::isfinite(value)) throw NumericError("non-finite Frechet distance");
  return value;
}

double ssim(const Tensor& img_a, const Tensor& img_b, const SsimOptions& options) {
  if (img_a.shape() != img_b.shape() || img_a.rank() != 2) {
    throw ShapeError("ssim: shapes " + shape_string(img_a.shape()) + " vs " +
                     shape_string(img_b.shape()));
  }
  const std::size_t h = img_a.rows();
  const std::size_t w = img_a.cols();
  const std::size_t k = options.window;
  if (h < k || w < k) throw ShapeError("ssim: image smaller than the window");
  const double c1 = (0.01 * options.dynamic_range) * (0.01 * options.dynamic_range);
  const double c2 = (0.03 * options.dynamic_range) * (0.03 * options.dynamic_range);
  const double npix = static_cast<double>(k * k);
  const double sample_norm = npix / (npix - 1.0);

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + k <= h; ++r) {
    for (std::size_t c = 0; c + k <= w; ++c) {
      double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
      for (std::size_t i = r; i < r + k; ++i) {
        for (std::size_t j = c; j < c + k; ++j) {
          const double x = img_a.at(i, j);
          const double y = img_b.at(i, j);
          sa += x;
          sb += y;
          saa += x * x;
          sbb += y * y;
          sab += x * y;
        }
      }
      const double ma = sa / npix;
      const double mb = sb / npix;
      const double va = (saa / npix - ma * ma) * sample_norm;
      const double vb = (sbb / npix - mb * mb) * sample_norm;
      const double cab = (sab / npix - ma * mb) * sample_norm;
      const double num = (2.0 * ma * mb + c1) * (2.0 * cab + c2);
      const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double mean_ssim(const Tensor& batch_a, const Tensor& batch_b, std::size_t h, std::size_t w,
                 const SsimOptions& options) {
  if (batch_a.shape() != batch_b.shape() || batch_a.cols() != h * w) {
    throw ShapeError("mean_ssim: batch shapes do not match " + std::to_string(h) + "x" +
                     std::to_string(w) + " images");
  }
  double total = 0.0;
  for (std::size_t n = 0; n < batch_a.rows(); ++n) {
    Tensor a({h, w});
    Tensor b({h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
      a[i] = std::clamp(batch_a.at(n, i), 0.0, 1.0);
      b[i] = std::clamp(batch_b.at(n, i), 0.0, 1.0);
    }
    total += ssim(a, b, options);
  }
  return total / static_cast<double>(batch_a.rows());
}

Tensor rasterize_kde(const Tensor& points, const RasterOptions& o) {
  if (points.rank() != 2 || points.cols() != 2) throw ShapeError("rasterize_kde needs [n,2] points");
  const std::size_t res = o.resolution;
  Tensor img({res, res}, 0.0);
  const double cell = 2.0 * o.extent / static_cast<double>(res);
  const double inv2s2 = 1.0 / (2.0 * o.bandwidth * o.bandwidth);
  std::vector<double> gx(res);
  std::vector<double> gy(res);
  for (std::size_t n = 0; n < points.rows(); ++n) {
    const double px = points.at(n, 0);
    const double py = points.at(n, 1);
    for (std::size_t i = 0; i < res; ++i) {
      const double centre = -o.extent + (static_cast<double>(i) + 0.5) * cell;
      gx[i] = std::exp(-(centre - px) * (centre - px) * inv2s2);
      gy[i] = std::exp(-(centre - py) * (centre - py) * inv2s2);
    }
    // Row index follows y, column index follows x; the kernel is separable.
    for (std::size_t r = 0; r < res; ++r) {
      for (std::size_t c = 0; c < res; ++c) img.at(r, c) += gy[r] * gx[c];
    }
  }
  return img;
}

double point_set_ssim(const Tensor& a, const Tensor& b, const RasterOptions& raster,
                      const SsimOptions& options) {
  Tensor ra = rasterize_kde(a, raster);
  Tensor rb = rasterize_kde(b, raster);
  const double top = std::max(max_abs(ra), max_abs(rb));
  if (top > 0.0) {
    for (double& v : ra.raw()) v /= top;
    for (double& v : rb.raw()) v /= top;
  }
  return ssim(ra, rb, options);
}

MacCount count_macs(std::span<const mask::MaskedParam> params, mask::Granularity granularity) {
  MacCount out;
  for (const auto& p : params) {
    const std::size_t rows = p.weights.rows();
    const std::size_t cols = p.weights.cols();
    out.dense += rows * cols;
    switch (granularity) {
      case mask::Granularity::kElement:
        for (double m : p.mask.data()) out.sparse += (m != 0.0) ? 1 : 0;
        break;
      case mask::Granularity::kRowGroup:
        for (std::size_t r = 0; r < rows; ++r) {
          bool live = false;
          for (std::size_t c = 0; c < cols && !live; ++c) live = p.mask.at(r, c) != 0.0;
          out.sparse += live ? cols : 0;
        }
        break;
      case mask::Granularity::kColumnGroup:
        for (std::size_t c = 0; c < cols; ++c) {
          bool live = false;
          for (std::size_t r = 0; r < rows && !live; ++r) live = p.mask.at(r, c) != 0.0;
          out.sparse += live ? rows : 0;
        }
        break;
    }
  }
  return out;
}

MacCount count_macs(const diffusion::NoisePredictor& model, mask::Granularity granularity) {
  return count_macs(model.weights(), granularity);
}

}  // namespace gfprune::metrics
