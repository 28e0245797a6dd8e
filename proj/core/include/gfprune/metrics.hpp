#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gfprune/diffusion.hpp"
#include "gfprune/masking.hpp"
#include "gfprune/tensor.hpp"

namespace gfprune::metrics {

/// Frechet distance between Gaussian fits of two sample sets [n, dim]:
///   |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))
/// Covariances use the n-1 normalisation. When either covariance is singular
/// both get 1e-6 * I added.
double frechet_distance(const Tensor& samples_a, const Tensor& samples_b);

struct SsimOptions {
  std::size_t window = 7;
  double dynamic_range = 1.0;
};

/// Mean SSIM over all valid window positions of two [h, w] images.
double ssim(const Tensor& img_a, const Tensor& img_b, const SsimOptions& options = {});

/// Mean SSIM over paired rows of two [n, h*w] image batches.
double mean_ssim(const Tensor& batch_a, const Tensor& batch_b, std::size_t h, std::size_t w,
                 const SsimOptions& options = {});

struct RasterOptions {
  std::size_t resolution = 32;
  double extent = 3.0;      // grid covers [-extent, extent]^2
  double bandwidth = 0.2;   // Gaussian kernel standard deviation
};

/// Unnormalised Gaussian kernel density of 2-D points on pixel centres.
Tensor rasterize_kde(const Tensor& points, const RasterOptions& options = {});

/// SSIM between the density rasters of two 2-D point sets, both divided by
/// their common maximum so pixel values lie in [0, 1].
double point_set_ssim(const Tensor& points_a, const Tensor& points_b,
                      const RasterOptions& raster = {}, const SsimOptions& options = {});

struct MacCount {
  std::size_t dense = 0;
  std::size_t sparse = 0;
};

/// Multiply-accumulates per forward sample of the weight matrices. Dense
/// counts every in*out product; sparse counts nonzero mask entries for
/// element granularity and whole surviving rows/columns for group granularity.
MacCount count_macs(std::span<const mask::MaskedParam> params, mask::Granularity granularity);
MacCount count_macs(const diffusion::NoisePredictor& model, mask::Granularity granularity);

struct QualityReport {
  double frechet = 0.0;
  double ssim = 1.0;
  std::size_t nonzero_params = 0;
  std::size_t dense_params = 0;
  std::size_t macs_dense = 0;
  std::size_t macs_sparse = 0;
  std::uint64_t eval_seed = 0;
};

}  // namespace gfprune::metrics
