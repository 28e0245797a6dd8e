#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "gfprune/tensor.hpp"

namespace gfprune::data {

enum class Kind { kRingMixture, kCheckerboard, kTinyShapes };

std::string_view kind_name(Kind k);
Kind parse_kind(std::string_view s);

/// Data dimension of a kind: 2 for point sets, 64 for 8x8 images.
std::size_t kind_dim(Kind k);

struct DatasetSpec {
  Kind kind = Kind::kRingMixture;
  std::size_t size = 10000;
  std::uint64_t seed = 0;
  /// Point sets only: rescale by the analytic per-coordinate standard
  /// deviation so samples have zero mean and unit variance.
  bool standardize = true;
};

/// Reproducible from (kind, size, seed, standardize) alone.
///  ring-mixture  8 Gaussians, sigma 0.05, centres equally spaced on the unit circle
///  checkerboard  uniform over the unit squares of [-2,2]^2 with floor(x)+floor(y) even
///  tiny-shapes   8x8 {0,1} images holding one bar or one 2x2..4x4 rectangle
Tensor generate(const DatasetSpec& spec);

/// Per-coordinate scale that standardize divides by (1 for images).
double standard_scale(Kind k);

inline constexpr std::size_t kImageSide = 8;

}  // namespace gfprune::data
