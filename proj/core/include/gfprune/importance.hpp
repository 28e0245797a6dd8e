#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gfprune/tensor.hpp"

namespace gfprune {

enum class Criterion { kMagnitude, kTaylor, kGradientFlow };

std::string_view criterion_name(Criterion c);
Criterion parse_criterion(std::string_view s);

/// Which batches a score was estimated on.
struct BatchDescriptor {
  std::uint64_t seed = 0;
  std::size_t batch_size = 0;
  std::size_t batches = 0;
  std::vector<std::size_t> timesteps;  // flattened, one entry per sample
};

/// Per-element scores, one tensor per maskable parameter, shaped like its mask.
/// Lower scores are pruned first.
struct ImportanceScores {
  NamedTensors scores;
  Criterion criterion = Criterion::kMagnitude;
  BatchDescriptor batch;

  std::size_t total_units() const;
  double l2_norm() const;
};

}  // namespace gfprune
