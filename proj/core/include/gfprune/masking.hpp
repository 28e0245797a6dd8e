#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gfprune/importance.hpp"
#include "gfprune/tensor.hpp"

namespace gfprune::mask {

enum class Granularity { kElement, kRowGroup, kColumnGroup };

std::string_view granularity_name(Granularity g);
Granularity parse_granularity(std::string_view s);

/// A weight matrix with its mask. The network only ever sees weights * mask.
/// Rows of a [out, in] weight are output units, so a row-group is one neuron.
struct MaskedParam {
  std::string name;
  Tensor weights;
  Tensor mask;
  Granularity granularity = Granularity::kElement;
  /// False for layers whose rows are data coordinates (the output layer):
  /// those are skipped by group-granular pruning.
  bool group_prunable = true;

  MaskedParam() = default;
  MaskedParam(std::string n, Tensor w, bool prunable_groups = true);

  Tensor effective() const;
};

struct MaskState {
  double p_current = 1.0;
  double s_current = 0.0;
  std::size_t total_units = 0;
  std::size_t pruned_units = 0;
  /// Per parameter, the unit indices (element or row/column) whose mask is 1.
  std::map<std::string, std::vector<std::size_t>> kept;
};

struct UpdateOptions {
  /// Overrides each parameter's own granularity when set.
  std::optional<Granularity> granularity;
  /// Budget floor(s * units) per parameter instead of over the pooled set.
  bool per_layer = false;
};

/// A rankable unit: an element, or a row/column group of one parameter.
struct Unit {
  double score = 0.0;
  std::size_t param = 0;
  std::size_t index = 0;
};

/// Ascending by score; ties by (parameter name, unit index).
void rank_units(std::vector<Unit>& units, std::span<const std::string> names);

/// Number of units pruned at sparsity s out of `total`.
std::size_t prune_count(double s, std::size_t total);

double soft_sparsity(std::span<const MaskedParam> params, double p);

/// Recomputes every mask from scratch: the floor(s_t * units) lowest-scoring
/// units get p_t, everything else 1.
MaskState apply_mask_update(std::span<MaskedParam> params, const ImportanceScores& scores,
                            double s_t, double p_t, const UpdateOptions& options = {});

/// Units whose kept/pruned status differs between two states.
std::size_t churn(const MaskState& before, const MaskState& after);

std::size_t nonzero_params(std::span<const MaskedParam> params);
std::size_t dense_params(std::span<const MaskedParam> params);

/// Flat indices of zero mask entries, per parameter.
std::map<std::string, std::vector<std::size_t>> zero_sets(std::span<const MaskedParam> params);

}  // namespace gfprune::mask
