#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gfprune/criteria.hpp"
#include "gfprune/diffusion.hpp"
#include "gfprune/masking.hpp"

namespace gfprune::pruning {

/// How (s_t, p_t) evolve over the iterative stage.
///   one-shot               no iterative stage; a single hard prune
///   iterative              s_t = s,          p_t = 0
///   iterative+soft         s_t = s,          p_t ramps 1 -> 0 over N iterations
///   iterative+progressive  s_t ramps 0 -> s, p_t = 0
///   progressive-soft       s_t ramps 0 -> s, p_t ramps 1 -> 0
enum class ScheduleMode {
  kOneShot,
  kIterative,
  kIterativeSoft,
  kIterativeProgressive,
  kProgressiveSoft,
};

std::string_view mode_name(ScheduleMode m);
ScheduleMode parse_mode(std::string_view s);

struct PrunePlan {
  /// Target sparsity. 0 makes the whole pipeline an identity.
  double s = 0.5;
  /// Total weight-training steps of the pruning run (iterative + finetune).
  std::size_t K = 20000;
  /// Mask iterations of the iterative stage.
  std::size_t M_iters = 40;
  /// Mask iterations over which s_t and p_t ramp.
  std::size_t N = 20;
  /// Weight-training steps between consecutive mask updates.
  std::size_t interval = 100;
  Criterion criterion = Criterion::kGradientFlow;
  ScheduleMode mode = ScheduleMode::kProgressiveSoft;
  mask::Granularity granularity = mask::Granularity::kElement;
  bool per_layer = false;
  Criterion final_criterion = Criterion::kTaylor;
  mask::Granularity final_granularity = mask::Granularity::kRowGroup;
  bool final_per_layer = true;

  /// Mask iterations actually run (0 in one-shot mode).
  std::size_t mask_iterations() const;
  std::size_t finetune_steps() const;
};

/// Throws ArgumentError unless 0 <= s < 1, N <= M_iters and
/// M_iters * interval <= K.
void validate(const PrunePlan& plan);

struct ScheduleStep {
  std::size_t t = 0;
  double s_t = 0.0;
  double p_t = 1.0;
};

/// Requires 0 <= t <= M_iters.
ScheduleStep schedule_at(const PrunePlan& plan, std::size_t t);

/// Norm of the vector 1 - p_t (1 - 1[kept]) where "kept" is the top
/// (1 - s_t) fraction of I / ||I||_2, i.e. sqrt(kept + pruned * (1 - p_t)^2).
/// The pruned set matches mask::apply_mask_update at element granularity.
double energy_flow(const ImportanceScores& scores, double s_t, double p_t);

/// The same quantity read off realised masks: entries equal to 1 count as kept.
double energy_flow_from_masks(std::span<const mask::MaskedParam> params, double p_t);

struct DiagnosticRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double grad_flow = 0.0;
  double energy = 0.0;
  double s_t = 0.0;
  double p_t = 1.0;
  std::size_t churn = 0;
  double soft_sparsity = 0.0;
  std::optional<double> quality;
};

struct EnergyDiagnostics {
  std::vector<DiagnosticRecord> records;
};

/// Called after each iteration's training interval; may return a quality
/// value (e.g. a Frechet distance) to log.
using QualityProbe =
    std::function<std::optional<double>(std::size_t iteration, const diffusion::NoisePredictor&)>;

struct RunContext {
  const diffusion::Schedule* sched = nullptr;
  const Tensor* data = nullptr;
  diffusion::AdamConfig adam;
  criteria::ScoreConfig scoring;
  std::uint64_t seed = 0;
  std::size_t diagnostic_batch = 256;
  QualityProbe probe;
};

struct IterativeResult {
  EnergyDiagnostics diagnostics;
  diffusion::AdamState optimizer;
  std::optional<mask::MaskState> last_state;
};

/// The iterative stage: for t in [0, M_iters) score, apply_mask_update(s_t,
/// p_t), log diagnostics, then train `interval` steps with masks applied.
IterativeResult run_progressive_soft(diffusion::NoisePredictor& model, const PrunePlan& plan,
                                     const RunContext& ctx);

struct HardPruneReport {
  mask::MaskState state;
  /// Jaccard overlap between the element sets with mask 1 before and after.
  double kept_overlap = 1.0;
};

/// One-shot hard prune (p = 0) to sparsity s with the plan's final criterion
/// and granularity. Replaces any soft mask.
HardPruneReport final_hard_prune(diffusion::NoisePredictor& model, const PrunePlan& plan,
                                 const RunContext& ctx);

/// Trains only unpruned entries; masks are left untouched.
diffusion::TrainTrace finetune(diffusion::NoisePredictor& model, std::size_t steps,
                               const RunContext& ctx, diffusion::AdamState& optimizer);

}  // namespace gfprune::pruning
