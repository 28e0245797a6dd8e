#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gfprune/checkpoint.hpp"
#include "gfprune/config.hpp"
#include "gfprune/metrics.hpp"
#include "gfprune/scheduler.hpp"

namespace gfprune::harness {

/// Dataset and diffusion schedule shared read-only by every run of a config.
struct World {
  diffusion::Schedule sched;
  Tensor data;
};

World make_world(const RunConfig& config);

struct Pretrained {
  diffusion::NoisePredictor model;
  diffusion::AdamState optimizer;
  diffusion::TrainTrace trace;
};

/// Pretrains a dense model for config.pretrain_steps. Initialisation and batch
/// streams derive from `seed`.
Pretrained pretrain(const RunConfig& config, const World& world, std::uint64_t seed);

/// Batch stream seed of pretraining for an experiment seed.
std::uint64_t pretrain_batch_seed(std::uint64_t seed);

/// DDIM samples with the evaluation seed and step count of the config.
Tensor eval_samples(const diffusion::NoisePredictor& model, const World& world,
                    const RunConfig& config);

/// Frechet distance of `samples` to the training data and SSIM against
/// `reference` (samples of the dense model from the same noise). 2-D point
/// sets are compared through density rasters, images pixel-wise.
metrics::QualityReport evaluate_samples(const Tensor& samples, const Tensor* reference,
                                        const diffusion::NoisePredictor& model, const World& world,
                                        const RunConfig& config, mask::Granularity granularity);

metrics::QualityReport evaluate_model(const diffusion::NoisePredictor& model, const Tensor* reference,
                                      const World& world, const RunConfig& config,
                                      mask::Granularity granularity);

/// One pruning arm: a plan run on top of a pretrained model.
struct ArmSpec {
  std::string label;
  pruning::PrunePlan plan;
  /// Record a quality probe after each mask iteration.
  bool trace = false;
  bool evaluate = true;
  /// Stop after "iterative" or "hardprune"; empty runs every stage.
  std::string stop_after;
};

struct StageTime {
  std::string stage;
  double seconds = 0.0;
};

struct ArmResult {
  std::string label;
  std::uint64_t seed = 0;
  pruning::PrunePlan plan;
  metrics::QualityReport report;
  pruning::EnergyDiagnostics diagnostics;
  /// Jaccard overlap of kept sets across the final hard prune.
  double kept_overlap = 1.0;
  diffusion::NoisePredictor model;
  diffusion::AdamState optimizer;
  std::vector<StageTime> timing;
};

struct ArmHooks {
  /// Called with the stage name ("iterative", "hardprune", "final") and the
  /// model state at the end of that stage.
  std::function<void(const std::string&, const diffusion::NoisePredictor&,
                     const diffusion::AdamState&)>
      on_stage;
};

/// Runs the iterative stage, the final hard prune and finetuning, then
/// evaluates. A plan with s = 0 is the identity: no stage runs and the model
/// is returned unchanged.
ArmResult run_arm(const RunConfig& config, const World& world,
                  const diffusion::NoisePredictor& pretrained, const Tensor& dense_reference,
                  const ArmSpec& arm, std::uint64_t seed, const ArmHooks& hooks = {});

/// Output layout of run_pipeline under config.out_dir:
///   seed_<n>/pretrain.ckpt, iterative.ckpt, hardprune.ckpt, final.ckpt
///   seed_<n>/diagnostics.csv
///   report.json
struct SeedReport {
  std::uint64_t seed = 0;
  std::optional<metrics::QualityReport> dense;
  std::optional<metrics::QualityReport> pruned;
  double kept_overlap = 1.0;
  std::filesystem::path diagnostics_csv;
  std::map<std::string, std::filesystem::path> checkpoints;
  std::vector<StageTime> timing;
};

struct RunReport {
  std::uint64_t config_hash = 0;
  std::vector<SeedReport> seeds;
  std::filesystem::path json_path;
};

std::filesystem::path seed_dir(const RunConfig& config, std::uint64_t seed);
std::filesystem::path stage_checkpoint(const RunConfig& config, std::uint64_t seed,
                                       const std::string& stage);

/// Loads seed_<n>/pretrain.ckpt when it exists and matches the pretraining
/// part of the config; otherwise pretrains (if config.stages.pretrain) and
/// saves it. Throws MissingCheckpointError when pretraining is disabled and
/// nothing usable is on disk.
diffusion::NoisePredictor pretrain_or_load(const RunConfig& config, const World& world,
                                           std::uint64_t seed);

/// pretrain-or-load, then run_arm with config.plan for every seed, writing
/// stage checkpoints, a diagnostics CSV per seed and report.json. Honours the
/// stage toggles; `stop_after` is passed to the arm.
RunReport run_pipeline(const RunConfig& config, const std::string& stop_after = "");

std::string report_json(const RunReport& report);
std::string quality_json(const metrics::QualityReport& q);

void write_diagnostics_csv(const std::filesystem::path& path, const pruning::EnergyDiagnostics& d);

/// Runs arms across seeds, sharing pretrained models, dense reference samples
/// and arms requested by several tables.
class ExperimentRunner {
 public:
  ExperimentRunner(RunConfig config);

  const RunConfig& config() const noexcept { return config_; }
  const World& world() const noexcept { return world_; }

  /// Pretrained model and its evaluation for a seed.
  const diffusion::NoisePredictor& pretrained(std::uint64_t seed);
  const metrics::QualityReport& dense_report(std::uint64_t seed);
  const Tensor& dense_samples(std::uint64_t seed);

  const ArmResult& arm(const ArmSpec& spec, std::uint64_t seed);

  /// Wall-clock seconds spent so far.
  double elapsed() const;

 private:
  struct SeedCache {
    diffusion::NoisePredictor model;
    Tensor samples;
    metrics::QualityReport report;
  };
  SeedCache& seed_cache(std::uint64_t seed);

  RunConfig config_;
  World world_;
  std::map<std::uint64_t, SeedCache> seeds_;
  std::map<std::string, ArmResult> arms_;
  double elapsed_ = 0.0;
};

/// Arm definitions of the experiment tables, derived from config.plan (which
/// supplies s, K, M_iters, N, interval and the final-prune settings).
ArmSpec progressive_soft_arm(const RunConfig& config, Criterion criterion, bool trace = false);
ArmSpec diff_pruning_arm(const RunConfig& config);
ArmSpec iterative_arm(const RunConfig& config, Criterion criterion, pruning::ScheduleMode mode);

struct TableRow {
  std::string method;
  std::string criterion;
  std::vector<std::uint64_t> seeds;
  std::vector<metrics::QualityReport> per_seed;

  double median_frechet() const;
  double median_ssim() const;
};

struct Table {
  std::string name;
  std::vector<TableRow> rows;

  const TableRow& row(const std::string& method, const std::string& criterion = "") const;
  std::string csv() const;
  std::string json() const;
};

/// dense, magnitude, taylor, diff-pruning and gradient-flow rows. The three
/// criterion rows run the full progressive-soft pipeline with that criterion;
/// diff-pruning is the one-shot taylor row-group prune.
Table table1(ExperimentRunner& runner);

/// Iterative pruning with magnitude and taylor, then gradient-flow under
/// iterative, +soft, +progressive and progressive-soft: six rows.
Table table2(ExperimentRunner& runner);

/// One-shot gradient-flow reference for the schedule ablation.
TableRow one_shot_row(ExperimentRunner& runner);

struct Fig2Point {
  std::uint64_t seed = 0;
  std::string criterion;
  pruning::DiagnosticRecord record;
};

struct Fig2 {
  std::vector<Fig2Point> points;
  std::string csv() const;
  /// Per seed, the quality trace of one criterion in iteration order.
  std::vector<std::vector<double>> traces(const std::string& criterion) const;
};

/// Quality traces during the progressive-soft iterative stage for magnitude,
/// taylor and gradient-flow.
Fig2 fig2(ExperimentRunner& runner);

/// First iteration from which the trace stays within `tolerance` (relative)
/// of its last value.
std::size_t settling_iteration(const std::vector<double>& trace, double tolerance = 0.1);

double median(std::vector<double> values);

}  // namespace gfprune::harness
