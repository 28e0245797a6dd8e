#pragma once

// Run configuration and its text format.
//
// The file is a flat list of typed entries, one per line:
//
//   # comment (also allowed after a value)
//   <type> <key> = <value>
//
// type is one of int, float, bool, string, ints. ints is a comma-separated
// list of non-negative integers. Strings run to the end of the line (or to a
// " #" comment) with surrounding whitespace trimmed. Unknown keys and type
// mismatches are errors; omitted keys keep their defaults. format_config()
// writes every key, with floats at 17 significant digits, so
// parse_config(format_config(c)) == c.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gfprune/criteria.hpp"
#include "gfprune/datasets.hpp"
#include "gfprune/diffusion.hpp"
#include "gfprune/scheduler.hpp"

namespace gfprune::harness {

struct EvalConfig {
  std::size_t samples = 10000;
  std::uint64_t seed = 777;
  std::size_t ddim_steps = 100;
  /// Per-iteration quality probes during the iterative stage.
  std::size_t trace_samples = 2000;
  std::size_t trace_ddim_steps = 50;
  std::size_t raster = 32;
  double bandwidth = 0.2;
};

struct DiffusionConfig {
  std::size_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct StageToggles {
  bool pretrain = true;
  bool prune = true;
  bool evaluate = true;
};

struct RunConfig {
  data::DatasetSpec dataset;
  diffusion::ModelSpec model;
  DiffusionConfig diffusion;
  diffusion::AdamConfig adam;
  std::size_t pretrain_steps = 10000;
  std::size_t log_interval = 100;
  pruning::PrunePlan plan;
  criteria::ScoreConfig scoring;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string out_dir = "runs";
  StageToggles stages;

  friend bool operator==(const RunConfig&, const RunConfig&);
};

RunConfig parse_config(std::string_view text);
std::string format_config(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& config);

/// FNV-1a of format_config(config).
std::uint64_t config_hash(const RunConfig& config);

/// Everything that determines a pretrained model, hashed separately so prune
/// variants can share pretraining checkpoints.
std::uint64_t pretrain_hash(const RunConfig& config);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace gfprune::harness
