#pragma once

// Named-tensor container used for checkpoints, score dumps and dataset exports.
//
// Layout (all integers little-endian):
//   8 bytes   magic "GFPCKPT\0"
//   u32       version (1)
//   u32       tensor count
//   per tensor, in name order:
//     u16     name length, then the UTF-8 name
//     u8      dtype (0 = f64)
//     u8      rank, then rank x u64 dims
//     payload prod(dims) x f64
//   u64       FNV-1a of every preceding byte

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gfprune/config.hpp"
#include "gfprune/diffusion.hpp"
#include "gfprune/tensor.hpp"

namespace gfprune::harness {

inline constexpr std::uint32_t kContainerVersion = 1;

std::vector<std::uint8_t> encode_tensors(const NamedTensors& tensors);
NamedTensors decode_tensors(std::span<const std::uint8_t> bytes);

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

/// Model weights, masks, optimizer state and metadata.
struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string stage;
  std::uint64_t iteration = 0;
  diffusion::NoisePredictor model;
  std::optional<diffusion::AdamState> optimizer;
};

/// Tensor names: "<w>", "<w>.mask", "<b>", "adam.m.<p>", "adam.v.<p>",
/// "adam.step", and "__meta.*" for the metadata and model spec. Integers are
/// stored as four 16-bit chunks so they survive the f64 payload exactly.
NamedTensors checkpoint_tensors(const Checkpoint& ckpt);
Checkpoint checkpoint_from_tensors(const NamedTensors& tensors);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gfprune::harness
