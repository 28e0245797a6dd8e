#include "gfprune/datasets.hpp"

#include <cmath>
#include <numbers>

#include "gfprune/error.hpp"
#include "gfprune/rng.hpp"

namespace gfprune::data {

namespace {

constexpr int kRingModes = 8;
constexpr double kRingSigma = 0.05;

void ring_mixture(Rng& rng, Tensor& out) {
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const auto mode = static_cast<double>(rng.below(kRingModes));
    const double angle = 2.0 * std::numbers::pi * mode / kRingModes;
    const double nx = rng.normal();
    const double ny = rng.normal();
    out.at(i, 0) = std::cos(angle) + kRingSigma * nx;
    out.at(i, 1) = std::sin(angle) + kRingSigma * ny;
  }
}

void checkerboard(Rng& rng, Tensor& out) {
  for (std::size_t i = 0; i < out.rows(); ++i) {
    // One of the 8 cells with even floor-sum, then a uniform point inside it.
    const auto cell = static_cast<int>(rng.below(8));
    const int cx = cell % 4 - 2;
    const int cy = ((cx + 2) % 2 == 0 ? -2 : -1) + 2 * (cell / 4);
    const double u = rng.uniform();
    const double v = rng.uniform();
    out.at(i, 0) = cx + u;
    out.at(i, 1) = cy + v;
  }
}

void tiny_shapes(Rng& rng, Tensor& out) {
  constexpr std::size_t side = kImageSide;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const auto kind = rng.below(3);
    std::size_t h = 0;
    std::size_t w = 0;
    if (kind == 0) {  // horizontal bar
      h = 1;
      w = 3 + rng.below(side - 2);  // 3..8
    } else if (kind == 1) {  // vertical bar
      w = 1;
      h = 3 + rng.below(side - 2);
    } else {  // rectangle
      h = 2 + rng.below(3);
      w = 2 + rng.below(3);
    }
    const std::size_t r0 = rng.below(side - h + 1);
    const std::size_t c0 = rng.below(side - w + 1);
    for (std::size_t r = r0; r < r0 + h; ++r) {
      for (std::size_t c = c0; c < c0 + w; ++c) out.at(i, r * side + c) = 1.0;
    }
  }
}

}  // namespace

std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::kRingMixture: return "ring-mixture";
    case Kind::kCheckerboard: return "checkerboard";
    case Kind::kTinyShapes: return "tiny-shapes";
  }
  return "?";
}

Kind parse_kind(std::string_view s) {
  if (s == "ring-mixture") return Kind::kRingMixture;
  if (s == "checkerboard") return Kind::kCheckerboard;
  if (s == "tiny-shapes") return Kind::kTinyShapes;
  throw ArgumentError("unknown dataset kind '" + std::string(s) + "'");
}

std::size_t kind_dim(Kind k) { return k == Kind::kTinyShapes ? kImageSide * kImageSide : 2; }

double standard_scale(Kind k) {
  switch (k) {
    case Kind::kRingMixture:
      // E[x^2] = 1/2 (uniform angle on the unit circle) + sigma^2
      return std::sqrt(0.5 + kRingSigma * kRingSigma);
    case Kind::kCheckerboard:
      // Cell centres at +-0.5, +-1.5 equally often, plus uniform variance 1/12.
      return std::sqrt(1.25 + 1.0 / 12.0);
    case Kind::kTinyShapes:
      return 1.0;
  }
  return 1.0;
}

Tensor generate(const DatasetSpec& spec) {
  if (spec.size == 0) throw ArgumentError("dataset size must be positive");
  Tensor out({spec.size, kind_dim(spec.kind)}, 0.0);
  Rng rng = Rng::derive(spec.seed, static_cast<std::uint64_t>(spec.kind) + 1);
  switch (spec.kind) {
    case Kind::kRingMixture:
      ring_mixture(rng, out);
      break;
    case Kind::kCheckerboard:
      checkerboard(rng, out);
      break;
    case Kind::kTinyShapes:
      tiny_shapes(rng, out);
      break;
  }
  if (spec.standardize && spec.kind != Kind::kTinyShapes) {
    const double s = standard_scale(spec.kind);
    for (double& v : out.raw()) v /= s;
  }
  return out;
}

}  // namespace gfprune::data
