#include "gfprune/importance.hpp"

#include <cmath>

#include "gfprune/error.hpp"

namespace gfprune {

std::string_view criterion_name(Criterion c) {
  switch (c) {
    case Criterion::kMagnitude: return "magnitude";
    case Criterion::kTaylor: return "taylor";
    case Criterion::kGradientFlow: return "gradient-flow";
  }
  return "?";
}

Criterion parse_criterion(std::string_view s) {
  if (s == "magnitude") return Criterion::kMagnitude;
  if (s == "taylor") return Criterion::kTaylor;
  if (s == "gradient-flow" || s == "grad-flow" || s == "gf") return Criterion::kGradientFlow;
  throw ArgumentError("unknown criterion '" + std::string(s) + "'");
}

std::size_t ImportanceScores::total_units() const {
  std::size_t n = 0;
  for (const auto& [_, t] : scores) n += t.size();
  return n;
}

double ImportanceScores::l2_norm() const {
  double s = 0.0;
  for (const auto& [_, t] : scores) s += dot(t, t);
  return std::sqrt(s);
}

}  // namespace gfprune
