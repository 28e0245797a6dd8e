#include "gfprune/masking.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "gfprune/error.hpp"

namespace gfprune::mask {

namespace {

constexpr double kMaskTolerance = 1e-12;

struct ParamUnits {
  Granularity granularity = Granularity::kElement;
  bool skipped = false;
  std::size_t count = 0;
};

ParamUnits units_of(const MaskedParam& p, Granularity g) {
  ParamUnits u;
  u.granularity = g;
  if (g != Granularity::kElement && (!p.group_prunable || p.weights.rank() != 2)) {
    u.skipped = true;
    return u;
  }
  switch (g) {
    case Granularity::kElement:
      u.count = p.weights.size();
      break;
    case Granularity::kRowGroup:
      u.count = p.weights.rows();
      break;
    case Granularity::kColumnGroup:
      u.count = p.weights.cols();
      break;
  }
  return u;
}

double unit_score(const Tensor& s, Granularity g, std::size_t unit) {
  switch (g) {
    case Granularity::kElement:
      return s[unit];
    case Granularity::kRowGroup: {
      double acc = 0.0;
      for (std::size_t c = 0; c < s.cols(); ++c) acc += s.at(unit, c);
      return acc;
    }
    case Granularity::kColumnGroup: {
      double acc = 0.0;
      for (std::size_t r = 0; r < s.rows(); ++r) acc += s.at(r, unit);
      return acc;
    }
  }
  return 0.0;
}

void set_unit(Tensor& mask, Granularity g, std::size_t unit, double value) {
  switch (g) {
    case Granularity::kElement:
      mask[unit] = value;
      break;
    case Granularity::kRowGroup:
      for (std::size_t c = 0; c < mask.cols(); ++c) mask.at(unit, c) = value;
      break;
    case Granularity::kColumnGroup:
      for (std::size_t r = 0; r < mask.rows(); ++r) mask.at(r, unit) = value;
      break;
  }
}

}  // namespace

std::string_view granularity_name(Granularity g) {
  switch (g) {
    case Granularity::kElement: return "element";
    case Granularity::kRowGroup: return "row-group";
    case Granularity::kColumnGroup: return "column-group";
  }
  return "?";
}

Granularity parse_granularity(std::string_view s) {
  if (s == "element") return Granularity::kElement;
  if (s == "row-group" || s == "row") return Granularity::kRowGroup;
  if (s == "column-group" || s == "column") return Granularity::kColumnGroup;
  throw ArgumentError("unknown granularity '" + std::string(s) + "'");
}

MaskedParam::MaskedParam(std::string n, Tensor w, bool prunable_groups)
    : name(std::move(n)), weights(std::move(w)), group_prunable(prunable_groups) {
  mask = Tensor(weights.shape(), 1.0);
}

Tensor MaskedParam::effective() const {
  Tensor out = weights;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return out;
}

void rank_units(std::vector<Unit>& units, std::span<const std::string> names) {
  std::sort(units.begin(), units.end(), [&](const Unit& a, const Unit& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.param != b.param) return names[a.param] < names[b.param];
    return a.index < b.index;
  });
}

std::size_t prune_count(double s, std::size_t total) {
  if (!(s >= 0.0 && s <= 1.0)) throw ArgumentError("sparsity must lie in [0,1]");
  // Guard against 0.1 * 30 == 2.9999999999999996 style truncation.
  const auto k = static_cast<std::size_t>(std::floor(s * static_cast<double>(total) + 1e-9));
  return std::min(k, total);
}

double soft_sparsity(std::span<const MaskedParam> params, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("soft_sparsity: p must lie in [0,1]");
  std::size_t total = 0;
  std::size_t differs = 0;
  for (const auto& prm : params) {
    for (double m : prm.mask.data()) {
      if (std::abs(m - p) > kMaskTolerance) ++differs;
    }
    total += prm.mask.size();
  }
  if (total == 0) return 0.0;
  return 1.0 - static_cast<double>(differs) / static_cast<double>(total);
}

MaskState apply_mask_update(std::span<MaskedParam> params, const ImportanceScores& scores,
                            double s_t, double p_t, const UpdateOptions& options) {
  if (!(s_t >= 0.0 && s_t <= 1.0)) throw ArgumentError("s_t must lie in [0,1]");
  if (!(p_t >= 0.0 && p_t <= 1.0)) throw ArgumentError("p_t must lie in [0,1]");

  std::vector<std::string> names;
  std::vector<ParamUnits> layout;
  for (const auto& prm : params) {
    auto it = scores.scores.find(prm.name);
    if (it == scores.scores.end()) {
      throw ShapeError("no importance scores for parameter '" + prm.name + "'");
    }
    if (it->second.shape() != prm.weights.shape()) {
      throw ShapeError("scores for '" + prm.name + "' have shape " +
                       shape_string(it->second.shape()) + ", weights " +
                       shape_string(prm.weights.shape()));
    }
    names.push_back(prm.name);
    layout.push_back(units_of(prm, options.granularity.value_or(prm.granularity)));
  }
  if (scores.scores.size() != params.size()) {
    throw ShapeError("score set covers " + std::to_string(scores.scores.size()) +
                     " parameters, model has " + std::to_string(params.size()));
  }

  std::vector<std::vector<char>> pruned(params.size());
  std::size_t total = 0;
  std::size_t pruned_total = 0;

  auto collect = [&](std::size_t i, std::vector<Unit>& out) {
    const Tensor& s = scores.scores.at(params[i].name);
    for (std::size_t u = 0; u < layout[i].count; ++u) {
      out.push_back({unit_score(s, layout[i].granularity, u), i, u});
    }
  };

  for (std::size_t i = 0; i < params.size(); ++i) pruned[i].assign(layout[i].count, 0);

  if (options.per_layer) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (layout[i].skipped) continue;
      std::vector<Unit> units;
      collect(i, units);
      rank_units(units, names);
      const std::size_t k = prune_count(s_t, units.size());
      for (std::size_t j = 0; j < k; ++j) pruned[i][units[j].index] = 1;
      total += units.size();
      pruned_total += k;
    }
  } else {
    std::vector<Unit> units;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!layout[i].skipped) collect(i, units);
    }
    rank_units(units, names);
    const std::size_t k = prune_count(s_t, units.size());
    for (std::size_t j = 0; j < k; ++j) pruned[units[j].param][units[j].index] = 1;
    total = units.size();
    pruned_total = k;
  }

  MaskState state;
  state.p_current = p_t;
  state.s_current = s_t;
  state.total_units = total;
  state.pruned_units = pruned_total;
  for (std::size_t i = 0; i < params.size(); ++i) {
    MaskedParam& prm = params[i];
    prm.mask = Tensor(prm.weights.shape(), 1.0);
    if (layout[i].skipped) continue;
    prm.granularity = layout[i].granularity;
    auto& kept = state.kept[prm.name];
    for (std::size_t u = 0; u < layout[i].count; ++u) {
      if (pruned[i][u]) {
        set_unit(prm.mask, layout[i].granularity, u, p_t);
      } else {
        kept.push_back(u);
      }
    }
  }
  return state;
}

std::size_t churn(const MaskState& before, const MaskState& after) {
  std::size_t changed = 0;
  for (const auto& [name, kept_after] : after.kept) {
    auto it = before.kept.find(name);
    if (it == before.kept.end()) continue;
    std::vector<std::size_t> diff;
    std::set_symmetric_difference(it->second.begin(), it->second.end(), kept_after.begin(),
                                  kept_after.end(), std::back_inserter(diff));
    changed += diff.size();
  }
  return changed;
}

std::size_t nonzero_params(std::span<const MaskedParam> params) {
  std::size_t n = 0;
  for (const auto& p : params) {
    for (double m : p.mask.data()) n += (m != 0.0) ? 1 : 0;
  }
  return n;
}

std::size_t dense_params(std::span<const MaskedParam> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.mask.size();
  return n;
}

std::map<std::string, std::vector<std::size_t>> zero_sets(std::span<const MaskedParam> params) {
  std::map<std::string, std::vector<std::size_t>> out;
  for (const auto& p : params) {
    auto& z = out[p.name];
    for (std::size_t i = 0; i < p.mask.size(); ++i) {
      if (p.mask[i] == 0.0) z.push_back(i);
    }
  }
  return out;
}

}  // namespace gfprune::mask
