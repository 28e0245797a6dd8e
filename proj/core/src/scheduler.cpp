#include "gfprune/scheduler.hpp"

#include <cmath>

#include "gfprune/error.hpp"

namespace gfprune::pruning {

std::string_view mode_name(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::kOneShot: return "one-shot";
    case ScheduleMode::kIterative: return "iterative";
    case ScheduleMode::kIterativeSoft: return "iterative+soft";
    case ScheduleMode::kIterativeProgressive: return "iterative+progressive";
    case ScheduleMode::kProgressiveSoft: return "progressive-soft";
  }
  return "?";
}

ScheduleMode parse_mode(std::string_view s) {
  if (s == "one-shot") return ScheduleMode::kOneShot;
  if (s == "iterative") return ScheduleMode::kIterative;
  if (s == "iterative+soft") return ScheduleMode::kIterativeSoft;
  if (s == "iterative+progressive") return ScheduleMode::kIterativeProgressive;
  if (s == "progressive-soft" || s == "iterative+progressive-soft") {
    return ScheduleMode::kProgressiveSoft;
  }
  throw ArgumentError("unknown schedule mode '" + std::string(s) + "'");
}

std::size_t PrunePlan::mask_iterations() const {
  return mode == ScheduleMode::kOneShot ? 0 : M_iters;
}

std::size_t PrunePlan::finetune_steps() const { return K - mask_iterations() * interval; }

void validate(const PrunePlan& plan) {
  if (!(plan.s >= 0.0 && plan.s < 1.0)) throw ArgumentError("target sparsity must lie in [0,1)");
  if (plan.N > plan.M_iters) throw ArgumentError("plan needs N <= M_iters");
  if (plan.mode != ScheduleMode::kOneShot && plan.interval == 0) {
    throw ArgumentError("plan needs interval >= 1");
  }
  if (plan.mask_iterations() * plan.interval > plan.K) {
    throw ArgumentError("plan needs M_iters * interval <= K");
  }
}

ScheduleStep schedule_at(const PrunePlan& plan, std::size_t t) {
  if (t > plan.M_iters) {
    throw ArgumentError("schedule index " + std::to_string(t) + " outside [0, " +
                        std::to_string(plan.M_iters) + "]");
  }
  const bool ramping = t < plan.N;
  const double td = static_cast<double>(t);
  const double nd = static_cast<double>(plan.N);
  const double ramp_s = ramping ? td * plan.s / nd : plan.s;
  const double ramp_p = ramping ? 1.0 - td / nd : 0.0;
  ScheduleStep step;
  step.t = t;
  switch (plan.mode) {
    case ScheduleMode::kProgressiveSoft:
      step.s_t = ramp_s;
      step.p_t = ramp_p;
      break;
    case ScheduleMode::kIterativeSoft:
      step.s_t = plan.s;
      step.p_t = ramp_p;
      break;
    case ScheduleMode::kIterativeProgressive:
      step.s_t = ramp_s;
      step.p_t = 0.0;
      break;
    case ScheduleMode::kIterative:
    case ScheduleMode::kOneShot:
      step.s_t = plan.s;
      step.p_t = 0.0;
      break;
  }
  return step;
}

double energy_flow(const ImportanceScores& scores, double s_t, double p_t) {
  const double norm = scores.l2_norm();
  if (!(norm > 0.0)) throw ArgumentError("energy_flow needs a non-zero score vector");
  std::vector<std::string> names;
  std::vector<mask::Unit> units;
  for (const auto& [name, t] : scores.scores) {
    const std::size_t param = names.size();
    names.push_back(name);
    for (std::size_t i = 0; i < t.size(); ++i) units.push_back({t[i] / norm, param, i});
  }
  mask::rank_units(units, names);
  const std::size_t pruned = mask::prune_count(s_t, units.size());
  const std::size_t kept = units.size() - pruned;
  // Entries: 1 on kept units, 1 - p_t on pruned ones.
  const double q = 1.0 - p_t;
  return std::sqrt(static_cast<double>(kept) + static_cast<double>(pruned) * q * q);
}

double energy_flow_from_masks(std::span<const mask::MaskedParam> params, double p_t) {
  std::size_t kept = 0;
  std::size_t pruned = 0;
  for (const auto& p : params) {
    for (double m : p.mask.data()) ++(m == 1.0 ? kept : pruned);
  }
  const double q = 1.0 - p_t;
  return std::sqrt(static_cast<double>(kept) + static_cast<double>(pruned) * q * q);
}

namespace {

criteria::ScoreConfig scoring_for(const RunContext& ctx, std::uint64_t tag) {
  criteria::ScoreConfig c = ctx.scoring;
  c.seed = mix64(ctx.seed ^ mix64(tag));
  return c;
}

diffusion::TrainOptions train_options(const RunContext& ctx, bool freeze) {
  diffusion::TrainOptions o;
  o.batch_seed = mix64(ctx.seed + 0x7A11);
  o.freeze_pruned = freeze;
  o.log_interval = 0;
  return o;
}

void require_context(const RunContext& ctx) {
  if (ctx.sched == nullptr || ctx.data == nullptr) {
    throw ArgumentError("pruning run needs a schedule and a dataset");
  }
}

}  // namespace

IterativeResult run_progressive_soft(diffusion::NoisePredictor& model, const PrunePlan& plan,
                                     const RunContext& ctx) {
  validate(plan);
  require_context(ctx);
  IterativeResult res;

  Rng diag_rng = Rng::derive(ctx.seed, 0xD1A6);
  const auto diag_batch =
      diffusion::make_stratified_batch(*ctx.data, ctx.diagnostic_batch, ctx.sched->T, diag_rng);

  const mask::UpdateOptions update{plan.granularity, plan.per_layer};
  for (std::size_t t = 0; t < plan.mask_iterations(); ++t) {
    const ScheduleStep step = schedule_at(plan, t);
    const auto scores = criteria::compute_scores(plan.criterion, model, *ctx.sched, *ctx.data,
                                                 scoring_for(ctx, 1000 + t));
    mask::MaskState state = mask::apply_mask_update(model.weights(), scores, step.s_t, step.p_t, update);

    DiagnosticRecord rec;
    rec.iteration = t;
    rec.s_t = step.s_t;
    rec.p_t = step.p_t;
    rec.energy = scores.l2_norm() > 0.0 ? energy_flow(scores, step.s_t, step.p_t)
                                        : std::sqrt(static_cast<double>(scores.total_units()));
    rec.churn = res.last_state ? mask::churn(*res.last_state, state) : 0;
    rec.soft_sparsity = mask::soft_sparsity(model.weights(), step.p_t);
    const auto ev = diffusion::loss(model, *ctx.sched, diag_batch);
    rec.loss = ev.value;
    rec.grad_flow = criteria::gradient_flow_delta(ev.record, ev.inputs, model.param_names());
    res.last_state = std::move(state);

    if (plan.interval > 0) {
      diffusion::train(model, *ctx.sched, *ctx.data, plan.interval, ctx.adam, res.optimizer,
                       train_options(ctx, false));
    }
    if (ctx.probe) rec.quality = ctx.probe(t, model);
    res.diagnostics.records.push_back(rec);
  }
  return res;
}

HardPruneReport final_hard_prune(diffusion::NoisePredictor& model, const PrunePlan& plan,
                                 const RunContext& ctx) {
  require_context(ctx);
  std::vector<std::vector<char>> kept_before;
  for (const auto& w : model.weights()) {
    std::vector<char> k(w.mask.size());
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = w.mask[i] == 1.0;
    kept_before.push_back(std::move(k));
  }
  const auto scores = criteria::compute_scores(plan.final_criterion, model, *ctx.sched, *ctx.data,
                                               scoring_for(ctx, 0xF17A1));
  HardPruneReport report;
  report.state = mask::apply_mask_update(model.weights(), scores, plan.s, 0.0,
                                         {plan.final_granularity, plan.final_per_layer});
  std::size_t both = 0;
  std::size_t either = 0;
  for (std::size_t p = 0; p < model.weights().size(); ++p) {
    const auto& m = model.weights()[p].mask;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const bool a = kept_before[p][i];
      const bool b = m[i] == 1.0;
      both += (a && b) ? 1 : 0;
      either += (a || b) ? 1 : 0;
    }
  }
  report.kept_overlap = either ? static_cast<double>(both) / static_cast<double>(either) : 1.0;
  return report;
}

diffusion::TrainTrace finetune(diffusion::NoisePredictor& model, std::size_t steps,
                               const RunContext& ctx, diffusion::AdamState& optimizer) {
  require_context(ctx);
  if (steps == 0) return {};
  return diffusion::train(model, *ctx.sched, *ctx.data, steps, ctx.adam, optimizer,
                          train_options(ctx, true));
}

}  // namespace gfprune::pruning
