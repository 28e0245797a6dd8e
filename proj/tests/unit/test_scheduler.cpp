#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "gfprune/error.hpp"
#include "gfprune/masking.hpp"
#include "gfprune/scheduler.hpp"

using namespace gfprune;
using namespace gfprune::pruning;

namespace {

PrunePlan plan_with(double s, std::size_t N, std::size_t M, ScheduleMode mode = ScheduleMode::kProgressiveSoft) {
  PrunePlan p;
  p.s = s;
  p.N = N;
  p.M_iters = M;
  p.interval = 1;
  p.K = 1000;
  p.mode = mode;
  return p;
}

struct Small {
  diffusion::Schedule sched = fixtures::small_schedule();
  Tensor data = fixtures::ring_data(1024, 2);
  diffusion::NoisePredictor model{diffusion::ModelSpec{{2}, {16, 16}, 8}, 3};
  RunContext ctx;

  Small() {
    ctx.sched = &sched;
    ctx.data = &data;
    ctx.adam.batch_size = 32;
    ctx.adam.lr = 1e-3;
    ctx.scoring.batches = 1;
    ctx.scoring.batch_size = 32;
    ctx.diagnostic_batch = 32;
    ctx.seed = 4;
  }
};

}  // namespace

TEST(Schedule, Examples) {
  const PrunePlan p = plan_with(0.5, 10, 20);
  const auto a = schedule_at(p, 0);
  EXPECT_EQ(a.s_t, 0.0);
  EXPECT_EQ(a.p_t, 1.0);
  const auto b = schedule_at(p, 5);
  EXPECT_EQ(b.s_t, 0.25);
  EXPECT_EQ(b.p_t, 0.5);
  const auto c = schedule_at(p, 12);
  EXPECT_EQ(c.s_t, 0.5);
  EXPECT_EQ(c.p_t, 0.0);
  const auto d = schedule_at(p, 10);
  EXPECT_EQ(d.s_t, 0.5);
  EXPECT_EQ(d.p_t, 0.0);
}

TEST(Schedule, MatchesRampFormulasAtEveryStep) {
  for (double s : {0.5, 0.3, 0.7}) {
    for (std::size_t N : {1u, 3u, 10u, 7u}) {
      const PrunePlan p = plan_with(s, N, N + 5);
      for (std::size_t t = 0; t <= p.M_iters; ++t) {
        const auto st = schedule_at(p, t);
        const double ws = t < N ? static_cast<double>(t) * s / static_cast<double>(N) : s;
        const double wp = t < N ? 1.0 - static_cast<double>(t) / static_cast<double>(N) : 0.0;
        EXPECT_NEAR(st.s_t, ws, 1e-12);
        EXPECT_NEAR(st.p_t, wp, 1e-12);
        EXPECT_EQ(st.t, t);
      }
    }
  }
}

TEST(Schedule, AblationModes) {
  const std::size_t N = 4;
  for (std::size_t t = 0; t <= 8; ++t) {
    const auto it = schedule_at(plan_with(0.5, N, 8, ScheduleMode::kIterative), t);
    EXPECT_EQ(it.s_t, 0.5);
    EXPECT_EQ(it.p_t, 0.0);
    const auto soft = schedule_at(plan_with(0.5, N, 8, ScheduleMode::kIterativeSoft), t);
    EXPECT_EQ(soft.s_t, 0.5);
    EXPECT_EQ(soft.p_t, t < N ? 1.0 - t / 4.0 : 0.0);
    const auto prog = schedule_at(plan_with(0.5, N, 8, ScheduleMode::kIterativeProgressive), t);
    EXPECT_EQ(prog.s_t, t < N ? t * 0.5 / 4.0 : 0.5);
    EXPECT_EQ(prog.p_t, 0.0);
  }
  EXPECT_EQ(plan_with(0.5, 0, 0, ScheduleMode::kOneShot).mask_iterations(), 0u);
  PrunePlan one = plan_with(0.5, 4, 8, ScheduleMode::kOneShot);
  EXPECT_EQ(one.mask_iterations(), 0u);
  EXPECT_EQ(one.finetune_steps(), one.K);
}

TEST(Schedule, Monotone) {
  for (auto mode : {ScheduleMode::kIterative, ScheduleMode::kIterativeSoft, ScheduleMode::kIterativeProgressive,
                    ScheduleMode::kProgressiveSoft}) {
    const PrunePlan p = plan_with(0.6, 9, 15, mode);
    for (std::size_t t = 1; t <= p.M_iters; ++t) {
      EXPECT_GE(schedule_at(p, t).s_t, schedule_at(p, t - 1).s_t);
      EXPECT_LE(schedule_at(p, t).p_t, schedule_at(p, t - 1).p_t);
    }
  }
}

TEST(Schedule, RejectsInvalidPlansAndIndices) {
  EXPECT_THROW(schedule_at(plan_with(0.5, 10, 20), 21), ArgumentError);
  EXPECT_THROW(validate(plan_with(1.0, 10, 20)), ArgumentError);
  EXPECT_THROW(validate(plan_with(-0.1, 10, 20)), ArgumentError);
  EXPECT_THROW(validate(plan_with(0.5, 21, 20)), ArgumentError);
  PrunePlan p = plan_with(0.5, 10, 20);
  p.interval = 100;
  EXPECT_THROW(validate(p), ArgumentError);
  p.K = 2000;
  EXPECT_NO_THROW(validate(p));
  EXPECT_EQ(p.finetune_steps(), 0u);
}

TEST(Schedule, ModeNamesRoundTrip) {
  for (auto m : {ScheduleMode::kOneShot, ScheduleMode::kIterative, ScheduleMode::kIterativeSoft,
                 ScheduleMode::kIterativeProgressive, ScheduleMode::kProgressiveSoft}) {
    EXPECT_EQ(parse_mode(mode_name(m)), m);
  }
  EXPECT_THROW(parse_mode("cyclic"), ArgumentError);
}

TEST(Energy, FourUnitExample) {
  ImportanceScores s;
  s.scores["w"] = Tensor::vector({4, 16, 1, 9});
  EXPECT_DOUBLE_EQ(energy_flow(s, 0.5, 0.5), std::sqrt(2.5));
  EXPECT_DOUBLE_EQ(energy_flow(s, 0.5, 0.0), 2.0);
  EXPECT_DOUBLE_EQ(energy_flow(s, 0.0, 0.7), 2.0);
  s.scores["w"] = Tensor({4}, 0.0);
  EXPECT_THROW(energy_flow(s, 0.5, 0.5), ArgumentError);
}

TEST(Energy, ClosedFormOnRandomScores) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    ImportanceScores s;
    const std::size_t a = 1 + rng.below(30);
    const std::size_t b = 1 + rng.below(30);
    s.scores["a"] = fixtures::random_tensor({a}, rng);
    s.scores["b"] = fixtures::random_tensor({b}, rng);
    const double s_t = rng.uniform();
    const double p_t = rng.uniform();
    const double pruned = std::floor(s_t * static_cast<double>(a + b) + 1e-9);
    const double kept = static_cast<double>(a + b) - pruned;
    const double want = std::sqrt(kept + pruned * (1 - p_t) * (1 - p_t));
    EXPECT_NEAR(energy_flow(s, s_t, p_t), want, 1e-12);
  }
}

TEST(Energy, RealisedMasksMatchScores) {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<mask::MaskedParam> ps;
    ps.emplace_back("a", fixtures::random_tensor({5, 4}, rng));
    ps.emplace_back("b", fixtures::random_tensor({9}, rng));
    ImportanceScores s;
    s.scores["a"] = fixtures::random_tensor({5, 4}, rng);
    s.scores["b"] = fixtures::random_tensor({9}, rng);
    const double s_t = rng.uniform(0.0, 0.9);
    const double p_t = rng.uniform(0.0, 0.95);
    mask::apply_mask_update(ps, s, s_t, p_t);
    EXPECT_EQ(energy_flow_from_masks(ps, p_t), energy_flow(s, s_t, p_t));
  }
}

TEST(Pipeline, IdentityMaskAtStepZeroKeepsDenseOutput) {
  Small w;
  const diffusion::NoisePredictor dense = w.model;
  const auto st = schedule_at(plan_with(0.5, 10, 20), 0);
  const auto scores = criteria::compute_scores(Criterion::kGradientFlow, w.model, w.sched, w.data, w.ctx.scoring);
  mask::apply_mask_update(w.model.weights(), scores, st.s_t, st.p_t);
  const Tensor x = fixtures::ring_data(16, 8);
  const std::vector<std::size_t> t(16, 42);
  EXPECT_TRUE(bit_identical(w.model.predict(x, t), dense.predict(x, t)));
}

TEST(Pipeline, IterativeStageLogsOneRecordPerMaskUpdate) {
  Small w;
  PrunePlan p = plan_with(0.5, 3, 6);
  p.interval = 2;
  p.K = 20;
  std::size_t probes = 0;
  w.ctx.probe = [&](std::size_t, const diffusion::NoisePredictor&) -> std::optional<double> {
    return static_cast<double>(probes++);
  };
  const auto res = run_progressive_soft(w.model, p, w.ctx);
  ASSERT_EQ(res.diagnostics.records.size(), 6u);
  EXPECT_EQ(res.optimizer.step, 12u);
  for (std::size_t t = 0; t < 6; ++t) {
    const auto& r = res.diagnostics.records[t];
    const auto st = schedule_at(p, t);
    EXPECT_EQ(r.iteration, t);
    EXPECT_EQ(r.s_t, st.s_t);
    EXPECT_EQ(r.p_t, st.p_t);
    EXPECT_GE(r.energy, 0.0);
    EXPECT_GE(r.grad_flow, 0.0);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_EQ(r.quality, std::optional<double>(static_cast<double>(t)));
  }
  EXPECT_EQ(res.diagnostics.records[0].churn, 0u);
  // The masks after the loop belong to the last update (s, 0).
  EXPECT_NEAR(mask::soft_sparsity(w.model.weights(), 0.0), 0.5,
              1.0 / static_cast<double>(mask::dense_params(w.model.weights())));
}

TEST(Pipeline, IterativeStageIsDeterministic) {
  Small a;
  Small b;
  PrunePlan p = plan_with(0.5, 2, 4);
  p.interval = 2;
  p.K = 20;
  const auto ra = run_progressive_soft(a.model, p, a.ctx);
  const auto rb = run_progressive_soft(b.model, p, b.ctx);
  for (const auto& n : a.model.param_names()) EXPECT_TRUE(bit_identical(a.model.param(n), b.model.param(n)));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ra.diagnostics.records[i].loss, rb.diagnostics.records[i].loss);
    EXPECT_EQ(ra.diagnostics.records[i].grad_flow, rb.diagnostics.records[i].grad_flow);
  }
}

TEST(Pipeline, HardPruneHitsTargetAndReportsOverlap) {
  Small w;
  PrunePlan p = plan_with(0.5, 2, 4);
  p.interval = 2;
  p.K = 20;
  p.final_granularity = mask::Granularity::kElement;
  p.final_per_layer = false;
  run_progressive_soft(w.model, p, w.ctx);
  const auto rep = final_hard_prune(w.model, p, w.ctx);
  const double quantum = 1.0 / static_cast<double>(mask::dense_params(w.model.weights()));
  EXPECT_NEAR(mask::soft_sparsity(w.model.weights(), 0.0), 0.5, quantum);
  EXPECT_GE(rep.kept_overlap, 0.0);
  EXPECT_LE(rep.kept_overlap, 1.0);
  for (const auto& m : w.model.weights()) {
    for (double v : m.mask.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(Pipeline, RowGroupHardPruneHalvesPrunableLayers) {
  Small w;
  PrunePlan p = plan_with(0.5, 2, 4);
  const auto rep = final_hard_prune(w.model, p, w.ctx);
  for (const auto& m : w.model.weights()) {
    std::size_t zero_rows = 0;
    for (std::size_t r = 0; r < m.mask.rows(); ++r) zero_rows += m.mask.at(r, 0) == 0.0;
    EXPECT_EQ(zero_rows, m.group_prunable ? m.mask.rows() / 2 : 0u) << m.name;
  }
  EXPECT_EQ(rep.state.p_current, 0.0);
}

TEST(Pipeline, FinetuneLeavesPrunedSetAndWeightsUntouched) {
  Small w;
  PrunePlan p = plan_with(0.5, 2, 4);
  p.interval = 2;
  p.K = 28;
  auto res = run_progressive_soft(w.model, p, w.ctx);
  final_hard_prune(w.model, p, w.ctx);
  const auto before = w.model;
  const auto zeros_before = mask::zero_sets(w.model.weights());
  finetune(w.model, p.finetune_steps(), w.ctx, res.optimizer);
  EXPECT_EQ(mask::zero_sets(w.model.weights()), zeros_before);
  bool any_moved = false;
  for (std::size_t k = 0; k < w.model.weights().size(); ++k) {
    const auto& a = before.weights()[k];
    const auto& b = w.model.weights()[k];
    EXPECT_EQ(a.mask, b.mask);
    for (std::size_t i = 0; i < a.mask.size(); ++i) {
      if (a.mask[i] == 0.0) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(a.weights[i]), std::bit_cast<std::uint64_t>(b.weights[i]));
      } else {
        any_moved |= a.weights[i] != b.weights[i];
      }
    }
  }
  EXPECT_TRUE(any_moved);
}

TEST(Pipeline, NeedsScheduleAndData) {
  diffusion::NoisePredictor m(fixtures::tiny_spec(), 1);
  EXPECT_THROW(run_progressive_soft(m, plan_with(0.5, 2, 4), RunContext{}), ArgumentError);
}
