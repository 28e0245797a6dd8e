#include <benchmark/benchmark.h>

#include "gfprune/autodiff.hpp"
#include "gfprune/criteria.hpp"
#include "gfprune/datasets.hpp"
#include "gfprune/diffusion.hpp"
#include "gfprune/masking.hpp"
#include "gfprune/metrics.hpp"

using namespace gfprune;

namespace {

Tensor random(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

const Tensor& ring() {
  static const Tensor data = data::generate(data::DatasetSpec{});
  return data;
}

const diffusion::Schedule& schedule() {
  static const diffusion::Schedule s = diffusion::make_schedule(1000, 1e-4, 0.02);
  return s;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  ad::Record r;
  r.set_output(r.matmul(r.input("a", {256, n}), r.input("b", {n, n}), false, true));
  const NamedTensors in = {{"a", random({256, n}, 1)}, {"b", random({n, n}, 2)}};
  for (auto _ : state) benchmark::DoNotOptimize(ad::forward(r, in));
  state.SetItemsProcessed(state.iterations() * 256 * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_LossGradient(benchmark::State& state) {
  const diffusion::NoisePredictor model(diffusion::ModelSpec{}, 1);
  Rng rng(3);
  const auto batch = diffusion::make_batch(ring(), static_cast<std::size_t>(state.range(0)), 1000, rng);
  const auto ev = diffusion::loss(model, schedule(), batch);
  const auto names = model.param_names();
  for (auto _ : state) benchmark::DoNotOptimize(ad::gradient(ev.record, ev.inputs, names));
}
BENCHMARK(BM_LossGradient)->Arg(64)->Arg(256);

static void BM_HessianVectorProduct(benchmark::State& state) {
  const diffusion::NoisePredictor model(diffusion::ModelSpec{}, 1);
  criteria::ScoreConfig cfg;
  cfg.batches = 1;
  cfg.batch_size = 256;
  const auto p = criteria::make_problem(model, schedule(), ring(), cfg);
  const auto g = ad::gradient(p.record, p.batches[0], p.params);
  const auto method = static_cast<ad::HvpMethod>(state.range(0));
  const double h = ad::default_fd_step(p.batches[0], p.params);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ad::hessian_vector_product(p.record, p.batches[0], p.params, g, method, h));
  }
  state.SetLabel(std::string(ad::hvp_method_name(method)));
}
BENCHMARK(BM_HessianVectorProduct)
    ->Arg(static_cast<int>(ad::HvpMethod::kDoubleBackprop))
    ->Arg(static_cast<int>(ad::HvpMethod::kFiniteDifference));

static void BM_GradientFlowScores(benchmark::State& state) {
  const diffusion::NoisePredictor model(diffusion::ModelSpec{}, 1);
  criteria::ScoreConfig cfg;
  cfg.batches = 4;
  cfg.batch_size = 256;
  const auto p = criteria::make_problem(model, schedule(), ring(), cfg);
  for (auto _ : state) benchmark::DoNotOptimize(criteria::gradient_flow_scores(p, ad::HvpMethod::kDoubleBackprop));
}
BENCHMARK(BM_GradientFlowScores)->Unit(benchmark::kMillisecond);

static void BM_MaskUpdate(benchmark::State& state) {
  diffusion::NoisePredictor model(diffusion::ModelSpec{}, 1);
  ImportanceScores s;
  std::uint64_t seed = 10;
  for (const auto& w : model.weights()) s.scores[w.name] = random(w.weights.shape(), seed++);
  for (auto _ : state) benchmark::DoNotOptimize(mask::apply_mask_update(model.weights(), s, 0.5, 0.3));
}
BENCHMARK(BM_MaskUpdate);

static void BM_TrainStep(benchmark::State& state) {
  diffusion::NoisePredictor model(diffusion::ModelSpec{}, 1);
  diffusion::AdamState adam_state;
  diffusion::AdamConfig adam;
  diffusion::TrainOptions opt;
  opt.log_interval = 0;
  for (auto _ : state) diffusion::train(model, schedule(), ring(), 1, adam, adam_state, opt);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_SampleDdim(benchmark::State& state) {
  const diffusion::NoisePredictor model(diffusion::ModelSpec{}, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        diffusion::sample_ddim(model, schedule(), 1000, static_cast<std::size_t>(state.range(0)), 7));
  }
}
BENCHMARK(BM_SampleDdim)->Arg(25)->Arg(100)->Unit(benchmark::kMillisecond);

static void BM_FrechetDistance(benchmark::State& state) {
  const Tensor a = random({5000, 2}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::frechet_distance(a, ring()));
}
BENCHMARK(BM_FrechetDistance);

BENCHMARK_MAIN();
