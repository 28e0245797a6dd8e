#include "gfprune/criteria.hpp"

#include <cmath>

#include "gfprune/error.hpp"

namespace gfprune::criteria {

namespace {

void require_batches(const LossProblem& p) {
  if (p.batches.empty()) throw ArgumentError("importance scoring needs a non-empty batch set");
  if (p.scored.empty()) throw ArgumentError("importance scoring needs at least one scored parameter");
}

void finalize(ImportanceScores& out, std::size_t batches) {
  const double inv = 1.0 / static_cast<double>(batches);
  for (auto& [name, t] : out.scores) {
    for (double& v : t.raw()) v *= inv;
    if (!t.all_finite()) throw NumericError("non-finite importance scores for '" + name + "'");
  }
}

/// w * x, with exact +0 wherever w is zero so masked units never rank by sign.
void accumulate_product(Tensor& acc, const Tensor& w, const Tensor& x, bool absolute) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (w[i] == 0.0) continue;
    const double v = w[i] * x[i];
    acc[i] += absolute ? std::abs(v) : v;
  }
}

}  // namespace

LossProblem make_problem(const diffusion::NoisePredictor& model, const diffusion::Schedule& sched,
                         const Tensor& data, const ScoreConfig& config) {
  if (config.batches == 0 || config.batch_size == 0) {
    throw ArgumentError("score batch set must be non-empty");
  }
  LossProblem p;
  p.record = diffusion::loss_record(model, config.batch_size,
                                    diffusion::WeightBinding::kEffective, config.loss_scale);
  p.scored = model.weight_names();
  p.params = model.param_names();
  p.descriptor.seed = config.seed;
  p.descriptor.batch_size = config.batch_size;
  p.descriptor.batches = config.batches;
  const NamedTensors params = model.bind(diffusion::WeightBinding::kEffective);
  for (std::size_t b = 0; b < config.batches; ++b) {
    Rng rng = Rng::derive(config.seed, b);
    const auto batch = diffusion::make_stratified_batch(data, config.batch_size, sched.T, rng);
    NamedTensors in = params;
    for (auto& [k, v] : diffusion::batch_inputs(model, sched, batch)) in[k] = std::move(v);
    p.batches.push_back(std::move(in));
    p.descriptor.timesteps.insert(p.descriptor.timesteps.end(), batch.t.begin(), batch.t.end());
  }
  return p;
}

ImportanceScores magnitude_scores(const diffusion::NoisePredictor& model) {
  ImportanceScores out;
  out.criterion = Criterion::kMagnitude;
  for (const auto& w : model.weights()) {
    Tensor s = w.effective();
    for (double& v : s.raw()) v = std::abs(v);
    out.scores[w.name] = std::move(s);
  }
  return out;
}

ImportanceScores taylor_scores(const LossProblem& problem) {
  require_batches(problem);
  ImportanceScores out;
  out.criterion = Criterion::kTaylor;
  out.batch = problem.descriptor;
  const ad::GradientProgram grad(problem.record, problem.params);
  for (const auto& name : problem.scored) {
    out.scores[name] = Tensor(problem.batches.front().at(name).shape(), 0.0);
  }
  for (const auto& inputs : problem.batches) {
    const auto g = grad.run(inputs).grads;
    for (const auto& name : problem.scored) {
      accumulate_product(out.scores[name], inputs.at(name), g.at(name), true);
    }
  }
  finalize(out, problem.batches.size());
  return out;
}

ImportanceScores gradient_flow_scores(const LossProblem& problem, ad::HvpMethod method,
                                      double fd_step) {
  require_batches(problem);
  ImportanceScores out;
  out.criterion = Criterion::kGradientFlow;
  out.batch = problem.descriptor;
  const ad::GradientProgram grad(problem.record, problem.params);
  std::optional<ad::HvpProgram> hvp;
  if (method == ad::HvpMethod::kDoubleBackprop) hvp.emplace(problem.record, problem.params);
  for (const auto& name : problem.scored) {
    out.scores[name] = Tensor(problem.batches.front().at(name).shape(), 0.0);
  }
  for (const auto& inputs : problem.batches) {
    const auto g = grad.run(inputs).grads;
    NamedTensors hg;
    if (hvp) {
      hg = hvp->run(inputs, g);
    } else {
      const double h = fd_step > 0.0 ? fd_step : ad::default_fd_step(inputs, problem.params);
      hg = ad::finite_difference_hvp(grad, inputs, g, h);
    }
    for (const auto& name : problem.scored) {
      accumulate_product(out.scores[name], inputs.at(name), hg.at(name), false);
    }
  }
  finalize(out, problem.batches.size());
  return out;
}

double gradient_flow_delta(const ad::Record& record, const NamedTensors& inputs,
                           const std::vector<std::string>& params) {
  const auto g = ad::gradient(record, inputs, params);
  double s = 0.0;
  for (const auto& [_, t] : g) s += dot(t, t);
  return s;
}

ImportanceScores compute_scores(Criterion criterion, const diffusion::NoisePredictor& model,
                                const diffusion::Schedule& sched, const Tensor& data,
                                const ScoreConfig& config) {
  switch (criterion) {
    case Criterion::kMagnitude:
      return magnitude_scores(model);
    case Criterion::kTaylor:
      return taylor_scores(make_problem(model, sched, data, config));
    case Criterion::kGradientFlow:
      return gradient_flow_scores(make_problem(model, sched, data, config), config.hvp,
                                  config.fd_step);
  }
  throw ArgumentError("unknown criterion");
}

}  // namespace gfprune::criteria
