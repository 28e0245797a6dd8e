#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gfprune/autodiff.hpp"
#include "gfprune/diffusion.hpp"
#include "gfprune/importance.hpp"

namespace gfprune::criteria {

/// A differentiable loss sampled on one or more batches. Every scored name is
/// a record input whose bound value is the effective (masked) weight, so
/// derivatives are taken with respect to what the network actually uses.
struct LossProblem {
  ad::Record record;
  std::vector<NamedTensors> batches;
  /// Parameters that receive scores.
  std::vector<std::string> scored;
  /// All parameters of the loss (scored ones plus unmasked ones such as
  /// biases); gradients and Hessian products run over this set.
  std::vector<std::string> params;
  BatchDescriptor descriptor;
};

struct ScoreConfig {
  std::size_t batches = 4;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  ad::HvpMethod hvp = ad::HvpMethod::kDoubleBackprop;
  /// <= 0 selects the default step 1e-4 * (1 + max |theta|).
  double fd_step = 0.0;
  /// Multiplies the loss; only used to check scale behaviour.
  double loss_scale = 1.0;
};

/// Loss problem for a noise predictor on stratified-timestep batches drawn
/// from Rng::derive(config.seed, batch index).
LossProblem make_problem(const diffusion::NoisePredictor& model, const diffusion::Schedule& sched,
                         const Tensor& data, const ScoreConfig& config);

/// |weights * mask|.
ImportanceScores magnitude_scores(const diffusion::NoisePredictor& model);

/// Mean over batches of |w * dL/dw| with w the effective weight.
ImportanceScores taylor_scores(const LossProblem& problem);

/// Mean over batches of w * (H g), with g and H the gradient and Hessian of
/// the loss over all parameters, read out on the scored ones. Signed: the most
/// negative entries are pruned first.
ImportanceScores gradient_flow_scores(const LossProblem& problem, ad::HvpMethod method,
                                      double fd_step = 0.0);

/// Squared gradient norm g^T g of the loss on one batch.
double gradient_flow_delta(const ad::Record& record, const NamedTensors& inputs,
                           const std::vector<std::string>& params);

/// Dispatches on the criterion for a noise predictor.
ImportanceScores compute_scores(Criterion criterion, const diffusion::NoisePredictor& model,
                                const diffusion::Schedule& sched, const Tensor& data,
                                const ScoreConfig& config);

}  // namespace gfprune::criteria
