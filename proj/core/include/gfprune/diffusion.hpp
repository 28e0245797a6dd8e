#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gfprune/autodiff.hpp"
#include "gfprune/masking.hpp"
#include "gfprune/rng.hpp"
#include "gfprune/tensor.hpp"

namespace gfprune::diffusion {

/// Linear beta schedule and its cumulative products, indexed 0..T-1.
struct Schedule {
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

Schedule make_schedule(std::size_t T, double beta_start, double beta_end);

/// sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps, row by row.
Tensor noisy_sample(const Schedule& sched, const Tensor& x0, std::span<const std::size_t> t,
                    const Tensor& eps);

/// Sinusoidal embedding: first half sin(t * w_i), second half cos(t * w_i),
/// w_i = 10000^(-i / (dim/2)).
Tensor timestep_embedding(std::span<const std::size_t> t, std::size_t dim);

struct ModelSpec {
  std::size_t data_dim = 2;
  std::vector<std::size_t> hidden{128, 128, 128, 128};
  std::size_t temb_dim = 64;
  ad::Activation activation = ad::Activation::kSiLU;
};

/// How weights enter a record.
enum class WeightBinding {
  /// Inputs "<w>" (raw) and "<w>.mask"; the graph multiplies them.
  kMasked,
  /// Input "<w>" already holds weights * mask. Derivatives are then taken with
  /// respect to the effective weights.
  kEffective,
};

/// Fully connected noise predictor eps_theta(x_t, t).
///
///   h_1 = act(x W_in^T + b_in + emb(t) W_temb^T)
///   h_k = act(h_{k-1} W_k^T + b_k)            k = 2..L
///   out = h_L W_out^T + b_out
///
/// Weights are stored [out, in]. Every weight matrix is a MaskedParam; biases
/// are never masked.
class NoisePredictor {
 public:
  NoisePredictor() = default;
  NoisePredictor(ModelSpec spec, std::uint64_t init_seed);

  const ModelSpec& spec() const noexcept { return spec_; }

  std::vector<mask::MaskedParam>& weights() noexcept { return weights_; }
  const std::vector<mask::MaskedParam>& weights() const noexcept { return weights_; }
  NamedTensors& biases() noexcept { return biases_; }
  const NamedTensors& biases() const noexcept { return biases_; }

  /// Weight names followed by bias names, in a fixed order.
  std::vector<std::string> param_names() const;
  std::vector<std::string> weight_names() const;
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  mask::MaskedParam& masked(const std::string& name);
  const mask::MaskedParam& masked(const std::string& name) const;

  /// Appends the prediction subgraph; expects inputs "x" [batch, dim] and
  /// "temb" [batch, temb_dim]. Returns the prediction node.
  ad::NodeId build(ad::Record& record, std::size_t batch, WeightBinding binding) const;

  /// Parameter (and, for kMasked, mask) tensors keyed by record input name.
  NamedTensors bind(WeightBinding binding) const;

  /// Stand-alone forward pass.
  Tensor predict(const Tensor& x, std::span<const std::size_t> t) const;

  /// Counts including biases, which are always dense.
  std::size_t dense_param_count() const;
  std::size_t nonzero_param_count() const;
  std::size_t bias_count() const;

 private:
  ModelSpec spec_;
  std::vector<mask::MaskedParam> weights_;
  NamedTensors biases_;
  std::vector<std::string> bias_order_;
};

struct TrainBatch {
  Tensor x0;
  std::vector<std::size_t> t;
  Tensor eps;
};

/// Rows drawn uniformly from `data`, timesteps uniform on [0, T).
TrainBatch make_batch(const Tensor& data, std::size_t batch, std::size_t T, Rng& rng);

/// Like make_batch, but timestep i is drawn from stratum [i*T/B, (i+1)*T/B).
TrainBatch make_stratified_batch(const Tensor& data, std::size_t batch, std::size_t T, Rng& rng);

/// Appends mean((target - prediction)^2) * scale, averaged over batch and
/// dimension. Returns the scalar node.
ad::NodeId append_mse(ad::Record& record, ad::NodeId prediction, ad::NodeId target,
                      double scale = 1.0);

/// The noise-prediction objective as a record with inputs "x" (noisy sample),
/// "temb", "eps" and the bound parameters. Output is the scalar loss.
ad::Record loss_record(const NoisePredictor& model, std::size_t batch, WeightBinding binding,
                       double loss_scale = 1.0);

/// Non-parameter inputs of loss_record for one batch.
NamedTensors batch_inputs(const NoisePredictor& model, const Schedule& sched,
                          const TrainBatch& batch);

struct LossEvaluation {
  double value = 0.0;
  ad::Record record;
  NamedTensors inputs;
};

LossEvaluation loss(const NoisePredictor& model, const Schedule& sched, const TrainBatch& batch,
                    WeightBinding binding = WeightBinding::kMasked);

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 256;
};

/// Adam moments keyed by parameter name.
struct AdamState {
  NamedTensors m;
  NamedTensors v;
  std::uint64_t step = 0;
};

struct TrainOptions {
  std::size_t log_interval = 100;
  /// Leave entries whose mask is exactly 0 untouched (hard-pruned units).
  bool freeze_pruned = false;
  double divergence_threshold = 1e6;
  /// Seed of the per-step batch streams; batch k uses Rng::derive(seed, k).
  std::uint64_t batch_seed = 0;
};

struct TracePoint {
  std::uint64_t step = 0;
  double loss = 0.0;
};

struct TrainTrace {
  std::vector<TracePoint> points;
  double last_loss = 0.0;
};

/// Runs `steps` Adam updates. Batch k (k = state.step at the time) is drawn
/// from Rng::derive(options.batch_seed, k), so resuming from a saved state
/// replays the same stream.
TrainTrace train(NoisePredictor& model, const Schedule& sched, const Tensor& data,
                 std::size_t steps, const AdamConfig& config, AdamState& state,
                 const TrainOptions& options);

/// Loss on the batch that train() would use at the given step.
double loss_at_step(const NoisePredictor& model, const Schedule& sched, const Tensor& data,
                    const AdamConfig& config, std::uint64_t batch_seed, std::uint64_t step);

/// Uniform-stride DDIM timesteps, descending, always containing T-1 and 0
/// when substeps >= 2.
std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t substeps);

/// Deterministic (eta = 0) DDIM sampling.
Tensor sample_ddim(const NoisePredictor& model, const Schedule& sched, std::size_t n,
                   std::size_t substeps, std::uint64_t noise_seed);

/// Ancestral DDPM sampling over all T steps with posterior variance.
Tensor sample_ddpm(const NoisePredictor& model, const Schedule& sched, std::size_t n,
                   std::uint64_t noise_seed);

}  // namespace gfprune::diffusion
