#include "gfprune/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "gfprune/error.hpp"

namespace gfprune::diffusion {

namespace {

constexpr std::size_t kSampleChunk = 2048;

std::string layer_weight(const std::string& layer) { return layer + ".weight"; }
std::string layer_bias(const std::string& layer) { return layer + ".bias"; }

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.raw()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Schedule make_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 2) throw ArgumentError("diffusion schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ArgumentError("diffusion schedule needs 0 < beta_start <= beta_end < 1");
  }
  Schedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double frac = static_cast<double>(t) / static_cast<double>(T - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

Tensor noisy_sample(const Schedule& sched, const Tensor& x0, std::span<const std::size_t> t,
                    const Tensor& eps) {
  if (!x0.same_shape(eps) || x0.rank() != 2 || t.size() != x0.rows()) {
    throw ShapeError("noisy_sample: x0 " + shape_string(x0.shape()) + ", eps " +
                     shape_string(eps.shape()) + ", " + std::to_string(t.size()) + " timesteps");
  }
  Tensor out(x0.shape());
  const std::size_t d = x0.cols();
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    if (t[i] >= sched.T) throw ArgumentError("timestep " + std::to_string(t[i]) + " out of range");
    const double a = std::sqrt(sched.alpha_bar[t[i]]);
    const double b = std::sqrt(1.0 - sched.alpha_bar[t[i]]);
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = a * x0.at(i, j) + b * eps.at(i, j);
  }
  return out;
}

Tensor timestep_embedding(std::span<const std::size_t> t, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ArgumentError("timestep embedding dim must be even and >= 2");
  Tensor out({t.size(), dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    for (std::size_t r = 0; r < t.size(); ++r) {
      const double arg = static_cast<double>(t[r]) * w;
      out.at(r, i) = std::sin(arg);
      out.at(r, half + i) = std::cos(arg);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

NoisePredictor::NoisePredictor(ModelSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
  if (spec_.hidden.empty()) throw ArgumentError("noise predictor needs at least one hidden layer");
  if (spec_.data_dim == 0) throw ArgumentError("data_dim must be positive");
  Rng rng = Rng::derive(init_seed, 0x1417);

  auto add_layer = [&](const std::string& layer, std::size_t in, std::size_t out, bool bias,
                       bool group_prunable) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weights_.emplace_back(layer_weight(layer), uniform_tensor({out, in}, bound, rng), group_prunable);
    if (bias) {
      biases_[layer_bias(layer)] = uniform_tensor({out}, bound, rng);
      bias_order_.push_back(layer_bias(layer));
    }
  };

  add_layer("in", spec_.data_dim, spec_.hidden[0], true, true);
  add_layer("temb", spec_.temb_dim, spec_.hidden[0], false, true);
  for (std::size_t k = 1; k < spec_.hidden.size(); ++k) {
    add_layer("hidden" + std::to_string(k), spec_.hidden[k - 1], spec_.hidden[k], true, true);
  }
  add_layer("out", spec_.hidden.back(), spec_.data_dim, true, false);
}

std::vector<std::string> NoisePredictor::weight_names() const {
  std::vector<std::string> names;
  for (const auto& w : weights_) names.push_back(w.name);
  return names;
}

std::vector<std::string> NoisePredictor::param_names() const {
  auto names = weight_names();
  names.insert(names.end(), bias_order_.begin(), bias_order_.end());
  return names;
}

mask::MaskedParam& NoisePredictor::masked(const std::string& name) {
  for (auto& w : weights_) {
    if (w.name == name) return w;
  }
  throw ArgumentError("unknown weight '" + name + "'");
}

const mask::MaskedParam& NoisePredictor::masked(const std::string& name) const {
  for (const auto& w : weights_) {
    if (w.name == name) return w;
  }
  throw ArgumentError("unknown weight '" + name + "'");
}

Tensor& NoisePredictor::param(const std::string& name) {
  auto it = biases_.find(name);
  if (it != biases_.end()) return it->second;
  return masked(name).weights;
}

const Tensor& NoisePredictor::param(const std::string& name) const {
  auto it = biases_.find(name);
  if (it != biases_.end()) return it->second;
  return masked(name).weights;
}

ad::NodeId NoisePredictor::build(ad::Record& r, std::size_t batch, WeightBinding binding) const {
  auto weight_node = [&](const mask::MaskedParam& p) {
    const ad::NodeId w = r.input(p.name, p.weights.shape());
    if (binding == WeightBinding::kEffective) return w;
    const ad::NodeId m = r.input(p.name + ".mask", p.mask.shape());
    return r.mul(w, m);
  };
  auto affine = [&](ad::NodeId x, const std::string& layer, bool bias) {
    const ad::NodeId y = r.matmul(x, weight_node(masked(layer_weight(layer))), false, true);
    if (!bias) return y;
    const std::string bname = layer_bias(layer);
    const ad::NodeId b = r.input(bname, biases_.at(bname).shape());
    return r.add(y, r.broadcast_rows(b, batch));
  };

  const ad::NodeId x = r.input("x", {batch, spec_.data_dim});
  const ad::NodeId temb = r.input("temb", {batch, spec_.temb_dim});
  ad::NodeId h = r.add(affine(x, "in", true), affine(temb, "temb", false));
  h = r.activation(h, spec_.activation);
  for (std::size_t k = 1; k < spec_.hidden.size(); ++k) {
    h = r.activation(affine(h, "hidden" + std::to_string(k), true), spec_.activation);
  }
  return affine(h, "out", true);
}

NamedTensors NoisePredictor::bind(WeightBinding binding) const {
  NamedTensors out;
  for (const auto& w : weights_) {
    if (binding == WeightBinding::kEffective) {
      out[w.name] = w.effective();
    } else {
      out[w.name] = w.weights;
      out[w.name + ".mask"] = w.mask;
    }
  }
  for (const auto& [name, b] : biases_) out[name] = b;
  return out;
}

Tensor NoisePredictor::predict(const Tensor& x, std::span<const std::size_t> t) const {
  if (x.rank() != 2 || x.cols() != spec_.data_dim || t.size() != x.rows()) {
    throw ShapeError("predict: input " + shape_string(x.shape()));
  }
  ad::Record r;
  r.set_output(build(r, x.rows(), WeightBinding::kMasked));
  NamedTensors in = bind(WeightBinding::kMasked);
  in["x"] = x;
  in["temb"] = timestep_embedding(t, spec_.temb_dim);
  return ad::forward(r, in);
}

std::size_t NoisePredictor::bias_count() const {
  std::size_t n = 0;
  for (const auto& [_, b] : biases_) n += b.size();
  return n;
}

std::size_t NoisePredictor::dense_param_count() const {
  return mask::dense_params(weights_) + bias_count();
}

std::size_t NoisePredictor::nonzero_param_count() const {
  return mask::nonzero_params(weights_) + bias_count();
}

// ---------------------------------------------------------------------------

TrainBatch make_batch(const Tensor& data, std::size_t batch, std::size_t T, Rng& rng) {
  TrainBatch b;
  const std::size_t d = data.cols();
  b.x0 = Tensor({batch, d});
  b.eps = Tensor({batch, d});
  b.t.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t row = rng.below(data.rows());
    for (std::size_t j = 0; j < d; ++j) b.x0.at(i, j) = data.at(row, j);
    b.t[i] = rng.below(T);
    for (std::size_t j = 0; j < d; ++j) b.eps.at(i, j) = rng.normal();
  }
  return b;
}

TrainBatch make_stratified_batch(const Tensor& data, std::size_t batch, std::size_t T, Rng& rng) {
  TrainBatch b = make_batch(data, batch, T, rng);
  for (std::size_t i = 0; i < batch; ++i) {
    const double lo = static_cast<double>(i) * static_cast<double>(T) / static_cast<double>(batch);
    const double hi = static_cast<double>(i + 1) * static_cast<double>(T) / static_cast<double>(batch);
    const auto t = static_cast<std::size_t>(std::floor(rng.uniform(lo, hi)));
    b.t[i] = std::min(t, T - 1);
  }
  return b;
}

ad::NodeId append_mse(ad::Record& r, ad::NodeId prediction, ad::NodeId target, double scale) {
  const std::size_t n = shape_size(r.shape(prediction));
  return r.scale(r.sum_squares(r.sub(target, prediction)), scale / static_cast<double>(n));
}

ad::Record loss_record(const NoisePredictor& model, std::size_t batch, WeightBinding binding,
                       double loss_scale) {
  ad::Record r;
  const ad::NodeId pred = model.build(r, batch, binding);
  const ad::NodeId eps = r.input("eps", {batch, model.spec().data_dim});
  r.set_output(append_mse(r, pred, eps, loss_scale));
  return r;
}

NamedTensors batch_inputs(const NoisePredictor& model, const Schedule& sched,
                          const TrainBatch& batch) {
  NamedTensors in;
  in["x"] = noisy_sample(sched, batch.x0, batch.t, batch.eps);
  in["temb"] = timestep_embedding(batch.t, model.spec().temb_dim);
  in["eps"] = batch.eps;
  return in;
}

LossEvaluation loss(const NoisePredictor& model, const Schedule& sched, const TrainBatch& batch,
                    WeightBinding binding) {
  if (batch.x0.cols() != model.spec().data_dim) {
    throw ShapeError("loss: data dim " + std::to_string(batch.x0.cols()) + " != model dim " +
                     std::to_string(model.spec().data_dim));
  }
  LossEvaluation ev;
  ev.record = loss_record(model, batch.x0.rows(), binding);
  ev.inputs = model.bind(binding);
  for (auto& [k, v] : batch_inputs(model, sched, batch)) ev.inputs[k] = std::move(v);
  ev.value = ad::forward(ev.record, ev.inputs).item();
  return ev;
}

// ---------------------------------------------------------------------------

namespace {

void adam_update(Tensor& param, const Tensor& grad, const Tensor* freeze_mask, Tensor& m, Tensor& v,
                 const AdamConfig& c, std::uint64_t step) {
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    if (freeze_mask && (*freeze_mask)[i] == 0.0) continue;
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
  }
}

TrainBatch batch_for_step(const Tensor& data, const Schedule& sched, const AdamConfig& config,
                          std::uint64_t batch_seed, std::uint64_t step) {
  Rng rng = Rng::derive(batch_seed, step);
  return make_batch(data, config.batch_size, sched.T, rng);
}

}  // namespace

TrainTrace train(NoisePredictor& model, const Schedule& sched, const Tensor& data,
                 std::size_t steps, const AdamConfig& config, AdamState& state,
                 const TrainOptions& options) {
  if (steps == 0) throw ArgumentError("train needs steps >= 1");
  if (data.cols() != model.spec().data_dim) throw ShapeError("train: data dimension mismatch");
  const auto names = model.param_names();
  for (const auto& n : names) {
    if (!state.m.contains(n)) {
      state.m[n] = Tensor(model.param(n).shape(), 0.0);
      state.v[n] = Tensor(model.param(n).shape(), 0.0);
    }
  }
  const ad::Record record = loss_record(model, config.batch_size, WeightBinding::kMasked);
  const ad::GradientProgram program(record, names);

  TrainTrace trace;
  double window = 0.0;
  std::size_t window_n = 0;
  for (std::size_t k = 0; k < steps; ++k) {
    const TrainBatch batch = batch_for_step(data, sched, config, options.batch_seed, state.step);
    NamedTensors inputs = model.bind(WeightBinding::kMasked);
    for (auto& [key, value] : batch_inputs(model, sched, batch)) inputs[key] = std::move(value);
    const auto result = program.run(inputs);
    if (!(result.value < options.divergence_threshold)) {
      throw DivergenceError("training loss " + std::to_string(result.value) + " at step " +
                            std::to_string(state.step) + " exceeds " +
                            std::to_string(options.divergence_threshold));
    }
    ++state.step;
    for (const auto& n : names) {
      const Tensor* freeze = nullptr;
      if (options.freeze_pruned && !model.biases().contains(n)) freeze = &model.masked(n).mask;
      adam_update(model.param(n), result.grads.at(n), freeze, state.m.at(n), state.v.at(n), config,
                  state.step);
    }
    window += result.value;
    ++window_n;
    trace.last_loss = result.value;
    if (options.log_interval > 0 && window_n == options.log_interval) {
      trace.points.push_back({state.step, window / static_cast<double>(window_n)});
      window = 0.0;
      window_n = 0;
    }
  }
  if (window_n > 0) trace.points.push_back({state.step, window / static_cast<double>(window_n)});
  return trace;
}

double loss_at_step(const NoisePredictor& model, const Schedule& sched, const Tensor& data,
                    const AdamConfig& config, std::uint64_t batch_seed, std::uint64_t step) {
  return loss(model, sched, batch_for_step(data, sched, config, batch_seed, step)).value;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t substeps) {
  if (substeps < 1 || substeps > T) throw ArgumentError("DDIM substeps must lie in [1, T]");
  std::vector<std::size_t> ts;
  if (substeps == 1) {
    ts.push_back(T - 1);
    return ts;
  }
  for (std::size_t i = substeps; i-- > 0;) {
    const double pos = static_cast<double>(i) * static_cast<double>(T - 1) /
                       static_cast<double>(substeps - 1);
    ts.push_back(static_cast<std::size_t>(std::llround(pos)));
  }
  return ts;
}

namespace {

/// Evaluates the predictor on row blocks, caching one program per block size.
class ChunkedPredictor {
 public:
  explicit ChunkedPredictor(const NoisePredictor& model)
      : model_(model), params_(model.bind(WeightBinding::kMasked)) {}

  Tensor operator()(const Tensor& x, std::size_t t) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    Tensor out({n, d});
    for (std::size_t r0 = 0; r0 < n; r0 += kSampleChunk) {
      const std::size_t rows = std::min(kSampleChunk, n - r0);
      auto it = programs_.find(rows);
      if (it == programs_.end()) {
        ad::Record r;
        const ad::NodeId o = model_.build(r, rows, WeightBinding::kMasked);
        it = programs_.emplace(rows, ad::Program(std::move(r), {o})).first;
      }
      Tensor block({rows, d});
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(r0 * d), rows * d, block.raw().begin());
      const std::vector<std::size_t> ts(rows, t);
      params_["x"] = std::move(block);
      params_["temb"] = timestep_embedding(ts, model_.spec().temb_dim);
      const Tensor pred = it->second.run(params_)[0];
      std::copy(pred.data().begin(), pred.data().end(),
                out.raw().begin() + static_cast<std::ptrdiff_t>(r0 * d));
    }
    return out;
  }

 private:
  const NoisePredictor& model_;
  NamedTensors params_;
  std::map<std::size_t, ad::Program> programs_;
};

Tensor initial_noise(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0x5A3B);
  Tensor x({n, d});
  for (double& v : x.raw()) v = rng.normal();
  return x;
}

}  // namespace

Tensor sample_ddim(const NoisePredictor& model, const Schedule& sched, std::size_t n,
                   std::size_t substeps, std::uint64_t noise_seed) {
  if (n == 0) throw ArgumentError("sample count must be positive");
  const auto ts = ddim_timesteps(sched.T, substeps);
  ChunkedPredictor predict(model);
  Tensor x = initial_noise(n, model.spec().data_dim, noise_seed);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const std::size_t t = ts[k];
    const double ab = sched.alpha_bar[t];
    const double ab_prev = (k + 1 < ts.size()) ? sched.alpha_bar[ts[k + 1]] : 1.0;
    const Tensor eps = predict(x, t);
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);
    const double sa_prev = std::sqrt(ab_prev);
    const double sb_prev = std::sqrt(1.0 - ab_prev);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = (x[i] - sb * eps[i]) / sa;
      x[i] = sa_prev * x0 + sb_prev * eps[i];
    }
  }
  if (!x.all_finite()) throw NumericError("DDIM sampling produced non-finite values");
  return x;
}

Tensor sample_ddpm(const NoisePredictor& model, const Schedule& sched, std::size_t n,
                   std::uint64_t noise_seed) {
  if (n == 0) throw ArgumentError("sample count must be positive");
  ChunkedPredictor predict(model);
  Tensor x = initial_noise(n, model.spec().data_dim, noise_seed);
  Rng rng = Rng::derive(noise_seed, 0xD0D0);
  for (std::size_t t = sched.T; t-- > 0;) {
    const Tensor eps = predict(x, t);
    const double ab = sched.alpha_bar[t];
    const double ab_prev = t > 0 ? sched.alpha_bar[t - 1] : 1.0;
    const double coef = sched.beta[t] / std::sqrt(1.0 - ab);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[t]);
    const double sigma = std::sqrt(sched.beta[t] * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = inv_sqrt_alpha * (x[i] - coef * eps[i]);
      if (t > 0) x[i] += sigma * rng.normal();
    }
  }
  if (!x.all_finite()) throw NumericError("DDPM sampling produced non-finite values");
  return x;
}

}  // namespace gfprune::diffusion
