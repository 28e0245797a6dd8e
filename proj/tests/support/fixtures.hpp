#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gfprune/autodiff.hpp"
#include "gfprune/criteria.hpp"
#include "gfprune/datasets.hpp"
#include "gfprune/diffusion.hpp"
#include "gfprune/rng.hpp"

namespace fixtures {

using namespace gfprune;

/// f(theta) = 1/2 sum(a * theta^2) with a = (2, 4) held in input "a".
inline ad::Record quadratic_record() {
  ad::Record r;
  const auto theta = r.input("theta", {2});
  const auto a = r.input("a", {2});
  const auto q = r.mul(a, r.mul(theta, theta));
  r.set_output(r.scale(r.sum(q), 0.5));
  return r;
}

inline NamedTensors quadratic_inputs(double t0 = 1.0, double t1 = 1.0) {
  return {{"theta", Tensor::vector({t0, t1})}, {"a", Tensor::vector({2.0, 4.0})}};
}

/// The quadratic as a LossProblem with a single scored parameter "theta".
inline criteria::LossProblem quadratic_problem(double t0 = 1.0, double t1 = 1.0) {
  criteria::LossProblem p;
  p.record = quadratic_record();
  p.batches = {quadratic_inputs(t0, t1)};
  p.scored = {"theta"};
  p.params = {"theta"};
  return p;
}

/// 16 parameters: in [2,2] + bias 2, temb [2,2], out [2,2] + bias 2.
inline diffusion::ModelSpec tiny_spec() {
  diffusion::ModelSpec s;
  s.data_dim = 2;
  s.hidden = {2};
  s.temb_dim = 2;
  return s;
}

inline diffusion::Schedule small_schedule() { return diffusion::make_schedule(100, 1e-3, 0.05); }

inline Tensor ring_data(std::size_t n = 512, std::uint64_t seed = 3) {
  data::DatasetSpec d;
  d.size = n;
  d.seed = seed;
  return data::generate(d);
}

/// Loss problem of the tiny denoiser on one stratified batch of `batch` rows.
inline criteria::LossProblem tiny_problem(const diffusion::NoisePredictor& model,
                                          std::size_t batch = 16, std::uint64_t seed = 5) {
  criteria::ScoreConfig cfg;
  cfg.batches = 1;
  cfg.batch_size = batch;
  cfg.seed = seed;
  return criteria::make_problem(model, small_schedule(), ring_data(), cfg);
}

inline double rel_err(const Tensor& a, const Tensor& b) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

/// Concatenates tensors of `names` into one flat vector.
inline std::vector<double> flatten(const NamedTensors& t, const std::vector<std::string>& names) {
  std::vector<double> out;
  for (const auto& n : names) {
    const auto& x = t.at(n);
    out.insert(out.end(), x.data().begin(), x.data().end());
  }
  return out;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace fixtures
