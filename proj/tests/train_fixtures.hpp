// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "psyche/models.hpp"
#include "psyche/trainer.hpp"

namespace psyche::testing {

/// Model whose loss is its single parameter; lets a test dictate the
/// validation curve a sweep sees.
struct ScalarData {
  std::size_t size() const { return 1; }
};

struct ScalarModel {
  using Data = ScalarData;
  ad::Parameter p{"p", ad::Tensor::scalar(0.0)};
  std::vector<ad::Parameter*> parameters() { return {&p}; }
  ad::Var loss(ad::Tape& tape, const Data&, std::span<const std::size_t>) { return tape.param(p); }
};

/// Saves one checkpoint per (step, loss) pair with the parameter set to loss.
inline void write_curve(trainer::CheckpointStore& store, const std::vector<std::pair<std::uint64_t, double>>& curve) {
  for (auto [step, loss] : curve) {
    trainer::Checkpoint c;
    c.step = step;
    c.parameters.push_back({"p", ad::Tensor::scalar(loss)});
    c.rng_state = Rng(0).state();
    store.save(c);
  }
}

/// Small noisy linear regression problem for trainer tests.
inline models::RegressionData small_regression(std::size_t n, std::size_t d, std::size_t t, std::uint64_t seed) {
  Rng rng(seed);
  models::RegressionData data;
  data.X = ad::Tensor::randn({n, d}, rng);
  ad::Tensor w = ad::Tensor::randn({d, t}, rng);
  data.Y = ad::Tensor::zeros({n, t});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < t; ++c) {
      double s = 0.1 * rng.normal();
      for (std::size_t p = 0; p < d; ++p) s += data.X.data[i * d + p] * w.data[p * t + c];
      data.Y.data[i * t + c] = std::tanh(s);
    }
  return data;
}

inline models::MlpRegressor small_mlp(std::size_t d, std::size_t t, std::uint64_t seed) {
  models::MlpConfig mc;
  mc.input_dim = d;
  mc.hidden = 8;
  mc.targets = t;
  mc.head = models::HeadKind::bounded;
  mc.init_std = 0.5;
  mc.seed = seed;
  return models::MlpRegressor(mc);
}

inline std::vector<std::vector<double>> parameter_buffers(models::MlpRegressor& m) {
  std::vector<std::vector<double>> out;
  for (auto* p : m.parameters()) out.push_back(p->value.data);
  return out;
}

}  // namespace psyche::testing
