// SPDX-License-Identifier: Apache-2.0
// Randomised finite-difference cases for every autodiff primitive, shared by
// the unit suite and the acceptance run.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "psyche/autodiff.hpp"
#include "psyche/random.hpp"

namespace psyche::ad::gradcases {

inline constexpr double kEps = 1e-5;
inline constexpr double kTol = 1e-6;
inline constexpr int kTrials = 100;

/// Contracts a tensor-valued op to a scalar with a fixed random weighting.
inline Var project(Tape& tape, Var out, const Tensor& weights) { return sum(mul(out, tape.constant(weights))); }

/// Central differences at eps = 1e-5 carry ~1e-11 absolute rounding noise, so
/// a coordinate whose true gradient is a tiny nonzero number (an accidental
/// cancellation in the random contraction) cannot be resolved to 1e-6
/// relative. Such draws are rejected and redrawn; exact zeros are kept.
inline bool resolvable(const std::vector<Tensor>& grads) {
  for (const auto& g : grads)
    for (double v : g.data)
      if (v != 0.0 && std::abs(v) < 1e-4) return false;
  return true;
}

inline std::vector<Tensor> analytic_grads(const ScalarFn& fn, const std::vector<Tensor>& point) {
  Tape tape;
  std::vector<Var> ins;
  for (const auto& t : point) ins.push_back(tape.input(t));
  tape.backward(fn(tape, ins));
  std::vector<Tensor> out;
  for (Var v : ins) out.push_back(tape.grad(v));
  return out;
}

struct PrimitiveCase {
  const char* name;
  std::vector<Shape> input_shapes;
  std::function<Var(Tape&, std::span<const Var>)> op;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  static const std::vector<std::size_t> emb_ids = {0, 3, 1, 3};
  static const std::vector<std::size_t> ce_ids = {4, 0, 2};
  return {
      {"matmul", {{4, 3}, {3, 2}}, [](Tape&, std::span<const Var> in) { return matmul(in[0], in[1]); }},
      {"transpose", {{3, 2}}, [](Tape&, std::span<const Var> in) { return transpose(in[0]); }},
      {"add", {{2, 3}, {2, 3}}, [](Tape&, std::span<const Var> in) { return add(in[0], in[1]); }},
      {"sub", {{2, 3}, {2, 3}}, [](Tape&, std::span<const Var> in) { return sub(in[0], in[1]); }},
      {"mul", {{2, 3}, {2, 3}}, [](Tape&, std::span<const Var> in) { return mul(in[0], in[1]); }},
      {"add_bias", {{3, 4}, {4}}, [](Tape&, std::span<const Var> in) { return add_bias(in[0], in[1]); }},
      {"scale", {{5}}, [](Tape&, std::span<const Var> in) { return scale(in[0], -1.7); }},
      {"add_scalar", {{5}}, [](Tape&, std::span<const Var> in) { return add_scalar(in[0], 0.3); }},
      {"tanh", {{6}}, [](Tape&, std::span<const Var> in) { return tanh(in[0]); }},
      {"relu", {{6}}, [](Tape&, std::span<const Var> in) { return relu(in[0]); }},
      {"sigmoid", {{6}}, [](Tape&, std::span<const Var> in) { return sigmoid(in[0]); }},
      {"softmax_rows", {{3, 4}}, [](Tape&, std::span<const Var> in) { return softmax_rows(in[0]); }},
      {"concat_cols", {{2, 3}, {2, 2}}, [](Tape&, std::span<const Var> in) { return concat_cols({in[0], in[1]}); }},
      {"embedding", {{5, 3}}, [](Tape&, std::span<const Var> in) { return embedding(in[0], emb_ids); }},
      {"reshape", {{2, 6}}, [](Tape&, std::span<const Var> in) { return reshape(in[0], {3, 4}); }},
      {"mean", {{7}}, [](Tape&, std::span<const Var> in) { return mean(in[0]); }},
      {"sum", {{7}}, [](Tape&, std::span<const Var> in) { return sum(in[0]); }},
      {"mse", {{8}, {8}}, [](Tape&, std::span<const Var> in) { return mse(in[0], in[1]); }},
      {"cross_entropy", {{3, 5}}, [](Tape&, std::span<const Var> in) { return cross_entropy(in[0], ce_ids); }},
  };
}

struct TrialResult {
  double worst = 0.0;
  int rejected = 0;
};

/// kTrials accepted random draws of one primitive; returns the largest
/// relative error seen.
inline TrialResult run_trials(const PrimitiveCase& c, std::uint64_t seed, int trials = kTrials) {
  Rng rng(seed);
  TrialResult r;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Tensor> point;
    for (const auto& s : c.input_shapes) {
      Tensor t = Tensor::uniform(s, rng, -2.0, 2.0);
      if (std::string(c.name) == "relu")
        for (auto& x : t.data)
          if (std::abs(x) < 1e-3) x = 0.5;  // keep away from the kink
      point.push_back(std::move(t));
    }
    Tape probe;
    std::vector<Var> ins;
    for (auto& t : point) ins.push_back(probe.constant(t));
    Tensor weights = Tensor::uniform(c.op(probe, ins).value().shape, rng, -2.0, 2.0);
    ScalarFn fn = [&](Tape& tape, std::span<const Var> in) { return project(tape, c.op(tape, in), weights); };
    if (!resolvable(analytic_grads(fn, point))) {
      ++r.rejected;
      --trial;
      continue;
    }
    r.worst = std::max(r.worst, grad_check(fn, point, kEps));
  }
  return r;
}

}  // namespace psyche::ad::gradcases
