// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psyche/autodiff.hpp"
#include "psyche/common.hpp"

namespace psyche::models {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

struct LoraConfig {
  std::size_t rank = 4;
  double alpha = 8.0;
  double init_std = 0.02;
  std::uint64_t seed = 0;
  std::string name = "lora";  // parameter name prefix
};

/// (alpha / r) * (x A^T) B^T for row-batched x [m, d_in].
inline Var lora_delta(Tape& tape, Var x, Parameter& A, Parameter& B, double scaling) {
  Var xa = ad::matmul(x, ad::transpose(tape.param(A)));
  return ad::scale(ad::matmul(xa, ad::transpose(tape.param(B))), scaling);
}

/// Low-rank adapter around a frozen [d_out, d_in] weight. B starts at zero, so
/// a fresh adapter reproduces the base layer exactly.
class LoraAdapter {
 public:
  LoraAdapter(Tensor base_weight, const LoraConfig& cfg) : rank_(cfg.rank), alpha_(cfg.alpha) {
    if (base_weight.shape.size() != 2) throw ShapeError("lora: base weight must be a matrix");
    if (cfg.rank == 0) throw ConfigError("lora: rank must be >= 1");
    const std::size_t d_out = base_weight.shape[0], d_in = base_weight.shape[1];
    Rng rng(cfg.seed);
    base_ = Parameter(cfg.name + ".base", std::move(base_weight), false);
    a_ = Parameter(cfg.name + ".A", Tensor::randn({cfg.rank, d_in}, rng, cfg.init_std));
    b_ = Parameter(cfg.name + ".B", Tensor::zeros({d_out, cfg.rank}));
  }

  double scaling() const { return alpha_ / static_cast<double>(rank_); }
  std::size_t rank() const { return rank_; }
  std::size_t d_in() const { return base_.value.shape[1]; }
  std::size_t d_out() const { return base_.value.shape[0]; }

  /// x [m, d_in] -> [m, d_out].
  Var forward(Tape& tape, Var x) {
    if (x.shape().size() != 2 || x.shape()[1] != d_in())
      throw ShapeError("lora: input width " + ad::shape_str(x.shape()) + " does not match d_in " +
                       std::to_string(d_in()));
    Var base_out = ad::matmul(x, ad::transpose(tape.param(base_)));
    return ad::add(base_out, lora_delta(tape, x, a_, b_, scaling()));
  }

  /// base + (alpha / r) B A.
  Tensor merge() const {
    Tensor W = base_.value;
    const std::size_t d_out = this->d_out(), d_in = this->d_in(), r = rank_;
    const double s = scaling();
    for (std::size_t i = 0; i < d_out; ++i)
      for (std::size_t k = 0; k < r; ++k) {
        const double bik = b_.value.data[i * r + k] * s;
        if (bik == 0.0) continue;
        for (std::size_t j = 0; j < d_in; ++j) W.data[i * d_in + j] += bik * a_.value.data[k * d_in + j];
      }
    return W;
  }

  std::vector<Parameter*> trainable_parameters() { return {&a_, &b_}; }
  std::size_t trainable_count() const { return a_.numel() + b_.numel(); }
  std::size_t frozen_count() const { return base_.numel(); }

  Parameter& base() { return base_; }
  Parameter& A() { return a_; }
  Parameter& B() { return b_; }
  const Parameter& base() const { return base_; }
  const Parameter& A() const { return a_; }
  const Parameter& B() const { return b_; }

 private:
  std::size_t rank_;
  double alpha_;
  Parameter base_, a_, b_;
};

}  // namespace psyche::models
