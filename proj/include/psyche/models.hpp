// SPDX-License-Identifier: Apache-2.0
//
// Regression heads, target standardisation, metrics and the TF-IDF baselines.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "psyche/autodiff.hpp"
#include "psyche/common.hpp"
#include "psyche/random.hpp"

namespace psyche::models {

using json = nlohmann::json;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// Target standardisation

/// Per-target population mean and standard deviation.
class TargetScaler {
 public:
  TargetScaler() = default;
  TargetScaler(std::vector<double> mean, std::vector<double> stddev)
      : mean_(std::move(mean)), std_(std::move(stddev)) {
    if (mean_.size() != std_.size()) throw ShapeError("scaler: mean/std length mismatch");
  }

  /// `targets` is row-major [n, t].
  static TargetScaler fit(std::span<const double> targets, std::size_t n_targets,
                          std::span<const std::string> names = {}) {
    if (n_targets == 0 || targets.size() % n_targets != 0) throw ShapeError("scaler: ragged target matrix");
    const std::size_t n = targets.size() / n_targets;
    if (n < 2) throw FitError("scaler needs at least two rows");
    std::vector<double> mean(n_targets, 0.0), sd(n_targets, 0.0);
    for (std::size_t t = 0; t < n_targets; ++t) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += targets[i * n_targets + t];
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double d = targets[i * n_targets + t] - m;
        v += d * d;
      }
      v /= static_cast<double>(n);
      if (!(v > 0.0)) {
        std::string name = t < names.size() ? names[t] : "t" + std::to_string(t);
        throw FitError("scaler: target '" + name + "' has zero variance");
      }
      mean[t] = m;
      sd[t] = std::sqrt(v);
    }
    return TargetScaler(std::move(mean), std::move(sd));
  }

  std::vector<double> transform(std::span<const double> y) const {
    check(y);
    std::vector<double> out(y.begin(), y.end());
    const std::size_t T = mean_.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean_[i % T]) / std_[i % T];
    return out;
  }

  std::vector<double> inverse(std::span<const double> z) const {
    check(z);
    std::vector<double> out(z.begin(), z.end());
    const std::size_t T = mean_.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * std_[i % T] + mean_[i % T];
    return out;
  }

  std::size_t size() const { return mean_.size(); }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& stddev() const { return std_; }

  json to_json() const { return {{"mean", mean_}, {"std", std_}}; }
  static TargetScaler from_json(const json& j) {
    return TargetScaler(j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>());
  }

 private:
  void check(std::span<const double> y) const {
    if (mean_.empty() || y.size() % mean_.size() != 0) throw ShapeError("scaler: row width mismatch");
  }

  std::vector<double> mean_;
  std::vector<double> std_;
};

// ---------------------------------------------------------------------------
// Heads

enum class HeadKind { bounded, unbounded };

inline std::string_view head_name(HeadKind k) { return k == HeadKind::bounded ? "bounded" : "unbounded"; }

inline HeadKind parse_head(std::string_view s) {
  if (s == "bounded") return HeadKind::bounded;
  if (s == "unbounded") return HeadKind::unbounded;
  throw ConfigError("unknown head kind '" + std::string(s) + "'");
}

/// Plain affine output layer, y = h W + b.
struct UnboundedHead {
  Parameter weight;  // [h, t]
  Parameter bias;    // [t]

  UnboundedHead() = default;
  UnboundedHead(std::size_t hidden, std::size_t targets, Rng& rng)
      : weight("head.weight", Tensor::randn({hidden, targets}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)))),
        bias("head.bias", Tensor::zeros({targets})) {}

  Var forward(Tape& tape, Var hidden) {
    if (hidden.shape().size() != 2 || hidden.shape()[1] != weight.value.shape[0])
      throw ShapeError("unbounded head: hidden width mismatch");
    return ad::add_bias(ad::matmul(hidden, tape.param(weight)), tape.param(bias));
  }
};

/// y = lo + (hi - lo) * sigmoid(h W + b), kept strictly inside (lo, hi).
struct BoundedHead {
  Parameter weight;  // [h, t]
  Parameter bias;    // [t]
  double lo = -3.0;
  double hi = 3.0;

  BoundedHead() = default;
  BoundedHead(std::size_t hidden, std::size_t targets, Rng& rng, double lo_ = -3.0, double hi_ = 3.0)
      : weight("head.weight", Tensor::randn({hidden, targets}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)))),
        bias("head.bias", Tensor::zeros({targets})),
        lo(lo_),
        hi(hi_) {
    if (!(lo < hi)) throw ConfigError("bounded head needs lo < hi");
  }

  Var pre_activation(Tape& tape, Var hidden) {
    if (hidden.shape().size() != 2 || hidden.shape()[1] != weight.value.shape[0])
      throw ShapeError("bounded head: hidden width mismatch");
    return ad::add_bias(ad::matmul(hidden, tape.param(weight)), tape.param(bias));
  }

  Var forward(Tape& tape, Var hidden) { return squash(pre_activation(tape, hidden)); }

  Var squash(Var z) const {
    Var y = ad::add_scalar(ad::scale(ad::sigmoid(z), hi - lo), lo);
    return ad::clamp_open(y, lo, hi);
  }
};

// ---------------------------------------------------------------------------
// MLP regressor: features -> tanh hidden -> head

struct MlpConfig {
  std::size_t input_dim = 0;
  std::size_t hidden = 64;
  std::size_t targets = 1;
  HeadKind head = HeadKind::bounded;
  double lo = -3.0;
  double hi = 3.0;
  double init_std = 1.0;
  std::uint64_t seed = 0;
};

/// Row-aligned design and target matrices.
struct RegressionData {
  Tensor X;  // [n, d]
  Tensor Y;  // [n, t]

  std::size_t size() const { return X.rows(); }

  Tensor rows_of(const Tensor& m, std::span<const std::size_t> rows) const {
    const std::size_t c = m.cols();
    Tensor out = Tensor::zeros({rows.size(), c});
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(rows[r] * c), c,
                  out.data.begin() + static_cast<std::ptrdiff_t>(r * c));
    return out;
  }
};

class MlpRegressor {
 public:
  using Data = RegressionData;

  MlpRegressor() = default;
  explicit MlpRegressor(const MlpConfig& cfg) : cfg_(cfg) {
    if (cfg.input_dim == 0 || cfg.hidden == 0 || cfg.targets == 0) throw ConfigError("mlp: zero dimension");
    Rng rng(cfg.seed);
    w1_ = Parameter("encoder.weight", Tensor::randn({cfg.input_dim, cfg.hidden}, rng, cfg.init_std));
    b1_ = Parameter("encoder.bias", Tensor::zeros({cfg.hidden}));
    if (cfg.head == HeadKind::bounded)
      bounded_ = BoundedHead(cfg.hidden, cfg.targets, rng, cfg.lo, cfg.hi);
    else
      unbounded_ = UnboundedHead(cfg.hidden, cfg.targets, rng);
  }

  const MlpConfig& config() const { return cfg_; }

  std::vector<Parameter*> parameters() {
    if (cfg_.head == HeadKind::bounded) return {&w1_, &b1_, &bounded_.weight, &bounded_.bias};
    return {&w1_, &b1_, &unbounded_.weight, &unbounded_.bias};
  }

  Var encode(Tape& tape, Var x) {
    return ad::tanh(ad::add_bias(ad::matmul(x, tape.param(w1_)), tape.param(b1_)));
  }

  Var forward(Tape& tape, Var x) {
    Var h = encode(tape, x);
    return cfg_.head == HeadKind::bounded ? bounded_.forward(tape, h) : unbounded_.forward(tape, h);
  }

  Var loss(Tape& tape, const Data& data, std::span<const std::size_t> rows) {
    Var x = tape.constant(data.rows_of(data.X, rows));
    Var y = tape.constant(data.rows_of(data.Y, rows));
    return ad::mse(forward(tape, x), y);
  }

  /// Predictions for a dense [n, d] matrix, in the model's output space.
  Tensor predict(const Tensor& X) {
    Tape tape;
    return forward(tape, tape.constant(X)).value();
  }

  BoundedHead& bounded_head() { return bounded_; }
  UnboundedHead& unbounded_head() { return unbounded_; }

 private:
  MlpConfig cfg_;
  Parameter w1_, b1_;
  BoundedHead bounded_;
  UnboundedHead unbounded_;
};

// ---------------------------------------------------------------------------
// Metrics

/// 1 - SS_res / SS_tot. Unbounded below.
inline double r_squared(std::span<const double> y_true, std::span<const double> y_pred) {
  if (y_true.empty() || y_true.size() != y_pred.size())
    throw ShapeError("r_squared: inputs must be non-empty and equal length");
  double mean = 0.0;
  for (double y : y_true) mean += y;
  mean /= static_cast<double>(y_true.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    ss_res += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
    ss_tot += (y_true[i] - mean) * (y_true[i] - mean);
  }
  if (!(ss_tot > 0.0)) throw MetricError("r_squared undefined: y_true has zero variance");
  return 1.0 - ss_res / ss_tot;
}

/// Per-column R^2 for row-major [n, t] matrices.
inline std::vector<double> r_squared_columns(std::span<const double> y_true, std::span<const double> y_pred,
                                             std::size_t n_targets) {
  if (y_true.size() != y_pred.size() || n_targets == 0 || y_true.size() % n_targets != 0)
    throw ShapeError("r_squared_columns: shape mismatch");
  const std::size_t n = y_true.size() / n_targets;
  std::vector<double> out;
  std::vector<double> a(n), b(n);
  for (std::size_t t = 0; t < n_targets; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = y_true[i * n_targets + t];
      b[i] = y_pred[i * n_targets + t];
    }
    out.push_back(r_squared(a, b));
  }
  return out;
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Unweighted mean of per-label F1 over row-major [n, n_labels] 0/1 masks. A
/// label with neither true nor predicted positives scores 1.
inline double macro_f1(std::span<const std::uint8_t> true_masks, std::span<const std::uint8_t> pred_masks,
                       std::size_t n_labels) {
  if (true_masks.size() != pred_masks.size() || n_labels == 0 || true_masks.size() % n_labels != 0)
    throw ShapeError("macro_f1: mask shape mismatch");
  const std::size_t n = true_masks.size() / n_labels;
  double total = 0.0;
  for (std::size_t l = 0; l < n_labels; ++l) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      bool t = true_masks[i * n_labels + l] != 0, p = pred_masks[i * n_labels + l] != 0;
      tp += t && p;
      fp += !t && p;
      fn += t && !p;
    }
    total += (tp + fp + fn == 0) ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  }
  return total / static_cast<double>(n_labels);
}

inline double perplexity(double mean_nll) { return std::exp(mean_nll); }

struct MetricsReport {
  std::vector<double> r2;
  double avg_r2 = 0.0;
  std::optional<double> macro_f1;
  double mse = 0.0;
  std::optional<double> perplexity;

  json to_json() const {
    json j = {{"r2", r2}, {"avg_r2", avg_r2}, {"mse", mse}};
    if (macro_f1) j["macro_f1"] = *macro_f1;
    if (perplexity) j["perplexity"] = *perplexity;
    return j;
  }
};

inline MetricsReport regression_report(std::span<const double> y_true, std::span<const double> y_pred,
                                       std::size_t n_targets) {
  MetricsReport r;
  r.r2 = r_squared_columns(y_true, y_pred, n_targets);
  r.avg_r2 = mean_of(r.r2);
  double s = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) s += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
  r.mse = s / static_cast<double>(y_true.size());
  return r;
}

// ---------------------------------------------------------------------------
// Dense linear algebra for the baselines

namespace detail {

/// In-place Cholesky of an SPD [n,n] matrix into its lower factor.
inline void cholesky(std::vector<double>& a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 1e-300) || !std::isfinite(d))
      throw SolverError("ridge: system is numerically singular (pivot " + std::to_string(j) + ")");
    const double l = std::sqrt(d);
    a[j * n + j] = l;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / l;
    }
  }
}

/// Solves L L^T X = B in place; B is [n, m].
inline void cholesky_solve(const std::vector<double>& L, std::size_t n, std::vector<double>& B, std::size_t m) {
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = B[i * m + c];
      for (std::size_t k = 0; k < i; ++k) s -= L[i * n + k] * B[k * m + c];
      B[i * m + c] = s / L[i * n + i];
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = B[i * m + c];
      for (std::size_t k = i + 1; k < n; ++k) s -= L[k * n + i] * B[k * m + c];
      B[i * m + c] = s / L[i * n + i];
    }
  }
}

}  // namespace detail

/// Solves (X^T X + lambda I) W = X^T Y for dense row-major X [n,d], Y [n,t].
/// Uses the equivalent dual system X^T (X X^T + lambda I)^-1 Y when n < d.
/// Returns W as row-major [d, t].
inline std::vector<double> ridge_fit(std::span<const double> X, std::size_t n, std::size_t d,
                                     std::span<const double> Y, std::size_t t, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("ridge: lambda must be > 0");
  if (X.size() != n * d || Y.size() != n * t) throw ShapeError("ridge: shape mismatch");
  if (n >= d) {
    std::vector<double> A(d * d, 0.0), B(d * t, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = X.data() + i * d;
      for (std::size_t p = 0; p < d; ++p) {
        if (x[p] == 0.0) continue;
        for (std::size_t q = 0; q <= p; ++q) A[p * d + q] += x[p] * x[q];
        for (std::size_t c = 0; c < t; ++c) B[p * t + c] += x[p] * Y[i * t + c];
      }
    }
    for (std::size_t p = 0; p < d; ++p) {
      A[p * d + p] += lambda;
      for (std::size_t q = 0; q < p; ++q) A[q * d + p] = A[p * d + q];
    }
    detail::cholesky(A, d);
    detail::cholesky_solve(A, d, B, t);
    return B;
  }
  std::vector<double> K(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) s += X[i * d + p] * X[j * d + p];
      K[i * n + j] = K[j * n + i] = s;
    }
  for (std::size_t i = 0; i < n; ++i) K[i * n + i] += lambda;
  std::vector<double> alpha(Y.begin(), Y.end());
  detail::cholesky(K, n);
  detail::cholesky_solve(K, n, alpha, t);
  std::vector<double> W(d * t, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < d; ++p) {
      double x = X[i * d + p];
      if (x == 0.0) continue;
      for (std::size_t c = 0; c < t; ++c) W[p * t + c] += x * alpha[i * t + c];
    }
  return W;
}

/// Ridge with an unpenalised intercept (columns and targets centred first).
class RidgeRegressor {
 public:
  static RidgeRegressor fit(std::span<const double> X, std::size_t n, std::size_t d, std::span<const double> Y,
                            std::size_t t, double lambda) {
    RidgeRegressor r;
    r.d_ = d;
    r.t_ = t;
    std::vector<double> xm(d, 0.0), ym(t, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < d; ++p) xm[p] += X[i * d + p];
      for (std::size_t c = 0; c < t; ++c) ym[c] += Y[i * t + c];
    }
    for (auto& v : xm) v /= static_cast<double>(n);
    for (auto& v : ym) v /= static_cast<double>(n);
    std::vector<double> Xc(X.begin(), X.end()), Yc(Y.begin(), Y.end());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < d; ++p) Xc[i * d + p] -= xm[p];
      for (std::size_t c = 0; c < t; ++c) Yc[i * t + c] -= ym[c];
    }
    r.weights_ = ridge_fit(Xc, n, d, Yc, t, lambda);
    r.intercept_ = ym;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t c = 0; c < t; ++c) r.intercept_[c] -= xm[p] * r.weights_[p * t + c];
    return r;
  }

  RidgeRegressor() = default;
  RidgeRegressor(std::size_t d, std::size_t t, std::vector<double> w, std::vector<double> b)
      : d_(d), t_(t), weights_(std::move(w)), intercept_(std::move(b)) {
    if (weights_.size() != d * t || intercept_.size() != t) throw ShapeError("ridge: weight shape mismatch");
  }

  std::vector<double> predict(std::span<const double> X) const {
    const std::size_t n = X.size() / d_;
    std::vector<double> out(n * t_);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < t_; ++c) {
        double s = intercept_[c];
        for (std::size_t p = 0; p < d_; ++p) s += X[i * d_ + p] * weights_[p * t_ + c];
        out[i * t_ + c] = s;
      }
    return out;
  }

  std::size_t input_dim() const { return d_; }
  std::size_t targets() const { return t_; }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& intercept() const { return intercept_; }

 private:
  std::size_t d_ = 0, t_ = 0;
  std::vector<double> weights_, intercept_;
};

// ---------------------------------------------------------------------------
// One-vs-rest linear classifiers (hinge or logistic)

enum class LinearLoss { hinge, logistic };

inline std::string_view loss_name(LinearLoss l) { return l == LinearLoss::hinge ? "hinge" : "logistic"; }

inline LinearLoss parse_linear_loss(std::string_view s) {
  if (s == "hinge") return LinearLoss::hinge;
  if (s == "logistic") return LinearLoss::logistic;
  throw ConfigError("unknown linear loss '" + std::string(s) + "'");
}

/// Regularised objective for one binary problem with labels y in {-1, +1}:
///   (1/n) sum l(y_i (w.x_i + b)) + (l2/2) |w|^2
inline double linear_objective(LinearLoss loss, std::span<const double> w, double b, std::span<const double> X,
                               std::span<const double> y, double l2) {
  const std::size_t d = w.size(), n = y.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = b;
    for (std::size_t p = 0; p < d; ++p) s += w[p] * X[i * d + p];
    double m = y[i] * s;
    total += loss == LinearLoss::hinge ? std::max(0.0, 1.0 - m)
                                       : (m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m)));
  }
  double reg = 0.0;
  for (double v : w) reg += v * v;
  return total / static_cast<double>(n) + 0.5 * l2 * reg;
}

/// (Sub)gradient of linear_objective; last element is d/db.
inline std::vector<double> linear_gradient(LinearLoss loss, std::span<const double> w, double b,
                                           std::span<const double> X, std::span<const double> y, double l2) {
  const std::size_t d = w.size(), n = y.size();
  std::vector<double> g(d + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b;
    for (std::size_t p = 0; p < d; ++p) s += w[p] * X[i * d + p];
    double m = y[i] * s;
    double dm = loss == LinearLoss::hinge ? (m < 1.0 ? -1.0 : 0.0) : -1.0 / (1.0 + std::exp(m));
    double c = dm * y[i] / static_cast<double>(n);
    for (std::size_t p = 0; p < d; ++p) g[p] += c * X[i * d + p];
    g[d] += c;
  }
  for (std::size_t p = 0; p < d; ++p) g[p] += l2 * w[p];
  return g;
}

struct LinearBaselineConfig {
  LinearLoss loss = LinearLoss::hinge;
  double learning_rate = 0.5;
  std::size_t epochs = 300;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  /// Multi-class predicts the argmax; otherwise each label thresholds at 0.
  bool multi_class = false;
};

class LinearClassifier {
 public:
  LinearClassifier() = default;
  LinearClassifier(std::size_t d, std::size_t labels, std::vector<double> w, std::vector<double> b, bool multi_class,
                   LinearLoss loss)
      : d_(d), labels_(labels), weights_(std::move(w)), bias_(std::move(b)), multi_class_(multi_class), loss_(loss) {
    if (weights_.size() != d * labels || bias_.size() != labels) throw ShapeError("linear classifier: shape mismatch");
  }

  /// Decision scores, row-major [n, labels].
  std::vector<double> scores(std::span<const double> X) const {
    const std::size_t n = X.size() / d_;
    std::vector<double> out(n * labels_);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < labels_; ++l) {
        double s = bias_[l];
        for (std::size_t p = 0; p < d_; ++p) s += X[i * d_ + p] * weights_[l * d_ + p];
        out[i * labels_ + l] = s;
      }
    return out;
  }

  std::vector<std::uint8_t> predict(std::span<const double> X) const {
    auto s = scores(X);
    const std::size_t n = s.size() / labels_;
    std::vector<std::uint8_t> out(s.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (multi_class_) {
        std::size_t best = 0;
        for (std::size_t l = 1; l < labels_; ++l)
          if (s[i * labels_ + l] > s[i * labels_ + best]) best = l;
        out[i * labels_ + best] = 1;
      } else {
        for (std::size_t l = 0; l < labels_; ++l) out[i * labels_ + l] = s[i * labels_ + l] > 0.0;
      }
    }
    return out;
  }

  std::size_t input_dim() const { return d_; }
  std::size_t labels() const { return labels_; }
  bool multi_class() const { return multi_class_; }
  LinearLoss loss() const { return loss_; }
  /// Row-major [labels, d].
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& bias() const { return bias_; }

 private:
  std::size_t d_ = 0, labels_ = 0;
  std::vector<double> weights_, bias_;
  bool multi_class_ = false;
  LinearLoss loss_ = LinearLoss::hinge;
};

/// One-vs-rest, deterministic full-batch (sub)gradient descent. `labels` is a
/// row-major [n, n_labels] 0/1 mask.
inline LinearClassifier fit_linear_baseline(std::span<const double> X, std::size_t n, std::size_t d,
                                            std::span<const std::uint8_t> labels, std::size_t n_labels,
                                            const LinearBaselineConfig& cfg) {
  if (X.size() != n * d || labels.size() != n * n_labels) throw ShapeError("linear baseline: shape mismatch");
  if (n_labels == 0) throw FitError("linear baseline: no labels");
  if (cfg.multi_class) {
    std::size_t present = 0;
    for (std::size_t l = 0; l < n_labels; ++l) {
      bool any = false;
      for (std::size_t i = 0; i < n && !any; ++i) any = labels[i * n_labels + l] != 0;
      present += any;
    }
    if (present < 2) throw FitError("linear baseline: multi-class input has fewer than two classes");
  } else {
    bool varied = false;
    for (std::size_t l = 0; l < n_labels && !varied; ++l)
      for (std::size_t i = 1; i < n && !varied; ++i) varied = labels[i * n_labels + l] != labels[l];
    if (!varied) throw FitError("linear baseline: every label is constant (single class)");
  }

  Rng rng(cfg.seed);
  std::vector<double> W(n_labels * d), B(n_labels, 0.0);
  for (auto& w : W) w = rng.normal(0.0, 0.01);
  std::vector<double> y(n);
  for (std::size_t l = 0; l < n_labels; ++l) {
    for (std::size_t i = 0; i < n; ++i) y[i] = labels[i * n_labels + l] ? 1.0 : -1.0;
    std::span<double> w(W.data() + l * d, d);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      auto g = linear_gradient(cfg.loss, w, B[l], X, y, cfg.l2);
      for (std::size_t p = 0; p < d; ++p) w[p] -= cfg.learning_rate * g[p];
      B[l] -= cfg.learning_rate * g[d];
    }
  }
  return LinearClassifier(d, n_labels, std::move(W), std::move(B), cfg.multi_class, cfg.loss);
}

}  // namespace psyche::models
