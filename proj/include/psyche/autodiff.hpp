// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors and a reverse-mode tape.
//
// A Tape records every primitive applied during one forward pass. Leaves are
// constants, differentiable inputs, or Parameters. Tape::backward walks the
// recording in reverse and adds each trainable Parameter's gradient into
// Parameter::grad. Gradients accumulate across backward calls until
// Parameter::zero_grad.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "psyche/common.hpp"
#include "psyche/random.hpp"

namespace psyche::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> d) {
    return Tensor({rows, cols}, std::move(d));
  }
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.data) x = rng.normal(0.0, stddev);
    return t;
  }
  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.data) x = rng.uniform(lo, hi);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.size() == 2 ? shape[1] : numel(); }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape));
    return data[0];
  }

  bool operator==(const Tensor&) const = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)), trainable(train) {}

  void zero_grad() {
    grad.shape = value.shape;
    grad.data.assign(value.numel(), 0.0);
  }
  std::size_t numel() const { return value.numel(); }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Var constant(Tensor t) { return push(std::move(t), false, nullptr); }

  /// Differentiable leaf not bound to a Parameter (used by gradient checks).
  Var input(Tensor t) { return push(std::move(t), true, nullptr); }

  Var param(Parameter& p) {
    Var v = push(p.value, p.trainable, nullptr);
    nodes_[v.id].param = p.trainable ? &p : nullptr;
    return v;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward pass with respect to v (zeros if none).
  Tensor grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad.data.empty() ? Tensor::zeros(n.value.shape) : n.grad;
  }

  /// Records an op. `fn` runs during backward, reading grad_of(out).
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool req = false;
    for (Var in : inputs) req = req || nodes_.at(in.id).requires_grad;
    Var out = push(std::move(value), req, nullptr);
    if (req) nodes_[out.id].backward = std::move(fn);
    return out;
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool req = false;
    for (Var in : inputs) req = req || nodes_.at(in.id).requires_grad;
    Var out = push(std::move(value), req, nullptr);
    if (req) nodes_[out.id].backward = std::move(fn);
    return out;
  }

  /// Gradient buffer of a node, allocated on first touch. Only valid during
  /// backward.
  std::vector<double>& grad_buffer(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad.data;
  }
  bool wants_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const std::vector<double>& upstream(Var v) { return grad_buffer(v); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Every node is visited once, in
  /// reverse recording order (a valid reverse topological order).
  void backward(Var loss) {
    if (value(loss).numel() != 1)
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(value(loss).shape));
    for (auto& n : nodes_) n.grad.data.clear();
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.data.empty()) continue;
      if (n.backward) n.backward(*this);
      if (n.param) {
        auto& g = n.param->grad;
        if (g.data.size() != n.grad.data.size()) n.param->zero_grad();
        for (std::size_t k = 0; k < g.data.size(); ++k) g.data[k] += nodes_[i].grad.data[k];
      }
    }
  }

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Tensor t, bool req, Parameter* p) {
    nodes_.push_back({std::move(t), {}, {}, p, req});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.shape.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape));
}

/// out[m,n] += a[m,k] * b[k,n]
inline void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

/// out[m,k] += g[m,n] * b[k,n]^T
inline void gemm_nt_acc(const double* g, const double* b, double* out, std::size_t m, std::size_t n,
                        std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      const double* grow = g + i * n;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      out[i * k + p] += s;
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn_acc(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
                        std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* grow = g + i * n;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
}

inline double stable_sigmoid(double z) {
  double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  return std::clamp(s, lo, hi);
}

}  // namespace detail

/// Elementwise op with derivative expressed through (input, output).
template <class Fwd, class Deriv>
Var map_elementwise(Var a, Fwd fwd, Deriv deriv) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor y = Tensor::zeros(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = fwd(x.data[i]);
  std::size_t out_id = t.size();
  return t.record(std::move(y), {a}, [a, deriv, out_id](Tape& tp) {
    Var out{&tp, out_id};
    const auto& g = tp.upstream(out);
    const auto& xv = tp.value(a).data;
    const auto& yv = tp.value(out).data;
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_matrix(A, "matmul");
  detail::require_matrix(B, "matmul");
  if (A.shape[1] != B.shape[0])
    throw ShapeError("matmul: inner dimensions differ " + shape_str(A.shape) + " x " + shape_str(B.shape));
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor C = Tensor::zeros({m, n});
  detail::gemm_acc(A.data.data(), B.data.data(), C.data.data(), m, k, n);
  Tape& t = *a.tape;
  std::size_t out_id = t.size();
  return t.record(std::move(C), {a, b}, [a, b, m, k, n, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    if (tp.wants_grad(a))
      detail::gemm_nt_acc(g.data(), tp.value(b).data.data(), tp.grad_buffer(a).data(), m, n, k);
    if (tp.wants_grad(b))
      detail::gemm_tn_acc(tp.value(a).data.data(), g.data(), tp.grad_buffer(b).data(), m, k, n);
  });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  detail::require_matrix(A, "transpose");
  const std::size_t m = A.shape[0], n = A.shape[1];
  Tensor T = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) T.data[j * m + i] = A.data[i * n + j];
  Tape& t = *a.tape;
  std::size_t out_id = t.size();
  return t.record(std::move(T), {a}, [a, m, n, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] += b.value().data[i];
  Tape& t = *a.tape;
  std::size_t out_id = t.size();
  return t.record(std::move(y), {a, b}, [a, b, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    for (Var v : {a, b})
      if (tp.wants_grad(v)) {
        auto& gv = tp.grad_buffer(v);
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
      }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] -= b.value().data[i];
  Tape& t = *a.tape;
  std::size_t out_id = t.size();
  return t.record(std::move(y), {a, b}, [a, b, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    if (tp.wants_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.wants_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] *= b.value().data[i];
  Tape& t = *a.tape;
  std::size_t out_id = t.size();
  return t.record(std::move(y), {a, b}, [a, b, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    if (tp.wants_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      const auto& bv = tp.value(b).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.wants_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      const auto& av = tp.value(a).data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// x[m,n] + bias broadcast over rows; bias has n elements.
inline Var add_bias(Var x, Var bias) {
  const Tensor& X = x.value();
  detail::require_matrix(X, "add_bias");
  const std::size_t m = X.shape[0], n = X.shape[1];
  if (bias.value().numel() != n)
    throw ShapeError("add_bias: bias " + shape_str(bias.value().shape) + " does not fit " + shape_str(X.shape));
  Tensor y = X;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.data[i * n + j] += bias.value().data[j];
  Tape& t = *x.tape;
  std::size_t out_id = t.size();
  return t.record(std::move(y), {x, bias}, [x, bias, m, n, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    if (tp.wants_grad(x)) {
      auto& gx = tp.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.wants_grad(bias)) {
      auto& gb = tp.grad_buffer(bias);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

inline Var scale(Var a, double s) {
  return map_elementwise(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double c) {
  return map_elementwise(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var tanh(Var a) {
  return map_elementwise(a, [](double x) { return std::tanh(x); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return map_elementwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// 1 / (1 + e^-z), kept strictly inside (0, 1).
inline Var sigmoid(Var a) {
  return map_elementwise(a, detail::stable_sigmoid,
                         [](double, double y) { return y * (1.0 - y); });
}

/// Clamps onto the open interval (lo, hi): values at or beyond a bound move to
/// the nearest representable value inside it. Gradient passes through
/// interior values and is zero where clamping happened.
inline Var clamp_open(Var a, double lo, double hi) {
  const double inner_lo = std::nextafter(lo, hi), inner_hi = std::nextafter(hi, lo);
  return map_elementwise(
      a, [=](double x) { return std::clamp(x, inner_lo, inner_hi); },
      [=](double x, double) { return (x > inner_lo && x < inner_hi) ? 1.0 : 0.0; });
}

inline Var softmax_rows(Var a) {
  const Tensor& X = a.value();
  detail::require_matrix(X, "softmax_rows");
  const std::size_t m = X.shape[0], n = X.shape[1];
  Tensor Y = Tensor::zeros(X.shape);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, X.data[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += Y.data[i * n + j] = std::exp(X.data[i * n + j] - mx);
    for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] /= s;
  }
  Tape& t = *a.tape;
  std::size_t out_id = t.size();
  return t.record(std::move(Y), {a}, [a, m, n, out_id](Tape& tp) {
    Var out{&tp, out_id};
    const auto& g = tp.upstream(out);
    const auto& y = tp.value(out).data;
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

/// Concatenates matrices with equal row counts along columns.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    detail::require_matrix(p.value(), "concat_cols");
    if (p.value().shape[0] != m) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.value().shape[1]);
    total += widths.back();
  }
  Tensor Y = Tensor::zeros({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k].value().data;
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * widths[k]), widths[k],
                  Y.data.begin() + static_cast<std::ptrdiff_t>(i * total + off));
    off += widths[k];
  }
  Tape& t = *parts[0].tape;
  std::size_t out_id = t.size();
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(Y), parts, [ins, widths, m, total, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    std::size_t off = 0;
    for (std::size_t k = 0; k < ins.size(); ++k) {
      if (tp.wants_grad(ins[k])) {
        auto& gk = tp.grad_buffer(ins[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gk[i * widths[k] + j] += g[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// Rows of table[V,d] gathered by id into [ids.size(), d].
inline Var embedding(Var table, std::span<const std::size_t> ids) {
  const Tensor& E = table.value();
  detail::require_matrix(E, "embedding");
  const std::size_t V = E.shape[0], d = E.shape[1];
  Tensor Y = Tensor::zeros({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= V)
      throw BoundsError("embedding: token id " + std::to_string(ids[r]) + " >= vocabulary " + std::to_string(V));
    std::copy_n(E.data.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                Y.data.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Tape& t = *table.tape;
  std::size_t out_id = t.size();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return t.record(std::move(Y), {table}, [table, idv, d, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    auto& ge = tp.grad_buffer(table);
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) ge[idv[r] * d + j] += g[r * d + j];
  });
}

inline Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.value().numel())
    throw ShapeError("reshape: " + shape_str(a.value().shape) + " -> " + shape_str(shape));
  Tensor Y(std::move(shape), a.value().data);
  Tape& t = *a.tape;
  std::size_t out_id = t.size();
  return t.record(std::move(Y), {a}, [a, out_id](Tape& tp) {
    const auto& g = tp.upstream({&tp, out_id});
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  Tape& t = *a.tape;
  std::size_t out_id = t.size();
  return t.record(Tensor::scalar(s), {a}, [a, out_id](Tape& tp) {
    double g = tp.upstream({&tp, out_id})[0];
    for (auto& x : tp.grad_buffer(a)) x += g;
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum(a), 1.0 / n);
}

/// Mean of squared differences.
inline Var mse(Var pred, Var target) {
  detail::require_same_shape(pred.value(), target.value(), "mse");
  const std::size_t n = pred.value().numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = pred.value().data[i] - target.value().data[i];
    s += d * d;
  }
  Tape& t = *pred.tape;
  std::size_t out_id = t.size();
  return t.record(Tensor::scalar(s / static_cast<double>(n)), {pred, target},
                  [pred, target, n, out_id](Tape& tp) {
                    double g = tp.upstream({&tp, out_id})[0];
                    const auto& p = tp.value(pred).data;
                    const auto& y = tp.value(target).data;
                    double c = 2.0 * g / static_cast<double>(n);
                    if (tp.wants_grad(pred)) {
                      auto& gp = tp.grad_buffer(pred);
                      for (std::size_t i = 0; i < n; ++i) gp[i] += c * (p[i] - y[i]);
                    }
                    if (tp.wants_grad(target)) {
                      auto& gy = tp.grad_buffer(target);
                      for (std::size_t i = 0; i < n; ++i) gy[i] -= c * (p[i] - y[i]);
                    }
                  });
}

/// Mean over rows of -log softmax(logits)[row, target]. Max-subtracted.
inline Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& X = logits.value();
  detail::require_matrix(X, "cross_entropy");
  const std::size_t m = X.shape[0], V = X.shape[1];
  if (targets.size() != m) throw ShapeError("cross_entropy: one target per row required");
  Tensor P = Tensor::zeros(X.shape);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= V)
      throw BoundsError("cross_entropy: target " + std::to_string(targets[i]) + " >= " + std::to_string(V));
    const double* row = X.data.data() + i * V;
    double mx = *std::max_element(row, row + V);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += P.data[i * V + j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < V; ++j) P.data[i * V + j] /= s;
    loss += -(row[targets[i]] - mx - std::log(s));
  }
  loss /= static_cast<double>(m);
  Tape& t = *logits.tape;
  std::size_t out_id = t.size();
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return t.record(Tensor::scalar(loss), {logits}, [logits, P = std::move(P), tv, m, V, out_id](Tape& tp) {
    double g = tp.upstream({&tp, out_id})[0] / static_cast<double>(m);
    auto& gl = tp.grad_buffer(logits);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < V; ++j)
        gl[i * V + j] += g * (P.data[i * V + j] - (j == tv[i] ? 1.0 : 0.0));
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Builds a scalar from the tape inputs.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Largest per-coordinate relative error between `analytic` and central
/// differences of `value`; denominator max(|analytic|, |numeric|, 1e-8).
inline double compare_gradients(const std::function<double(const std::vector<Tensor>&)>& value,
                                const std::vector<Tensor>& analytic, std::vector<Tensor> point,
                                double eps) {
  double worst = 0.0;
  for (std::size_t k = 0; k < point.size(); ++k) {
    for (std::size_t i = 0; i < point[k].numel(); ++i) {
      const double orig = point[k].data[i];
      point[k].data[i] = orig + eps;
      const double fp = value(point);
      point[k].data[i] = orig - eps;
      const double fm = value(point);
      point[k].data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k].data[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

/// Checks the tape's gradient of `fn` at `point` against central differences.
inline double grad_check(const ScalarFn& fn, const std::vector<Tensor>& point, double eps = 1e-5) {
  auto evaluate = [&](const std::vector<Tensor>& at) {
    Tape tape;
    std::vector<Var> ins;
    for (const auto& t : at) ins.push_back(tape.input(t));
    return fn(tape, ins).value().item();
  };
  Tape tape;
  std::vector<Var> ins;
  for (const auto& t : point) ins.push_back(tape.input(t));
  Var out = fn(tape, ins);
  tape.backward(out);
  std::vector<Tensor> analytic;
  for (Var v : ins) analytic.push_back(tape.grad(v));
  return compare_gradients(evaluate, analytic, point, eps);
}

inline double grad_check(const ScalarFn& fn, const Tensor& point, double eps = 1e-5) {
  return grad_check(fn, std::vector<Tensor>{point}, eps);
}

}  // namespace psyche::ad
