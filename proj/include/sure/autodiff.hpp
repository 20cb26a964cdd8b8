#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Tape records every operation of one forward pass. Values are computed
// eagerly when an op is recorded; backward() walks the tape in reverse and
// accumulates gradients into every node that requires one. Tapes are meant to
// be short lived: build one per forward pass and drop it after backward().

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sure/error.hpp"
#include "sure/tensor.hpp"

namespace sure {

using NodeId = std::size_t;

/// Zero-norm guard for l2 normalization.
inline constexpr double kNormEpsilon = 1e-12;

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

/// Parameter name -> gradient with the parameter's shape.
using Gradients = std::map<std::string, Tensor>;

class Tape;

/// Handle to a node on a tape.
class Var {
public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  NodeId id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

class Tape {
public:
  /// Receives the node's output gradient and pushes contributions into inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    std::string param_name;  // non-empty for parameter leaves
    bool trainable = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var parameter(const Parameter& p) {
    Node n;
    n.value = p.value;
    n.param_name = p.name;
    n.trainable = p.trainable;
    n.requires_grad = p.trainable;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
    const NodeId id = nodes_.size();
    bool req = false;
    for (NodeId in : inputs) {
      if (in >= id) throw InternalError("tape input refers to a later node");
      req = req || nodes_[in].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.requires_grad = req;
    if (req) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, id);
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }

  /// Zero-initialized gradient buffer of node `id`, or nullptr when the node
  /// does not require a gradient.
  Tensor* grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return &n.grad;
  }

  friend Gradients backward(Tape& tape, Var loss);

private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

/// Reverse pass from a scalar loss. Returns a gradient for every trainable
/// parameter leaf on the tape (zeros where the loss does not depend on it).
inline Gradients backward(Tape& tape, Var loss) {
  if (&loss.tape() != &tape) throw InternalError("loss belongs to a different tape");
  const Tensor& lv = tape.value(loss.id());
  if (!lv.is_scalar()) throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(lv.shape()));

  for (auto& n : tape.nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (Tensor* g = tape.grad_buffer(loss.id())) (*g)[0] = 1.0;

  for (NodeId id = loss.id() + 1; id-- > 0;) {
    Tape::Node& n = tape.nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    n.backward(tape, n.grad);
  }

  Gradients out;
  for (auto& n : tape.nodes_) {
    if (n.param_name.empty() || !n.trainable) continue;
    Tensor g = n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0);
    auto [it, inserted] = out.try_emplace(n.param_name, g);
    if (!inserted) {
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops

inline Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    for (NodeId in : {ia, ib}) {
      if (Tensor* d = t.grad_buffer(in))
        for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
    if (Tensor* d = t.grad_buffer(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] -= g[i];
  });
}

inline Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * bv[i];
    if (Tensor* d = t.grad_buffer(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * av[i];
  });
}

/// Elementwise product with a constant tensor (no gradient to the constant).
inline Var mul_const(Var a, const Tensor& c) {
  require_same_shape(a.value(), c, "mul_const");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, c](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * c[i];
  });
}

/// a + c for a constant tensor c.
inline Var add_const(Var a, const Tensor& c) {
  require_same_shape(a.value(), c, "add_const");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, s](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * s;
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) (*d)[i] += g[i];
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  const NodeId ia = a.id();
  const NodeId io = a.tape().size();
  return a.tape().record(std::move(out), {ia}, [ia, io](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(io);
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * y[i];
  });
}

inline Var log(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::log(v);
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] / x[i];
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const NodeId ia = a.id();
  return a.tape().record(Tensor::scalar(s), {ia}, [ia](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (double& v : d->values()) v += g[0];
  });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const NodeId ia = a.id();
  return a.tape().record(Tensor::scalar(s / static_cast<double>(n)), {ia}, [ia, n](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia)) {
      const double share = g[0] / static_cast<double>(n);
      for (double& v : d->values()) v += share;
    }
  });
}

/// Sum over the last axis: [B, N] -> [B], [N] -> [].
inline Var row_sum(Var a) {
  const auto [rows, cols] = as_rows(a.value(), "row_sum");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out(out_shape, 0.0);
  const Tensor& x = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c];
    out[r] = s;
  }
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, rows, cols](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*d)[r * cols + c] += g[r];
  });
}

/// Maximum over the last axis; the gradient flows to the first maximal entry.
inline Var row_max(Var a) {
  const auto [rows, cols] = as_rows(a.value(), "row_max");
  if (cols == 0) throw ShapeError("row_max over empty axis");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out(out_shape, 0.0);
  std::vector<std::size_t> arg(rows, 0);
  const Tensor& x = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (x[r * cols + c] > x[r * cols + best]) best = c;
    arg[r] = best;
    out[r] = x[r * cols + best];
  }
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, cols, arg = std::move(arg)](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t r = 0; r < arg.size(); ++r) (*d)[r * cols + arg[r]] += g[r];
  });
}

/// out[i] = a[index[i]] for a rank-1 tensor a.
inline Var gather(Var a, const std::vector<std::size_t>& index) {
  if (a.value().rank() != 1) throw ShapeError("gather expects a rank-1 tensor");
  const Tensor& x = a.value();
  Tensor out(Shape{index.size()}, 0.0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) throw ShapeError("gather index out of range");
    out[i] = x[index[i]];
  }
  const NodeId ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, index](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < index.size(); ++i) (*d)[index[i]] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [M, K] x [K, N] -> [M, N]
inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  const std::size_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor C(Shape{M, N}, 0.0);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = A[i * K + k];
      for (std::size_t j = 0; j < N; ++j) C[i * N + j] += aik * B[k * N + j];
    }
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(std::move(C), {ia, ib}, [ia, ib, M, K, N](Tape& t, const Tensor& G) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (Tensor* dA = t.grad_buffer(ia))
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < N; ++j) s += G[i * N + j] * B[k * N + j];
          (*dA)[i * K + k] += s;
        }
    if (Tensor* dB = t.grad_buffer(ib))
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double aik = A[i * K + k];
          for (std::size_t j = 0; j < N; ++j) (*dB)[k * N + j] += aik * G[i * N + j];
        }
  });
}

/// [M, K] x [N, K]^T -> [M, N]; the layout of a dense layer with weight [out, in].
inline Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
    throw ShapeError("matmul_nt: incompatible shapes " + shape_string(A.shape()) + " x " +
                     shape_string(B.shape()) + "^T");
  const std::size_t M = A.dim(0), K = A.dim(1), N = B.dim(0);
  Tensor C(Shape{M, N}, 0.0);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += A[i * K + k] * B[j * K + k];
      C[i * N + j] = s;
    }
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(std::move(C), {ia, ib}, [ia, ib, M, K, N](Tape& t, const Tensor& G) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (Tensor* dA = t.grad_buffer(ia))
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          const double gij = G[i * N + j];
          for (std::size_t k = 0; k < K; ++k) (*dA)[i * K + k] += gij * B[j * K + k];
        }
    if (Tensor* dB = t.grad_buffer(ib))
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          const double gij = G[i * N + j];
          for (std::size_t k = 0; k < K; ++k) (*dB)[j * K + k] += gij * A[i * K + k];
        }
  });
}

/// Adds a bias vector [N] to every row of a [B, N] tensor.
inline Var add_bias(Var a, Var bias) {
  const auto [rows, cols] = as_rows(a.value(), "add_bias");
  if (bias.value().rank() != 1 || bias.value().size() != cols)
    throw ShapeError("add_bias: bias shape " + shape_string(bias.shape()) + " does not match rows of width " +
                     std::to_string(cols));
  Tensor out = a.value();
  const Tensor& b = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
  const NodeId ia = a.id(), ib = bias.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, rows, cols](Tape& t, const Tensor& g) {
    if (Tensor* d = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
    if (Tensor* d = t.grad_buffer(ib))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*d)[c] += g[r * cols + c];
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations (over the last axis)

inline Var softmax(Var a) {
  const auto [rows, cols] = as_rows(a.value(), "softmax");
  if (cols == 0) throw ShapeError("softmax of empty input");
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  const NodeId ia = a.id();
  const NodeId io = a.tape().size();
  return a.tape().record(std::move(out), {ia}, [ia, io, rows, cols](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(io);
    Tensor* d = t.grad_buffer(ia);
    if (!d) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) (*d)[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

inline Var log_softmax(Var a) {
  const auto [rows, cols] = as_rows(a.value(), "log_softmax");
  if (cols == 0) throw ShapeError("log_softmax of empty input");
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (double& v : row) v -= lse;
  }
  const NodeId ia = a.id();
  const NodeId io = a.tape().size();
  return a.tape().record(std::move(out), {ia}, [ia, io, rows, cols](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(io);
    Tensor* d = t.grad_buffer(ia);
    if (!d) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) (*d)[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * gs;
    }
  });
}

/// Scales each row to unit Euclidean norm. Rows with norm <= kNormEpsilon
/// raise DegenerateVectorError.
inline Var l2_normalize(Var a) {
  const auto [rows, cols] = as_rows(a.value(), "l2_normalize");
  Tensor out = a.value();
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double n = std::sqrt(ss);
    if (!(n > kNormEpsilon)) throw DegenerateVectorError("l2_normalize: vector norm " + std::to_string(n) + " is below epsilon");
    norms[r] = n;
    for (double& v : row) v /= n;
  }
  const NodeId ia = a.id();
  const NodeId io = a.tape().size();
  return a.tape().record(std::move(out), {ia}, [ia, io, cols, norms = std::move(norms)](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(io);
    Tensor* d = t.grad_buffer(ia);
    if (!d) return;
    for (std::size_t r = 0; r < norms.size(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        (*d)[r * cols + c] += (g[r * cols + c] - y[r * cols + c] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Operator sugar

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Tensor-level conveniences that run on a throwaway tape.

inline Tensor softmax(const Tensor& logits) {
  Tape t;
  return softmax(t.constant(logits)).value();
}

inline Tensor l2_normalize(const Tensor& v) {
  Tape t;
  return l2_normalize(t.constant(v)).value();
}

}  // namespace sure
