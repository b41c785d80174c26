#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmlg/tensor.hpp"

namespace mmlg {

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  // Whether the optimizer applies decoupled weight decay to this parameter.
  bool decay = false;

  Parameter() = default;
  explicit Parameter(Tensor<T> v, bool decay_ = false)
      : value(std::move(v)), grad(Tensor<T>::zeros(value.shape())), decay(decay_) {}

  void zero_grad() { grad.fill(T(0)); }
};

// Name-addressed parameter collection. Ordered by name so iteration (and
// therefore serialization and optimizer updates) is canonical.
template <typename T>
class ParamStore {
 public:
  using Map = std::map<std::string, Parameter<T>>;

  Parameter<T>& add(const std::string& name, Tensor<T> value, bool decay = false) {
    auto [it, inserted] = params_.try_emplace(name, std::move(value), decay);
    if (!inserted) throw ValidationError("duplicate parameter name '" + name + "'");
    return it->second;
  }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t erase_prefix(const std::string& prefix) {
    return std::erase_if(params_, [&](const auto& kv) { return kv.first.rfind(prefix, 0) == 0; });
  }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool values_equal(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    auto a = params_.begin();
    auto b = other.params_.begin();
    for (; a != params_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.value != b->second.value) return false;
    }
    return true;
  }

 private:
  Map params_;
};

struct Var {
  std::size_t id = 0;
};

// Tape for reverse-mode differentiation. Nodes are appended in evaluation
// order; backward() walks them in reverse. A graph is built per step and
// discarded.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t)>;

  Var constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false});
    return Var{nodes_.size() - 1};
  }

  // Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter<T>& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    nodes_.push_back(Node{p.value, {}, nullptr, &p, true});
    Var v{nodes_.size() - 1};
    leaves_.emplace(&p, v);
    return v;
  }

  Var record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_[in.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{},
                          nullptr, needs});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient flowing into node `id` (valid inside a backward callback).
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

  Tensor<T>& grad_buffer(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  void backward(Var root) {
    if (value(root).size() != 1) {
      throw DimensionError("backward() requires a scalar root, got " +
                           shape_string(value(root).shape()));
    }
    if (!needs_grad(root)) return;
    grad_buffer(root)[0] = T(1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto& g = n.param->grad.storage();
        const auto& src = n.grad.storage();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    Parameter<T>* param;
    bool requires_grad;
  };

  // deque: references returned by value() stay valid as nodes are appended.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Var> leaves_;
};

// out = a*x + b*y, elementwise. Shared by the graph op and eager composition
// so both produce identical bits.
template <typename T>
void weighted_sum_into(std::span<T> out, T a, std::span<const T> x, T b, std::span<const T> y) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + b * y[i];
}

namespace ad {

namespace detail {

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto& d = dst.storage();
  const auto& s = src.storage();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

}  // namespace detail

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  detail::require_2d(A, "matmul");
  detail::require_2d(B, "matmul");
  if (A.cols() != B.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()));
  }
  Tensor<T> out({A.rows(), B.cols()});
  as_matrix(out).noalias() = as_matrix(A) * as_matrix(B);
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    if (g.needs_grad(a)) {
      as_matrix(g.grad_buffer(a)).noalias() += as_matrix(go) * as_matrix(g.value(b)).transpose();
    }
    if (g.needs_grad(b)) {
      as_matrix(g.grad_buffer(b)).noalias() += as_matrix(g.value(a)).transpose() * as_matrix(go);
    }
  });
}

template <typename T>
Var transpose(Graph<T>& g, Var x) {
  const auto& X = g.value(x);
  detail::require_2d(X, "transpose");
  Tensor<T> out({X.cols(), X.rows()});
  as_matrix(out) = as_matrix(X).transpose();
  return g.record(std::move(out), {x}, [x](Graph<T>& g, std::size_t self) {
    as_matrix(g.grad_buffer(x)) += as_matrix(g.grad_of(self)).transpose();
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  detail::require_same_shape(A, B, "add");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, std::size_t self) {
    if (g.needs_grad(a)) detail::accumulate(g.grad_buffer(a), g.grad_of(self));
    if (g.needs_grad(b)) detail::accumulate(g.grad_buffer(b), g.grad_of(self));
  });
}

// x[m x n] + bias[n], broadcast over rows.
template <typename T>
Var add_row(Graph<T>& g, Var x, Var bias) {
  const auto& X = g.value(x);
  const auto& b = g.value(bias);
  if (b.size() != X.cols()) {
    throw DimensionError("add_row: bias of length " + std::to_string(b.size()) +
                         " for matrix " + shape_string(X.shape()));
  }
  Tensor<T> out = X;
  const std::size_t n = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += b[c];
  return g.record(std::move(out), {x, bias}, [x, bias](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    if (g.needs_grad(x)) detail::accumulate(g.grad_buffer(x), go);
    if (g.needs_grad(bias)) {
      auto& gb = g.grad_buffer(bias);
      const std::size_t n = gb.size();
      for (std::size_t r = 0; r < go.size() / n; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += go[r * n + c];
    }
  });
}

// x[(B*T) x d] + table[T x d], the table repeated for each of the B blocks.
template <typename T>
Var add_tiled(Graph<T>& g, Var x, Var table) {
  const auto& X = g.value(x);
  const auto& P = g.value(table);
  if (P.cols() != X.cols() || X.rows() % P.rows() != 0) {
    throw DimensionError("add_tiled: " + shape_string(X.shape()) + " vs " + shape_string(P.shape()));
  }
  Tensor<T> out = X;
  const std::size_t block = P.size();
  for (std::size_t off = 0; off < out.size(); off += block)
    for (std::size_t i = 0; i < block; ++i) out[off + i] += P[i];
  return g.record(std::move(out), {x, table}, [x, table](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    if (g.needs_grad(x)) detail::accumulate(g.grad_buffer(x), go);
    if (g.needs_grad(table)) {
      auto& gp = g.grad_buffer(table);
      const std::size_t block = gp.size();
      for (std::size_t off = 0; off < go.size(); off += block)
        for (std::size_t i = 0; i < block; ++i) gp[i] += go[off + i];
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T c) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.storage()) v *= c;
  return g.record(std::move(out), {x}, [x, c](Graph<T>& g, std::size_t self) {
    auto& gx = g.grad_buffer(x);
    const auto& go = g.grad_of(self);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * go[i];
  });
}

// x * s where s is a one-element node.
template <typename T>
Var mul_scalar(Graph<T>& g, Var x, Var s) {
  const auto& S = g.value(s);
  if (S.size() != 1) throw DimensionError("mul_scalar: scale must have one element");
  const T sv = S[0];
  Tensor<T> out = g.value(x);
  for (auto& v : out.storage()) v *= sv;
  return g.record(std::move(out), {x, s}, [x, s, sv](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    if (g.needs_grad(x)) {
      auto& gx = g.grad_buffer(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += sv * go[i];
    }
    if (g.needs_grad(s)) {
      const auto& X = g.value(x);
      T acc = 0;
      for (std::size_t i = 0; i < X.size(); ++i) acc += go[i] * X[i];
      g.grad_buffer(s)[0] += acc;
    }
  });
}

// a*x + b*y with one-element coefficient nodes a and b.
template <typename T>
Var weighted_sum(Graph<T>& g, Var a, Var x, Var b, Var y) {
  const auto& X = g.value(x);
  const auto& Y = g.value(y);
  detail::require_same_shape(X, Y, "weighted_sum");
  if (g.value(a).size() != 1 || g.value(b).size() != 1) {
    throw DimensionError("weighted_sum: coefficients must have one element");
  }
  const T av = g.value(a)[0];
  const T bv = g.value(b)[0];
  Tensor<T> out(X.shape());
  weighted_sum_into<T>(out.data(), av, X.data(), bv, Y.data());
  return g.record(std::move(out), {a, x, b, y}, [a, x, b, y, av, bv](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    if (g.needs_grad(x)) {
      auto& gx = g.grad_buffer(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += av * go[i];
    }
    if (g.needs_grad(y)) {
      auto& gy = g.grad_buffer(y);
      for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += bv * go[i];
    }
    if (g.needs_grad(a)) {
      const auto& X = g.value(x);
      T acc = 0;
      for (std::size_t i = 0; i < X.size(); ++i) acc += go[i] * X[i];
      g.grad_buffer(a)[0] += acc;
    }
    if (g.needs_grad(b)) {
      const auto& Y = g.value(y);
      T acc = 0;
      for (std::size_t i = 0; i < Y.size(); ++i) acc += go[i] * Y[i];
      g.grad_buffer(b)[0] += acc;
    }
  });
}

// One element of a vector as a one-element node.
template <typename T>
Var select(Graph<T>& g, Var vec, std::size_t index) {
  const auto& V = g.value(vec);
  if (index >= V.size()) {
    throw ValidationError("select: index " + std::to_string(index) + " out of range for length " +
                          std::to_string(V.size()));
  }
  return g.record(Tensor<T>::scalar(V[index]), {vec}, [vec, index](Graph<T>& g, std::size_t self) {
    g.grad_buffer(vec)[index] += g.grad_of(self)[0];
  });
}

// exp(s) clamped to [lo, hi]; zero gradient where the clamp is active.
template <typename T>
Var exp_clamp(Graph<T>& g, Var s, T lo, T hi) {
  const auto& S = g.value(s);
  if (S.size() != 1) throw DimensionError("exp_clamp: expects one element");
  const T e = std::exp(S[0]);
  const bool active = e < lo || e > hi;
  const T v = std::clamp(e, lo, hi);
  return g.record(Tensor<T>::scalar(v), {s}, [s, e, active](Graph<T>& g, std::size_t self) {
    if (!active) g.grad_buffer(s)[0] += e * g.grad_of(self)[0];
  });
}

template <typename T>
Var gelu(Graph<T>& g, Var x) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto& X = g.value(x);
  const auto n = static_cast<Eigen::Index>(X.size());
  Eigen::Map<const Array> xa(X.data().data(), n);
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Array cdf = T(0.5) * ((xa * inv_sqrt2).erf() + T(1));
  Tensor<T> out(X.shape());
  Eigen::Map<Array>(out.data().data(), n) = xa * cdf;
  return g.record(std::move(out), {x}, [x, cdf = std::move(cdf)](Graph<T>& g, std::size_t self) {
    const auto& X = g.value(x);
    const auto n = static_cast<Eigen::Index>(X.size());
    Eigen::Map<const Array> xa(X.data().data(), n);
    Eigen::Map<const Array> go(g.grad_of(self).data().data(), n);
    Eigen::Map<Array> gx(g.grad_buffer(x).data().data(), n);
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(3.14159265358979323846));
    gx += go * (cdf + xa * (inv_sqrt2pi * (T(-0.5) * xa * xa).exp()));
  });
}

// Normalizes each row (last dimension d) to zero mean and unit variance, then
// applies gamma/beta.
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const auto& X = g.value(x);
  const auto& G = g.value(gamma);
  const auto& Bt = g.value(beta);
  const std::size_t d = X.cols();
  if (G.size() != d || Bt.size() != d) {
    throw DimensionError("layer_norm: affine length " + std::to_string(G.size()) +
                         " for feature dimension " + std::to_string(d));
  }
  const std::size_t m = X.rows();
  Tensor<T> xhat(X.shape());
  std::vector<T> inv_std(m);
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = &X[r * d];
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mean) * inv;
      xhat[r * d + c] = h;
      out[r * d + c] = h * G[c] + Bt[c];
    }
  }
  return g.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<T>& g, std::size_t self) {
                    const auto& go = g.grad_of(self);
                    const std::size_t d = xhat.cols();
                    const std::size_t m = xhat.rows();
                    if (g.needs_grad(gamma)) {
                      auto& gg = g.grad_buffer(gamma);
                      for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < d; ++c) gg[c] += go[r * d + c] * xhat[r * d + c];
                    }
                    if (g.needs_grad(beta)) {
                      auto& gb = g.grad_buffer(beta);
                      for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < d; ++c) gb[c] += go[r * d + c];
                    }
                    if (g.needs_grad(x)) {
                      const auto& G = g.value(gamma);
                      auto& gx = g.grad_buffer(x);
                      std::vector<T> dh(d);
                      for (std::size_t r = 0; r < m; ++r) {
                        T mean_dh = 0, mean_dh_h = 0;
                        for (std::size_t c = 0; c < d; ++c) {
                          dh[c] = go[r * d + c] * G[c];
                          mean_dh += dh[c];
                          mean_dh_h += dh[c] * xhat[r * d + c];
                        }
                        mean_dh /= T(d);
                        mean_dh_h /= T(d);
                        for (std::size_t c = 0; c < d; ++c) {
                          gx[r * d + c] +=
                              inv_std[r] * (dh[c] - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                      }
                    }
                  });
}

namespace detail {

template <typename T>
void softmax_row(const T* in, T* out, std::size_t n) {
  T mx = in[0];
  for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, in[c]);
  T sum = 0;
  for (std::size_t c = 0; c < n; ++c) {
    out[c] = std::exp(in[c] - mx);
    sum += out[c];
  }
  for (std::size_t c = 0; c < n; ++c) out[c] /= sum;
}

// log-softmax of one row, stabilized by the row max.
template <typename T>
void log_softmax_row(const T* in, T* out, std::size_t n) {
  T mx = in[0];
  for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, in[c]);
  T sum = 0;
  for (std::size_t c = 0; c < n; ++c) sum += std::exp(in[c] - mx);
  const T lse = std::log(sum);
  for (std::size_t c = 0; c < n; ++c) out[c] = in[c] - mx - lse;
}

}  // namespace detail

// Plain (non-graph) row softmax.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) detail::softmax_row(&x[r * n], &out[r * n], n);
  return out;
}

template <typename T>
Var softmax_rows(Graph<T>& g, Var x) {
  Tensor<T> out = softmax_rows(g.value(x));
  return g.record(std::move(out), {x}, [x](Graph<T>& g, std::size_t self) {
    const auto& y = g.value(Var{self});
    const auto& go = g.grad_of(self);
    auto& gx = g.grad_buffer(x);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += go[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (go[r * n + c] - dot);
    }
  });
}

// Checks that every row of `targets` is a probability distribution.
template <typename T>
void validate_distribution_rows(const Tensor<T>& targets, double tol = 1e-6) {
  const std::size_t n = targets.cols();
  for (std::size_t r = 0; r < targets.rows(); ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const T v = targets[r * n + c];
      if (!(v >= T(0))) {
        throw ValidationError("cross_entropy_rows: target row " + std::to_string(r) +
                              " has a negative or non-finite entry");
      }
      sum += static_cast<double>(v);
    }
    if (std::abs(sum - 1.0) > tol) {
      throw ValidationError("cross_entropy_rows: target row " + std::to_string(r) + " sums to " +
                            std::to_string(sum) + ", not 1");
    }
  }
}

// Mean over rows of -sum_j targets[i,j] * log softmax(logits)[i,j].
template <typename T>
T cross_entropy_rows(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::require_same_shape(logits, targets, "cross_entropy_rows");
  validate_distribution_rows(targets);
  const std::size_t n = logits.cols();
  const std::size_t m = logits.rows();
  std::vector<T> logp(n);
  T total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    detail::log_softmax_row(&logits[r * n], logp.data(), n);
    T row = 0;
    for (std::size_t c = 0; c < n; ++c) row -= targets[r * n + c] * logp[c];
    total += row;
  }
  return total / T(m);
}

template <typename T>
Var cross_entropy_rows(Graph<T>& g, Var logits, Tensor<T> targets) {
  const T loss = cross_entropy_rows(g.value(logits), targets);
  return g.record(Tensor<T>::scalar(loss), {logits},
                  [logits, targets = std::move(targets)](Graph<T>& g, std::size_t self) {
                    const auto& L = g.value(logits);
                    auto& gl = g.grad_buffer(logits);
                    const T go = g.grad_of(self)[0];
                    const std::size_t n = L.cols();
                    const std::size_t m = L.rows();
                    std::vector<T> p(n);
                    for (std::size_t r = 0; r < m; ++r) {
                      detail::softmax_row(&L[r * n], p.data(), n);
                      T tsum = 0;
                      for (std::size_t c = 0; c < n; ++c) tsum += targets[r * n + c];
                      for (std::size_t c = 0; c < n; ++c) {
                        gl[r * n + c] += go * (p[c] * tsum - targets[r * n + c]) / T(m);
                      }
                    }
                  });
}

// Rows of `table` selected by token id.
template <typename T>
Var embedding(Graph<T>& g, Var table, std::vector<int> ids) {
  const auto& E = g.value(table);
  detail::require_2d(E, "embedding");
  const std::size_t d = E.cols();
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= E.rows()) {
      throw ValidationError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                            std::to_string(E.rows()));
    }
    std::copy_n(&E[static_cast<std::size_t>(ids[i]) * d], d, &out[i * d]);
  }
  return g.record(std::move(out), {table}, [table, ids = std::move(ids)](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    auto& ge = g.grad_buffer(table);
    const std::size_t d = ge.cols();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) ge[static_cast<std::size_t>(ids[i]) * d + c] += go[i * d + c];
  });
}

template <typename T>
Var l2_normalize_rows(Graph<T>& g, Var x) {
  const auto& X = g.value(x);
  const std::size_t n = X.cols();
  Tensor<T> out(X.shape());
  std::vector<T> norms(X.rows());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    T ss = 0;
    for (std::size_t c = 0; c < n; ++c) ss += X[r * n + c] * X[r * n + c];
    norms[r] = std::max(std::sqrt(ss), T(1e-12));
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = X[r * n + c] / norms[r];
  }
  return g.record(std::move(out), {x}, [x, norms = std::move(norms)](Graph<T>& g, std::size_t self) {
    const auto& y = g.value(Var{self});
    const auto& go = g.grad_of(self);
    auto& gx = g.grad_buffer(x);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += go[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += (go[r * n + c] - y[r * n + c] * dot) / norms[r];
    }
  });
}

// Inserts `token` [1 x d] before each of the `blocks` row groups of x.
template <typename T>
Var prepend_rows(Graph<T>& g, Var x, Var token, std::size_t blocks) {
  const auto& X = g.value(x);
  const auto& tok = g.value(token);
  const std::size_t d = X.cols();
  if (tok.size() != d || X.rows() % blocks != 0) {
    throw DimensionError("prepend_rows: " + shape_string(X.shape()) + " with token " + shape_string(tok.shape()));
  }
  const std::size_t per = X.rows() / blocks;
  Tensor<T> out({blocks * (per + 1), d});
  for (std::size_t b = 0; b < blocks; ++b) {
    std::copy_n(&tok[0], d, &out[b * (per + 1) * d]);
    std::copy_n(&X[b * per * d], per * d, &out[(b * (per + 1) + 1) * d]);
  }
  return g.record(std::move(out), {x, token}, [x, token, blocks, per, d](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    if (g.needs_grad(token)) {
      auto& gt = g.grad_buffer(token);
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t c = 0; c < d; ++c) gt[c] += go[b * (per + 1) * d + c];
    }
    if (g.needs_grad(x)) {
      auto& gx = g.grad_buffer(x);
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t i = 0; i < per * d; ++i) gx[b * per * d + i] += go[(b * (per + 1) + 1) * d + i];
    }
  });
}

template <typename T>
Var gather_rows(Graph<T>& g, Var x, std::vector<std::size_t> rows) {
  const auto& X = g.value(x);
  const std::size_t d = X.cols();
  Tensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.rows()) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(&X[rows[i] * d], d, &out[i * d]);
  }
  return g.record(std::move(out), {x}, [x, rows = std::move(rows)](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    auto& gx = g.grad_buffer(x);
    const std::size_t d = gx.cols();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gx[rows[i] * d + c] += go[i * d + c];
  });
}

// Per-head score matrices Q_bh K_bh^T. q and k are [(B*T) x d] with heads
// laid out as contiguous column slices; the result is [(B*H*T) x T].
template <typename T>
Var attention_scores(Graph<T>& g, Var q, Var k, std::size_t batch, std::size_t heads) {
  const auto& Q = g.value(q);
  const auto& K = g.value(k);
  detail::require_same_shape(Q, K, "attention_scores");
  const std::size_t d = Q.cols();
  if (Q.rows() % batch != 0 || d % heads != 0) {
    throw DimensionError("attention_scores: " + shape_string(Q.shape()) + " not divisible by batch/heads");
  }
  const std::size_t seq = Q.rows() / batch;
  const std::size_t dh = d / heads;
  const auto n = static_cast<Eigen::Index>(seq);
  const auto w = static_cast<Eigen::Index>(dh);
  Tensor<T> out({batch * heads * seq, seq});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      detail::ConstStridedMap<T> qb(&Q[b * seq * d + h * dh], n, w, Eigen::OuterStride<>(d));
      detail::ConstStridedMap<T> kb(&K[b * seq * d + h * dh], n, w, Eigen::OuterStride<>(d));
      MatrixMap<T> ob(&out[(b * heads + h) * seq * seq], n, n);
      ob.noalias() = qb.lazyProduct(kb.transpose());
    }
  }
  return g.record(std::move(out), {q, k}, [q, k, batch, heads, seq, dh, d](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    const auto n = static_cast<Eigen::Index>(seq);
    const auto w = static_cast<Eigen::Index>(dh);
    const bool need_q = g.needs_grad(q);
    const bool need_k = g.needs_grad(k);
    T* gq = need_q ? g.grad_buffer(q).data().data() : nullptr;
    T* gk = need_k ? g.grad_buffer(k).data().data() : nullptr;
    const auto& Q = g.value(q);
    const auto& K = g.value(k);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * seq * d + h * dh;
        ConstMatrixMap<T> gb(&go[(b * heads + h) * seq * seq], n, n);
        if (need_q) {
          detail::ConstStridedMap<T> kb(&K[off], n, w, Eigen::OuterStride<>(d));
          detail::StridedMap<T>(gq + off, n, w, Eigen::OuterStride<>(d)).noalias() += gb.lazyProduct(kb);
        }
        if (need_k) {
          detail::ConstStridedMap<T> qb(&Q[off], n, w, Eigen::OuterStride<>(d));
          detail::StridedMap<T>(gk + off, n, w, Eigen::OuterStride<>(d)).noalias() += gb.transpose().lazyProduct(qb);
        }
      }
    }
  });
}

// Per-head mixing P_bh V_bh, merged back into [(B*T) x d].
template <typename T>
Var attention_mix(Graph<T>& g, Var probs, Var v, std::size_t batch, std::size_t heads) {
  const auto& P = g.value(probs);
  const auto& V = g.value(v);
  const std::size_t d = V.cols();
  const std::size_t seq = V.rows() / batch;
  if (V.rows() % batch != 0 || d % heads != 0 || P.rows() != batch * heads * seq || P.cols() != seq) {
    throw DimensionError("attention_mix: " + shape_string(P.shape()) + " with values " + shape_string(V.shape()));
  }
  const std::size_t dh = d / heads;
  const auto n = static_cast<Eigen::Index>(seq);
  const auto w = static_cast<Eigen::Index>(dh);
  Tensor<T> out(V.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * d + h * dh;
      ConstMatrixMap<T> pb(&P[(b * heads + h) * seq * seq], n, n);
      detail::ConstStridedMap<T> vb(&V[off], n, w, Eigen::OuterStride<>(d));
      detail::StridedMap<T>(&out[off], n, w, Eigen::OuterStride<>(d)).noalias() = pb.lazyProduct(vb);
    }
  }
  return g.record(std::move(out), {probs, v}, [probs, v, batch, heads, seq, dh, d](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    const auto n = static_cast<Eigen::Index>(seq);
    const auto w = static_cast<Eigen::Index>(dh);
    const bool need_p = g.needs_grad(probs);
    const bool need_v = g.needs_grad(v);
    T* gp = need_p ? g.grad_buffer(probs).data().data() : nullptr;
    T* gv = need_v ? g.grad_buffer(v).data().data() : nullptr;
    const auto& P = g.value(probs);
    const auto& V = g.value(v);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * seq * d + h * dh;
        detail::ConstStridedMap<T> gb(&go[off], n, w, Eigen::OuterStride<>(d));
        if (need_p) {
          detail::ConstStridedMap<T> vb(&V[off], n, w, Eigen::OuterStride<>(d));
          MatrixMap<T>(gp + (b * heads + h) * seq * seq, n, n).noalias() += gb.lazyProduct(vb.transpose());
        }
        if (need_v) {
          ConstMatrixMap<T> pb(&P[(b * heads + h) * seq * seq], n, n);
          detail::StridedMap<T>(gv + off, n, w, Eigen::OuterStride<>(d)).noalias() += pb.transpose().lazyProduct(gb);
        }
      }
    }
  });
}

}  // namespace ad
}  // namespace mmlg
