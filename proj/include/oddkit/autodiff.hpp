#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "oddkit/gemm.hpp"
#include "oddkit/tensor.hpp"

namespace oddkit {

// Reverse-mode differentiation over a dynamically recorded DAG. Every
// operation creates one node holding the result tensor, handles to its
// parents, and a closure that pushes the node's gradient into them. A node
// graph is owned by its final handle (usually the loss), so dropping that
// handle frees the whole recording.

/// Thread-local switch; inference paths disable recording via NoGradGuard.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Var;

template <typename T>
struct VarNode {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily; same shape as value when present
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  std::function<void(const Tensor<T>&)> backprop;  // arg: this node's gradient

  void ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
    else grad.fill(T(0));
  }
};

/// Shared handle to one node of a computation record.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<VarNode<T>> n) : n_(std::move(n)) {}

  static Var leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<VarNode<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->value.shape; }
  std::int64_t size() const { return n_->value.size(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  Tensor<T>& value() { return n_->value; }
  const Tensor<T>& value() const { return n_->value; }

  /// Gradient of the last backward() pass through this node.
  const Tensor<T>& grad() const {
    if (n_->grad.shape != n_->value.shape)
      throw ValidationError("gradient not computed for this node");
    return n_->grad;
  }

  VarNode<T>* node() const { return n_.get(); }
  const std::shared_ptr<VarNode<T>>& handle() const { return n_; }

 private:
  std::shared_ptr<VarNode<T>> n_;
};

template <typename T>
Var<T> variable(Tensor<T> value, bool requires_grad = false) {
  return Var<T>::leaf(std::move(value), requires_grad);
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>::leaf(std::move(value), false);
}

namespace detail {

template <typename T, typename... Vs>
bool recording(const Vs&... vs) {
  return grad_mode() && (vs.requires_grad() || ...);
}

/// Wires up a new node. The backprop closure is only retained when recording.
template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(const Tensor<T>&)> backprop) {
  auto n = std::make_shared<VarNode<T>>();
  n->value = std::move(value);
  bool rec = grad_mode();
  if (rec) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    rec = any;
  }
  if (rec) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Var<T>(std::move(n));
}

template <typename T>
T* grad_of(const Var<T>& v) {
  return v.requires_grad() ? v.node()->grad.data() : nullptr;
}

}  // namespace detail

/// Public hook for composite modules that need a custom derivative.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(const Tensor<T>&)> backprop) {
  return detail::make_node<T>(std::move(value), std::move(parents), std::move(backprop));
}

/// Reverse-mode sweep from a scalar. Gradients of every node reachable from
/// `loss` (and requiring grad) are freshly computed; leaves keep theirs until
/// the next backward touches them.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss.size() != 1) throw ValidationError("backward requires a scalar loss");
  std::vector<VarNode<T>*> order;
  std::unordered_set<VarNode<T>*> seen;
  // iterative post-order: parents land before children
  std::vector<std::pair<VarNode<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      VarNode<T>* p = node->parents[next++].node();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order)
    if (n->requires_grad) n->ensure_grad();
  loss.node()->grad.v[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop((*it)->grad);
}

/// Named trainable tensors. Paths are unique; every entry requires grad.
template <typename T>
struct ParamSet {
  std::map<std::string, Var<T>> params;

  Var<T>& add(const std::string& path, Tensor<T> value) {
    if (params.count(path)) throw ValidationError("duplicate parameter path " + path);
    return params.emplace(path, Var<T>::leaf(std::move(value), true)).first->second;
  }
  Var<T>& at(const std::string& path) {
    auto it = params.find(path);
    if (it == params.end()) throw ValidationError("unknown parameter path " + path);
    return it->second;
  }
  const Var<T>& at(const std::string& path) const {
    auto it = params.find(path);
    if (it == params.end()) throw ValidationError("unknown parameter path " + path);
    return it->second;
  }
  bool contains(const std::string& path) const { return params.count(path) != 0; }
  std::size_t size() const { return params.size(); }

  void zero_grad() {
    for (auto& [path, p] : params) p.node()->ensure_grad();
  }
};

/// Spec'd entry point: zeroes every parameter gradient first, so parameters
/// the loss never touched report an exact zero gradient.
template <typename T>
void backward(const Var<T>& loss, ParamSet<T>& params) {
  params.zero_grad();
  backward(loss);
}

// ---- elementwise ----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_node<T>(std::move(out), {a, b}, [a, b, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
    if (T* gb = detail::grad_of(b))
      for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_node<T>(std::move(out), {a, b}, [a, b, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
    if (T* gb = detail::grad_of(b))
      for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_node<T>(std::move(out), {a, b}, [a, b, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * b.value()[i];
    if (T* gb = detail::grad_of(b))
      for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * a.value()[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double c) {
  Tensor<T> out(a.shape());
  const std::int64_t n = out.size();
  const T cc = static_cast<T>(c);
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * cc;
  return detail::make_node<T>(std::move(out), {a}, [a, cc, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * cc;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double c) {
  Tensor<T> out(a.shape());
  const std::int64_t n = out.size();
  const T cc = static_cast<T>(c);
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] + cc;
  return detail::make_node<T>(std::move(out), {a}, [a, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = std::exp(a.value()[i]);
  auto cache = std::make_shared<Tensor<T>>(out);
  return detail::make_node<T>(std::move(out), {a}, [a, cache, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * (*cache)[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
  return detail::make_node<T>(std::move(out), {a}, [a, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += a.value()[i] > T(0) ? g[i] : T(0);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-a.value()[i]));
  auto cache = std::make_shared<Tensor<T>>(out);
  return detail::make_node<T>(std::move(out), {a}, [a, cache, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) {
        T y = (*cache)[i];
        ga[i] += g[i] * y * (T(1) - y);
      }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::int64_t n = out.size();
  return detail::make_node<T>(std::move(out), {a}, [a, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
  });
}

/// Collapses all trailing dimensions: [B, ...] -> [B, rest].
template <typename T>
Var<T> flatten_rows(const Var<T>& a) {
  std::int64_t b = a.shape().at(0);
  return reshape(a, Shape{b, a.size() / b});
}

// ---- reductions -----------------------------------------------------------

template <typename T>
Var<T> row_sum(const Var<T>& a) {
  if (a.shape().size() != 2) throw ShapeError("row_sum expects rank-2 input, got " + shape_str(a.shape()));
  const std::int64_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> out({m});
  for (std::int64_t i = 0; i < m; ++i) {
    T s = T(0);
    const T* row = a.value().data() + i * n;
    for (std::int64_t j = 0; j < n; ++j) s += row[j];
    out[i] = s;
  }
  return detail::make_node<T>(std::move(out), {a}, [a, m, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  const std::int64_t n = a.size();
  T s = T(0);
  for (std::int64_t i = 0; i < n; ++i) s += a.value()[i];
  return detail::make_node<T>(Tensor<T>::scalar(s), {a}, [a, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[0];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// ---- linear algebra -------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out({m, n});
  gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  return detail::make_node<T>(std::move(out), {a, b}, [a, b, m, k, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a)) {
      // dA += g * B^T
      std::vector<T> tmp(static_cast<std::size_t>(m * k));
      std::vector<T> scratch;
      gemm_nt(m, n, k, g.data(), b.value().data(), tmp.data(), scratch);
      for (std::int64_t i = 0; i < m * k; ++i) ga[i] += tmp[i];
    }
    if (T* gb = detail::grad_of(b)) gemm_tn_acc(m, k, n, a.value().data(), g.data(), gb);
  });
}

/// y[m,n] = a[m,k] * b[n,k]^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  Tensor<T> out({m, n});
  std::vector<T> scratch;
  gemm_nt(m, k, n, a.value().data(), b.value().data(), out.data(), scratch);
  return detail::make_node<T>(std::move(out), {a, b}, [a, b, m, k, n](const Tensor<T>& g) {
    if (T* ga = detail::grad_of(a)) gemm_nn_acc(m, n, k, g.data(), b.value().data(), ga);
    if (T* gb = detail::grad_of(b)) gemm_tn_acc(m, n, k, g.data(), a.value().data(), gb);
  });
}

/// Affine map y = x w + b for x[B,I], w[I,O], b[O].
template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[0])
    throw ShapeError("dense: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  if (b.shape().size() != 1 || b.shape()[0] != w.shape()[1])
    throw ShapeError("dense: bias " + shape_str(b.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  const std::int64_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  Tensor<T> out({m, n});
  gemm_nn(m, k, n, x.value().data(), w.value().data(), out.data());
  for (std::int64_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    const T* bias = b.value().data();
    for (std::int64_t j = 0; j < n; ++j) row[j] += bias[j];
  }
  return detail::make_node<T>(std::move(out), {x, w, b}, [x, w, b, m, k, n](const Tensor<T>& g) {
    if (T* gx = detail::grad_of(x)) {
      std::vector<T> tmp(static_cast<std::size_t>(m * k));
      std::vector<T> scratch;
      gemm_nt(m, n, k, g.data(), w.value().data(), tmp.data(), scratch);
      for (std::int64_t i = 0; i < m * k; ++i) gx[i] += tmp[i];
    }
    if (T* gw = detail::grad_of(w)) gemm_tn_acc(m, k, n, x.value().data(), g.data(), gw);
    if (T* gb = detail::grad_of(b))
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
  });
}

/// x[..., C] + b[C], broadcast over leading dimensions.
template <typename T>
Var<T> bias_add(const Var<T>& x, const Var<T>& b) {
  if (b.shape().size() != 1 || x.shape().empty() || x.shape().back() != b.shape()[0])
    throw ShapeError("bias_add: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  const std::int64_t c = b.shape()[0];
  const std::int64_t rows = x.size() / c;
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < rows; ++i) {
    const T* src = x.value().data() + i * c;
    const T* bias = b.value().data();
    T* dst = out.data() + i * c;
    for (std::int64_t j = 0; j < c; ++j) dst[j] = src[j] + bias[j];
  }
  return detail::make_node<T>(std::move(out), {x, b}, [x, b, rows, c](const Tensor<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::int64_t i = 0; i < rows * c; ++i) gx[i] += g[i];
    if (T* gb = detail::grad_of(b))
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
  });
}

// ---- row-wise nonlinearities ---------------------------------------------

/// Numerically stable softmax along the last dimension of a rank-2 tensor.
template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  if (a.shape().size() != 2) throw ShapeError("softmax expects rank-2 input, got " + shape_str(a.shape()));
  const std::int64_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> out({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const T* row = a.value().data() + i * n;
    T* dst = out.data() + i * n;
    T mx = row[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::int64_t j = 0; j < n; ++j) {
      dst[j] = std::exp(row[j] - mx);
      sum += dst[j];
    }
    for (std::int64_t j = 0; j < n; ++j) dst[j] /= sum;
  }
  auto cache = std::make_shared<Tensor<T>>(out);
  return detail::make_node<T>(std::move(out), {a}, [a, cache, m, n](const Tensor<T>& g) {
    T* ga = detail::grad_of(a);
    if (!ga) return;
    for (std::int64_t i = 0; i < m; ++i) {
      const T* y = cache->data() + i * n;
      const T* gy = g.data() + i * n;
      T dot = T(0);
      for (std::int64_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

/// Rows scaled to unit L2 norm. A zero row is outside the domain.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a) {
  if (a.shape().size() != 2)
    throw ShapeError("l2_normalize expects rank-2 input, got " + shape_str(a.shape()));
  const std::int64_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> out({m, n});
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    const T* row = a.value().data() + i * n;
    T s = T(0);
    for (std::int64_t j = 0; j < n; ++j) s += row[j] * row[j];
    T norm = std::sqrt(s);
    if (!(norm > T(0)))
      throw NumericError("l2_normalize: row " + std::to_string(i) + " has zero norm");
    (*norms)[i] = norm;
    T* dst = out.data() + i * n;
    for (std::int64_t j = 0; j < n; ++j) dst[j] = row[j] / norm;
  }
  auto cache = std::make_shared<Tensor<T>>(out);
  return detail::make_node<T>(std::move(out), {a}, [a, cache, norms, m, n](const Tensor<T>& g) {
    T* ga = detail::grad_of(a);
    if (!ga) return;
    for (std::int64_t i = 0; i < m; ++i) {
      const T* y = cache->data() + i * n;
      const T* gy = g.data() + i * n;
      T dot = T(0);
      for (std::int64_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      T inv = T(1) / (*norms)[i];
      for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += (gy[j] - y[j] * dot) * inv;
    }
  });
}

/// All pairwise cosine similarities: a[p,C], b[q,C] -> [p,q], entries in [-1,1].
template <typename T>
Var<T> cosine_matrix(const Var<T>& a, const Var<T>& b) {
  return matmul_nt(l2_normalize_rows(a), l2_normalize_rows(b));
}

/// Cosine similarity of two vectors, as a 1-element tensor.
template <typename T>
Var<T> cosine_sim(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 1 || b.shape().size() != 1)
    throw ShapeError("cosine_sim expects two vectors");
  check_same_shape(a.shape(), b.shape(), "cosine_sim");
  std::int64_t c = a.shape()[0];
  return reshape(cosine_matrix(reshape(a, {1, c}), reshape(b, {1, c})), {1});
}

}  // namespace oddkit
