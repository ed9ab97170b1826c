#pragma once

// Dense tensors with a reverse-mode differentiation graph.
//
// A Tensor is a cheap handle onto a shared Node. Ops allocate a fresh Node
// for their result and, when gradients are being recorded and at least one
// input requires them, remember their inputs plus a closure that pushes the
// output gradient back into those inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mtlid {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class MaskError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Uniform double in [0, 1) built from the top 53 bits; unlike
/// std::uniform_real_distribution the sequence is identical across
/// standard libraries.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<T>& ensure_grad() {
    if (!has_grad) {
      grad.assign(data.size(), T{0});
      has_grad = true;
    }
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (mtlid::numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = mtlid::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = mtlid::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }

  std::span<const T> data() const { return node_->data; }
  std::span<T> data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad() { return node_->grad; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto v : index) flat = flat * node_->shape.at(i++) + v;
    return node_->data.at(flat);
  }

  /// Resets the accumulated gradient to zeros; the buffer stays allocated.
  void zero_grad() {
    if (node_->has_grad) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }

  /// Value copy without graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  void backward() const;

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_mode()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>::from_node(std::move(node));
}

// C[m x p] += A[m x k] * B[k x p]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * p;
    const T* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      if (av == T{0}) continue;
      const T* brow = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x p] * B[k x p]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t p, std::size_t k) {
  std::vector<T> bt(p * k);
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t j = 0; j < p; ++j) bt[j * k + kk] = b[kk * p + j];
  gemm_nn(a, bt.data(), c, m, p, k);
}

// C[k x p] += A[m x k]^T * B[m x p]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      if (av == T{0}) continue;
      T* crow = c + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::size_t last_dim(const Tensor<T>& t) {
  if (t.rank() == 0) throw ShapeError("op requires rank >= 1, got scalar");
  return t.shape().back();
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Intermediate gradients are per-call; leaf gradients accumulate.
  for (auto* n : order) {
    if (!n->is_leaf()) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), T{0});
    }
  }
  node_->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., k] x b[k, p] -> [..., p]; leading dimensions of a are flattened.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0);
  const std::size_t p = b.dim(1);
  const std::size_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = p;
  std::vector<T> out(m * p, T{0});
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, p);
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
      [m, k, p](Node<T>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        if (an.requires_grad) {
          detail::gemm_nt(self.grad.data(), bn.data.data(), an.ensure_grad().data(), m, p, k);
        }
        if (bn.requires_grad) {
          detail::gemm_tn(an.data.data(), self.grad.data(), bn.ensure_grad().data(), m, k, p);
        }
      });
}

/// Batched product: a[B, m, k] x b[B, k, p] -> [B, m, p].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
  std::vector<T> out(batch * m * p, T{0});
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * p,
                    out.data() + i * m * p, m, k, p);
  }
  return detail::make_result<T>(
      {batch, m, p}, std::move(out), {a.node_ptr(), b.node_ptr()},
      [batch, m, k, p](Node<T>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        for (std::size_t i = 0; i < batch; ++i) {
          const T* g = self.grad.data() + i * m * p;
          if (an.requires_grad) {
            detail::gemm_nt(g, bn.data.data() + i * k * p, an.ensure_grad().data() + i * m * k,
                            m, p, k);
          }
          if (bn.requires_grad) {
            detail::gemm_tn(an.data.data() + i * m * k, g, bn.ensure_grad().data() + i * k * p,
                            m, k, p);
          }
        }
      });
}

/// Swaps the last two axes of a rank >= 2 tensor.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  const std::size_t outer = a.numel() / (r * c);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  std::vector<T> out(a.numel());
  const auto src = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[o * r * c + j * r + i] = src[o * r * c + i * c + j];
  return detail::make_result<T>(std::move(out_shape), std::move(out), {a.node_ptr()},
                                [outer, r, c](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < c; ++j)
                                        g[o * r * c + i * c + j] += self.grad[o * r * c + j * r + i];
                                });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                                [](Node<T>& self) {
                                  for (auto& p : self.parents) {
                                    if (!p->requires_grad) continue;
                                    auto& g = p->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

/// x[..., p] + bias[p], broadcast over the leading axes.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t p = detail::last_dim(x);
  if (bias.rank() != 1 || bias.dim(0) != p) {
    throw ShapeError("bias shape " + shape_str(bias.shape()) + " does not fit " +
                     shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  const auto bd = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + bd[i % p];
  return detail::make_result<T>(x.shape(), std::move(out), {x.node_ptr(), bias.node_ptr()},
                                [p](Node<T>& self) {
                                  auto& xn = *self.parents[0];
                                  auto& bn = *self.parents[1];
                                  if (xn.requires_grad) {
                                    auto& g = xn.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (bn.requires_grad) {
                                    auto& g = bn.ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      g[i % p] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                                [](Node<T>& self) {
                                  auto& an = *self.parents[0];
                                  auto& bn = *self.parents[1];
                                  if (an.requires_grad) {
                                    auto& g = an.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * bn.data[i];
                                  }
                                  if (bn.requires_grad) {
                                    auto& g = bn.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * an.data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr()},
                                [factor](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i] * factor;
                                });
}

/// Zeroes x wherever keep[i] is false. keep has one entry per element.
template <typename T>
Tensor<T> mask_fill_zero(const Tensor<T>& x, std::span<const std::uint8_t> keep) {
  if (keep.size() != x.numel()) {
    throw ShapeError("mask of length " + std::to_string(keep.size()) + " does not fit " +
                     shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? x.data()[i] : T{0};
  std::vector<std::uint8_t> k(keep.begin(), keep.end());
  return detail::make_result<T>(x.shape(), std::move(out), {x.node_ptr()},
                                [k = std::move(k)](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    if (k[i]) g[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> tanh_elem(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.data[i];
      g[i] += self.grad[i] * (T{1} - y * y);
    }
  });
}

/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  constexpr T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T{0.5} * x * (T{1} + std::erf(x * inv_sqrt2));
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& g = xn.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = xn.data[i];
      const T cdf = T{0.5} * (T{1} + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T{-0.5} * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

/// Inverted dropout; identity when rate is zero.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw Error("dropout rate must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factor(x.numel());
  for (auto& f : factor) f = uniform01(rng) < rate ? T{0} : keep_scale;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor[i];
  return detail::make_result<T>(x.shape(), std::move(out), {x.node_ptr()},
                                [factor = std::move(factor)](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i] * factor[i];
                                });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along the last axis restricted to positions where keep is true.
/// Masked outputs are exactly zero. keep has one entry per element.
template <typename T>
Tensor<T> softmax_masked(const Tensor<T>& scores, std::span<const std::uint8_t> keep) {
  const std::size_t n = detail::last_dim(scores);
  if (keep.size() != scores.numel()) {
    throw ShapeError("mask of length " + std::to_string(keep.size()) + " does not fit scores " +
                     shape_str(scores.shape()));
  }
  const std::size_t rows = n == 0 ? 0 : scores.numel() / n;
  std::vector<T> out(scores.numel(), T{0});
  const auto s = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t off = r * n;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (keep[off + j]) {
        mx = std::max(mx, s[off + j]);
        any = true;
      }
    }
    if (!any) throw MaskError("softmax over a fully masked row " + std::to_string(r));
    T total{0};
    for (std::size_t j = 0; j < n; ++j) {
      if (keep[off + j]) {
        out[off + j] = std::exp(s[off + j] - mx);
        total += out[off + j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) out[off + j] /= total;
  }
  return detail::make_result<T>(scores.shape(), std::move(out), {scores.node_ptr()},
                                [rows, n](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const std::size_t off = r * n;
                                    T dot{0};
                                    for (std::size_t j = 0; j < n; ++j)
                                      dot += self.grad[off + j] * self.data[off + j];
                                    for (std::size_t j = 0; j < n; ++j)
                                      g[off + j] += self.data[off + j] * (self.grad[off + j] - dot);
                                  }
                                });
}

/// Layer normalization over the last axis with learned gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = static_cast<T>(1e-5)) {
  const std::size_t n = detail::last_dim(x);
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw ShapeError("layer_norm parameters " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not fit " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t off = r * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += xd[off + j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) {
      const T d = xd[off + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[off + j] = (xd[off + j] - mean) * inv_std[r];
      out[off + j] = xhat[off + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        if (gn.requires_grad) {
          auto& g = gn.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * xhat[i];
        }
        if (bn.requires_grad) {
          auto& g = bn.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        }
        if (xn.requires_grad) {
          auto& g = xn.ensure_grad();
          const T inv_n = T{1} / static_cast<T>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * n;
            T sum_dy{0}, sum_dy_xhat{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T dy = self.grad[off + j] * gn.data[j];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat[off + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const T dy = self.grad[off + j] * gn.data[j];
              g[off + j] += inv_std[r] * (dy - inv_n * sum_dy - xhat[off + j] * inv_n * sum_dy_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {x.node_ptr()},
                                [](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

/// [a, b, c, d] -> [a, c, b, d]
template <typename T>
Tensor<T> permute_0213(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("permute_0213 needs rank 4, got " + shape_str(x.shape()));
  const std::size_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  std::vector<T> out(x.numel());
  const auto src = x.data();
  auto src_index = [=](std::size_t a, std::size_t b, std::size_t c) {
    return ((a * B + b) * C + c) * D;
  };
  auto dst_index = [=](std::size_t a, std::size_t b, std::size_t c) {
    return ((a * C + c) * B + b) * D;
  };
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(src.data() + src_index(a, b, c), D, out.data() + dst_index(a, b, c));
  return detail::make_result<T>({A, C, B, D}, std::move(out), {x.node_ptr()},
                                [=](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t a = 0; a < A; ++a)
                                    for (std::size_t b = 0; b < B; ++b)
                                      for (std::size_t c = 0; c < C; ++c) {
                                        const std::size_t s = src_index(a, b, c);
                                        const std::size_t d = dst_index(a, b, c);
                                        for (std::size_t i = 0; i < D; ++i)
                                          g[s + i] += self.grad[d + i];
                                      }
                                });
}

/// Row lookup: table[V, d] at ids -> [ids.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("token id " + std::to_string(ids[i]) + " out of range for table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return detail::make_result<T>({ids.size(), d}, std::move(out), {table.node_ptr()},
                                [d, idx = std::move(idx)](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    T* row = g.data() + static_cast<std::size_t>(idx[i]) * d;
                                    for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
                                  }
                                });
}

/// x[B, L, d] -> x[:, position, :] as [B, d].
template <typename T>
Tensor<T> select_position(const Tensor<T>& x, std::size_t position) {
  if (x.rank() != 3 || position >= x.dim(1)) {
    throw ShapeError("select_position " + std::to_string(position) + " from " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
  std::vector<T> out(B * d);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(x.data().data() + (b * L + position) * d, d, out.data() + b * d);
  return detail::make_result<T>({B, d}, std::move(out), {x.node_ptr()},
                                [=](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t j = 0; j < d; ++j)
                                      g[(b * L + position) * d + j] += self.grad[b * d + j];
                                });
}

/// Concatenation along the last axis; leading dimensions must agree.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw ShapeError("concat shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t p = a.shape().back(), q = b.shape().back();
  const std::size_t rows = p + q == 0 ? 0 : (a.numel() + b.numel()) / (p + q);
  Shape out_shape = a.shape();
  out_shape.back() = p + q;
  std::vector<T> out(rows * (p + q));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(b.data().data() + r * q, q, out.data() + r * (p + q) + p);
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                                [rows, p, q](Node<T>& self) {
                                  auto& an = *self.parents[0];
                                  auto& bn = *self.parents[1];
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* g = self.grad.data() + r * (p + q);
                                    if (an.requires_grad) {
                                      auto& ga = an.ensure_grad();
                                      for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += g[j];
                                    }
                                    if (bn.requires_grad) {
                                      auto& gb = bn.ensure_grad();
                                      for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += g[p + j];
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  return detail::make_result<T>({1}, {total}, {x.node_ptr()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || logits.dim(0) == 0) {
    throw ShapeError("cross entropy expects logits [B x c] with B = " +
                     std::to_string(labels.size()) + ", got " + shape_str(logits.shape()));
  }
  const std::size_t B = logits.dim(0), c = logits.dim(1);
  std::vector<T> probs(B * c);
  T total{0};
  const auto z = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= c) {
      throw LabelError("label " + std::to_string(labels[b]) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    const T* row = z.data() + b * c;
    const T mx = *std::max_element(row, row + c);
    T se{0};
    for (std::size_t j = 0; j < c; ++j) {
      probs[b * c + j] = std::exp(row[j] - mx);
      se += probs[b * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[b * c + j] /= se;
    total += (mx + std::log(se)) - row[labels[b]];
  }
  const T inv_b = T{1} / static_cast<T>(B);
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return detail::make_result<T>(
      {1}, {total * inv_b}, {logits.node_ptr()},
      [B, c, inv_b, probs = std::move(probs), lab = std::move(lab)](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const T up = self.grad[0] * inv_b;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t j = 0; j < c; ++j) {
            const T onehot = static_cast<std::size_t>(lab[b]) == j ? T{1} : T{0};
            g[b * c + j] += up * (probs[b * c + j] - onehot);
          }
        }
      });
}

}  // namespace mtlid
