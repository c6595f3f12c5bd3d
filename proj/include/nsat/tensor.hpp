#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nsat/errors.hpp"

namespace nsat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buf() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Dense row-major tensor of doubles participating in reverse-mode
// differentiation. A Tensor is a value-semantic handle onto a graph node;
// values are immutable once an op has consumed them (gradient buffers and
// leaf updates via mutable_value() are the exceptions).
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, 0.0);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, v);
  }

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  // 2-D convenience: rows given as nested initializer lists.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return from({r, c}, std::move(data), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }

  std::size_t rows() const { return dim2(0); }
  std::size_t cols() const { return dim2(1); }

  const std::vector<double>& value() const { return node_->value; }

  // Leaf initialisation and optimizer updates only; calling this on a tensor
  // that is already a parent in a live graph invalidates that graph.
  std::vector<double>& mutable_value() { return node_->value; }

  double item() const {
    if (numel() != 1)
      throw ContractError("item() requires a scalar tensor, got shape " +
                          shape_str(shape()));
    return node_->value[0];
  }

  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const {
    return node_->value.at(r * cols() + c);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad())
      throw StateError("gradient not available; call backward() first");
    return node_->grad;
  }

  void zero_grad() { node_->grad.clear(); }

  // Reverse-mode pass from a scalar. Gradients accumulate into every
  // reachable node with requires_grad set.
  void backward() const {
    if (numel() != 1)
      throw ContractError("backward() requires a scalar root, got shape " +
                          shape_str(shape()));
    std::vector<detail::Node*> order;
    topo_sort(node_.get(), order);
    node_->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
    }
  }

  // Same values, no history: gradient flow stops here.
  Tensor detached() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  detail::NodePtr node() const { return node_; }

  static Tensor wrap(detail::NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad, double fill) {
    Tensor t;
    std::size_t n = shape_numel(shape);
    t.node_->shape = std::move(shape);
    if (data.empty())
      t.node_->value.assign(n, fill);
    else
      t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  std::size_t dim2(std::size_t i) const {
    if (rank() != 2)
      throw ContractError("rank-2 accessor on tensor of shape " +
                          shape_str(shape()));
    return node_->shape[i];
  }

  static void topo_sort(detail::Node* root, std::vector<detail::Node*>& order) {
    std::unordered_set<detail::Node*> seen;
    struct Frame {
      detail::Node* n;
      std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        detail::Node* p = f.n->parents[f.next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  detail::NodePtr node_;
};

namespace detail {

// Extension point for fused ops in other headers: builds a graph node with a
// custom backward closure. The closure must accumulate into parents' grad
// buffers (guarding on each parent's requires_grad).
inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<NodePtr> parents,
                      std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
}

// --- shared raw kernels (also used by the fused attention path) ---

// C[m×n] += or = A[m×k] · B[k×n]
inline void kernel_matmul(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n,
                          bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×n] += or = A[m×k] · B[n×k]^T
inline void kernel_matmul_nt(const double* a, const double* b, double* c,
                             std::size_t m, std::size_t k, std::size_t n,
                             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

// C[m×n] += A[k×m]^T · B[k×n]
inline void kernel_matmul_tn_acc(const double* a, const double* b, double* c,
                                 std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Row-wise softmax with max subtraction.
inline void kernel_softmax_rows(const double* x, double* y, std::size_t rows,
                                std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = x + i * cols;
    double* yi = y + i * cols;
    double mx = xi[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    double inv = 1.0 / sum;
    for (std::size_t j = 0; j < cols; ++j) yi[j] *= inv;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(v), {pa, pb},
                         [pa, pb](detail::Node& n) {
                           if (pa->requires_grad) {
                             auto& g = pa->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                           }
                           if (pb->requires_grad) {
                             auto& g = pb->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                           }
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(v), {pa, pb},
                         [pa, pb](detail::Node& n) {
                           if (pa->requires_grad) {
                             auto& g = pa->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                           }
                           if (pb->requires_grad) {
                             auto& g = pb->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
                           }
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(v), {pa, pb},
                         [pa, pb](detail::Node& n) {
                           if (pa->requires_grad) {
                             auto& g = pa->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += n.grad[i] * pb->value[i];
                           }
                           if (pb->requires_grad) {
                             auto& g = pb->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += n.grad[i] * pa->value[i];
                           }
                         });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * s;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(v), {pa},
                         [pa, s](detail::Node& n) {
                           auto& g = pa->grad_buf();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
                         });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + s;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(v), {pa},
                         [pa](detail::Node& n) {
                           auto& g = pa->grad_buf();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                         });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> v(m * n);
  detail::kernel_matmul(a.value().data(), b.value().data(), v.data(), m, k, n,
                        false);
  auto pa = a.node(), pb = b.node();
  return detail::make_op(
      {m, n}, std::move(v), {pa, pb}, [pa, pb, m, k, n](detail::Node& node) {
        // dA += dC · B^T ; dB += A^T · dC
        if (pa->requires_grad)
          detail::kernel_matmul_nt(node.grad.data(), pb->value.data(),
                                   pa->grad_buf().data(), m, n, k, true);
        if (pb->requires_grad)
          detail::kernel_matmul_tn_acc(pa->value.data(), node.grad.data(),
                                       pb->grad_buf().data(), k, m, n);
      });
}

// a · b^T without materializing the transpose; used for Gram matrices.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    throw DimensionError("matmul_nt: incompatible shapes " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> v(m * n);
  detail::kernel_matmul_nt(a.value().data(), b.value().data(), v.data(), m, k,
                           n, false);
  auto pa = a.node(), pb = b.node();
  return detail::make_op(
      {m, n}, std::move(v), {pa, pb}, [pa, pb, m, k, n](detail::Node& node) {
        // C = A·B^T : dA += dC · B ; dB += dC^T · A
        if (pa->requires_grad)
          detail::kernel_matmul(node.grad.data(), pb->value.data(),
                                pa->grad_buf().data(), m, n, k, true);
        if (pb->requires_grad)
          detail::kernel_matmul_tn_acc(node.grad.data(), pa->value.data(),
                                       pb->grad_buf().data(), n, m, k);
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw DimensionError("transpose: rank-2 required, got " +
                         shape_str(a.shape()));
  std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = a.value()[i * n + j];
  auto pa = a.node();
  return detail::make_op({n, m}, std::move(v), {pa},
                         [pa, m, n](detail::Node& node) {
                           auto& g = pa->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j)
                               g[i * n + j] += node.grad[j * m + i];
                         });
}

// ---------------------------------------------------------------------------
// softmax and activations
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2)
    throw DimensionError("softmax_rows: rank-2 required, got " +
                         shape_str(x.shape()));
  for (double v : x.value())
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
  std::size_t m = x.rows(), n = x.cols();
  std::vector<double> y(m * n);
  detail::kernel_softmax_rows(x.value().data(), y.data(), m, n);
  auto px = x.node();
  std::vector<double> saved = y;
  return detail::make_op(
      x.shape(), std::move(y), {px},
      [px, m, n, s = std::move(saved)](detail::Node& node) {
        auto& g = px->grad_buf();
        for (std::size_t i = 0; i < m; ++i) {
          const double* si = s.data() + i * n;
          const double* gi = node.grad.data() + i * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gi[j] * si[j];
          double* go = g.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) go[j] += si[j] * (gi[j] - dot);
        }
      });
}

namespace detail {

template <class F, class DF>
Tensor unary_op(const Tensor& x, F f, DF df) {
  std::vector<double> v(x.numel());
  std::vector<double> d(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = f(x.value()[i]);
    d[i] = df(x.value()[i]);
  }
  auto px = x.node();
  return make_op(x.shape(), std::move(v), {px},
                 [px, d = std::move(d)](Node& n) {
                   auto& g = px->grad_buf();
                   for (std::size_t i = 0; i < g.size(); ++i)
                     g[i] += n.grad[i] * d[i];
                 });
}

}  // namespace detail

// Slope 1 is used at exactly 0 so the choice is deterministic.
inline Tensor leaky_relu(const Tensor& x, double alpha) {
  return detail::unary_op(
      x, [alpha](double v) { return v >= 0.0 ? v : alpha * v; },
      [alpha](double v) { return v >= 0.0 ? 1.0 : alpha; });
}

inline Tensor elu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v >= 0.0 ? v : std::expm1(v); },
      [](double v) { return v >= 0.0 ? 1.0 : std::exp(v); });
}

inline Tensor sigmoid(const Tensor& x) {
  auto sig = [](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                    : std::exp(v) / (1.0 + std::exp(v));
  };
  return detail::unary_op(x, sig, [sig](double v) {
    double s = sig(v);
    return s * (1.0 - s);
  });
}

enum class Activation { Elu, LeakyRelu, Sigmoid };

inline Tensor apply_activation(const Tensor& x, Activation a,
                               double leaky_alpha = 0.1) {
  switch (a) {
    case Activation::Elu: return elu(x);
    case Activation::LeakyRelu: return leaky_relu(x, leaky_alpha);
    case Activation::Sigmoid: return sigmoid(x);
  }
  throw ContractError("unknown activation");
}

// ---------------------------------------------------------------------------
// reductions and broadcasting helpers
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  double s = std::accumulate(x.value().begin(), x.value().end(), 0.0);
  auto px = x.node();
  return detail::make_op({1}, {s}, {px}, [px](detail::Node& n) {
    auto& g = px->grad_buf();
    for (double& gi : g) gi += n.grad[0];
  });
}

inline Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw EmptySetError("mean of an empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// x: [m×n], bias: length n (or [1×n]); adds bias to every row.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n)
    throw DimensionError("add_row_bias: bias length " +
                         std::to_string(bias.numel()) + " vs cols " +
                         std::to_string(n));
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      v[i * n + j] = x.value()[i * n + j] + bias.value()[j];
  auto px = x.node(), pb = bias.node();
  return detail::make_op(x.shape(), std::move(v), {px, pb},
                         [px, pb, m, n](detail::Node& node) {
                           if (px->requires_grad) {
                             auto& g = px->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += node.grad[i];
                           }
                           if (pb->requires_grad) {
                             auto& g = pb->grad_buf();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 g[j] += node.grad[i * n + j];
                           }
                         });
}

// ---------------------------------------------------------------------------
// row/column structure ops
// ---------------------------------------------------------------------------

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  std::size_t m = x.rows(), n = x.cols();
  if (c0 > c1 || c1 > n) throw DimensionError("slice_cols: bad range");
  std::size_t w = c1 - c0;
  std::vector<double> v(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) v[i * w + j] = x.value()[i * n + c0 + j];
  auto px = x.node();
  return detail::make_op({m, w}, std::move(v), {px},
                         [px, m, n, w, c0](detail::Node& node) {
                           auto& g = px->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < w; ++j)
                               g[i * n + c0 + j] += node.grad[i * w + j];
                         });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row mismatch");
    n += p.cols();
  }
  std::vector<double> v(m * n);
  std::vector<detail::NodePtr> parents;
  std::vector<std::size_t> offs;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j)
        v[i * n + off + j] = p.value()[i * w + j];
    parents.push_back(p.node());
    offs.push_back(off);
    off += w;
  }
  return detail::make_op(
      {m, n}, std::move(v), parents,
      [parents, offs, m, n](detail::Node& node) {
        for (std::size_t k = 0; k < parents.size(); ++k) {
          auto& p = parents[k];
          if (!p->requires_grad) continue;
          std::size_t w = p->shape[1];
          auto& g = p->grad_buf();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              g[i * w + j] += node.grad[i * n + offs[k] + j];
        }
      });
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_cols(std::span<const Tensor>(v));
}

// out[:, j] = x[:, perm[j]] — a pure column permutation.
inline Tensor permute_cols(const Tensor& x, const std::vector<std::size_t>& perm) {
  std::size_t m = x.rows(), n = x.cols();
  if (perm.size() != n) throw DimensionError("permute_cols: perm size mismatch");
  std::vector<double> v(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = x.value()[i * n + perm[j]];
  auto px = x.node();
  return detail::make_op({m, n}, std::move(v), {px},
                         [px, perm, m, n](detail::Node& node) {
                           auto& g = px->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j)
                               g[i * n + perm[j]] += node.grad[i * n + j];
                         });
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t count) {
  std::size_t m = x.rows(), n = x.cols();
  if (r0 + count > m) throw DimensionError("slice_rows: bad range");
  std::vector<double> v(x.value().begin() + r0 * n,
                        x.value().begin() + (r0 + count) * n);
  auto px = x.node();
  return detail::make_op({count, n}, std::move(v), {px},
                         [px, r0, count, n](detail::Node& node) {
                           auto& g = px->grad_buf();
                           for (std::size_t i = 0; i < count * n; ++i)
                             g[r0 * n + i] += node.grad[i];
                         });
}

// Row-ranges of valid (non-padded) set elements inside a stacked matrix.
// Spans are disjoint and ascending; rows outside every span are padding.
struct RowSpans {
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (offset, count)
  std::size_t total_rows = 0;

  static RowSpans whole(std::size_t rows) {
    return RowSpans{{{0, rows}}, rows};
  }
  std::size_t valid_rows() const {
    std::size_t s = 0;
    for (auto& [o, c] : spans) s += c;
    return s;
  }
  bool padded() const { return valid_rows() != total_rows; }
  std::vector<std::uint8_t> validity_mask() const {
    std::vector<std::uint8_t> v(total_rows, 0);
    for (auto& [o, c] : spans)
      for (std::size_t i = 0; i < c; ++i) v[o + i] = 1;
    return v;
  }
};

// Places parts[k] at spans[k]; rows outside any span are zero and receive
// no gradient.
inline Tensor scatter_rows(std::span<const Tensor> parts, const RowSpans& rs,
                           std::size_t cols) {
  if (parts.size() != rs.spans.size())
    throw ContractError("scatter_rows: part/span count mismatch");
  std::vector<double> v(rs.total_rows * cols, 0.0);
  std::vector<detail::NodePtr> parents;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto [off, cnt] = rs.spans[k];
    if (parts[k].rows() != cnt || parts[k].cols() != cols)
      throw DimensionError("scatter_rows: part shape mismatch");
    std::copy(parts[k].value().begin(), parts[k].value().end(),
              v.begin() + off * cols);
    parents.push_back(parts[k].node());
  }
  auto spans = rs.spans;
  return detail::make_op(
      {rs.total_rows, cols}, std::move(v), parents,
      [parents, spans, cols](detail::Node& node) {
        for (std::size_t k = 0; k < parents.size(); ++k) {
          auto& p = parents[k];
          if (!p->requires_grad) continue;
          auto [off, cnt] = spans[k];
          auto& g = p->grad_buf();
          for (std::size_t i = 0; i < cnt * cols; ++i)
            g[i] += node.grad[off * cols + i];
        }
      });
}

}  // namespace nsat
