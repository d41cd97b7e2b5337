#pragma once

// Minimal reverse-mode automatic differentiation over row-major 2-D tensors
// of doubles. Every op records a backward closure on the result node; calling
// backward() on a scalar walks the graph in reverse topological order.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "dmml/error.hpp"

namespace dmml {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return from(rows, cols, std::vector<double>(rows * cols, 0.0));
  }

  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values,
                     bool requires_grad = false) {
    require(values.size() == rows * cols, "shape_mismatch", "tensor value count does not match shape");
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return from(rows, cols, std::move(values), true);
  }

  static Tensor scalar(double v) { return from(1, 1, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  double operator()(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  double item() const {
    require(size() == 1, "shape_mismatch", "item() on non-scalar tensor");
    return node_->value[0];
  }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::vector<double> row(std::size_t r) const {
    return {node_->value.begin() + static_cast<std::ptrdiff_t>(r * cols()),
            node_->value.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols())};
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_op(std::size_t rows, std::size_t cols, std::vector<double> value,
                      std::initializer_list<Tensor> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

inline Tensor make_op_v(std::size_t rows, std::size_t cols, std::vector<double> value,
                        const std::vector<Tensor>& parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "shape_mismatch",
          std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
              std::to_string(b.cols()) + ")");
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
inline void backward(const Tensor& loss) {
  require(loss.size() == 1, "shape_mismatch", "backward() requires a scalar");
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward_fn) n->grad.assign(n->value.size(), 0.0);
    else n->ensure_grad();
  }
  loss.node().grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

inline Tensor detach(const Tensor& a) { return Tensor::from(a.rows(), a.cols(), std::vector<double>(a.data().begin(), a.data().end())); }

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a}, [s](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

// a * s where s is a [1,1] tensor.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require(s.size() == 1, "shape_mismatch", "mul_scalar: scale must be 1x1");
  const double sv = s.item();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * sv;
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a, s}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& ps = *self.parents[1];
    const double sv = ps.value[0];
    double acc = 0.0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * sv;
      acc += self.grad[i] * pa.value[i];
    }
    if (ps.requires_grad) ps.grad[0] += acc;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + s;
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.data()[i]);
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = logistic(a.data()[i]);
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
  });
}

// Zero gradient outside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(a.data()[i], lo, hi);
  return detail::make_op(a.rows(), a.cols(), std::move(v), {a}, [lo, hi](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = p.value[i];
      if (x >= lo && x <= hi) p.grad[i] += self.grad[i];
    }
  });
}

// a[m,n] + b[1,n] broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& b) {
  require(b.rows() == 1 && b.cols() == a.cols(), "shape_mismatch", "add_row: bias width mismatch");
  const std::size_t n = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = a.data()[i * n + j] + b.data()[j];
  return detail::make_op(a.rows(), n, std::move(v), {a, b}, [n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.rows; ++i)
        for (std::size_t j = 0; j < n; ++j) pb.grad[j] += self.grad[i * n + j];
  });
}

// ---- linear algebra --------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "shape_mismatch",
          "matmul: inner dims " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> v(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), v.data(), m, k, n);
  return detail::make_op(m, n, std::move(v), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) detail::gemm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    if (pb.requires_grad) detail::gemm_tn(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
  });
}

// a[m,k] * b[n,k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "shape_mismatch", "matmul_nt: inner dims differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> v(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), v.data(), m, k, n);
  return detail::make_op(m, n, std::move(v), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) detail::gemm_nn(self.grad.data(), pb.value.data(), pa.grad.data(), m, n, k);
    if (pb.requires_grad) detail::gemm_tn(self.grad.data(), pa.value.data(), pb.grad.data(), m, n, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = a.data()[i * n + j];
  return detail::make_op(n, m, std::move(v), {a}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j * m + i];
  });
}

// y = x W + b
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_row(matmul(x, w), b);
}

// ---- reshaping -------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
  require(rows * cols == a.size(), "shape_mismatch", "reshape: element count changes");
  std::vector<double> v(a.data().begin(), a.data().end());
  return detail::make_op(rows, cols, std::move(v), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t count) {
  require(c0 + count <= a.cols(), "shape_mismatch", "slice_cols out of range");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) v[i * count + j] = a.data()[i * n + c0 + j];
  return detail::make_op(m, count, std::move(v), {a}, [m, n, c0, count](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) p.grad[i * n + c0 + j] += self.grad[i * count + j];
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t count) {
  require(r0 + count <= a.rows(), "shape_mismatch", "slice_rows out of range");
  const std::size_t n = a.cols();
  std::vector<double> v(a.data().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                        a.data().begin() + static_cast<std::ptrdiff_t>((r0 + count) * n));
  return detail::make_op(count, n, std::move(v), {a}, [r0, n](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[r0 * n + i] += self.grad[i];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "shape_mismatch", "concat_cols of nothing");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require(p.rows() == m, "shape_mismatch", "concat_cols: row counts differ");
    n += p.cols();
  }
  std::vector<double> v(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) v[i * n + off + j] = p(i, j);
    off += p.cols();
  }
  return detail::make_op_v(m, n, std::move(v), parts, [m, n](Node& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      if (p.requires_grad)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p.cols; ++j) p.grad[i * p.cols + j] += self.grad[i * n + off + j];
      off += p.cols;
    }
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "shape_mismatch", "concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require(p.cols() == n, "shape_mismatch", "concat_rows: column counts differ");
    m += p.rows();
  }
  std::vector<double> v;
  v.reserve(m * n);
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  return detail::make_op_v(m, n, std::move(v), parts, [](Node& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      if (p.requires_grad)
        for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += self.grad[off + i];
      off += p.value.size();
    }
  });
}

// ---- reductions ------------------------------------------------------------

// [m,n] -> [1,n]
inline Tensor mean_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j] += a(i, j);
  for (auto& x : v) x /= static_cast<double>(m);
  return detail::make_op(1, n, std::move(v), {a}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j] * inv;
  });
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_op(1, 1, {s}, {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

inline Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

// Diagonal of a square matrix as a column [n,1].
inline Tensor diag(const Tensor& a) {
  require(a.rows() == a.cols(), "not_square", "diag: matrix is not square");
  const std::size_t n = a.rows();
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = a(i, i);
  return detail::make_op(n, 1, std::move(v), {a}, [n](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < n; ++i) p.grad[i * n + i] += self.grad[i];
  });
}

// ---- row-wise nonlinear ----------------------------------------------------

inline Tensor softmax_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double* y = v.data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  return detail::make_op(m, n, std::move(v), {a}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.value.data() + i * n;
      const double* dy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

inline Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(m * n), norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a(i, j) * a(i, j);
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = a(i, j) / norms[i];
  }
  return detail::make_op(m, n, std::move(v), {a}, [m, n, norms, eps](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.value.data() + i * n;
      const double* dy = self.grad.data() + i * n;
      if (norms[i] <= eps) {
        for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += dy[j] / eps;
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += (dy[j] - y[j] * dot) / norms[i];
    }
  });
}

// ---- spatial ops on h*w x c grids -----------------------------------------

// 3x3 zero-padded patch extraction: [h*w, c] -> [h*w, 9*c], tap-major.
inline Tensor im2col3x3(const Tensor& x, std::size_t h, std::size_t w) {
  require(x.rows() == h * w, "shape_mismatch", "im2col3x3: grid size mismatch");
  const std::size_t c = x.cols();
  std::vector<double> v(h * w * 9 * c, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
          const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
          if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx >= static_cast<std::ptrdiff_t>(w))
            continue;
          const std::size_t tap = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1));
          const double* src = x.data().data() + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
          double* dst = v.data() + (y * w + xx) * 9 * c + tap * c;
          std::copy(src, src + c, dst);
        }
  return detail::make_op(h * w, 9 * c, std::move(v), {x}, [h, w, c](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
            const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
            if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx >= static_cast<std::ptrdiff_t>(w))
              continue;
            const std::size_t tap = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1));
            double* dst = p.grad.data() + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
            const double* src = self.grad.data() + (y * w + xx) * 9 * c + tap * c;
            for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
          }
  });
}

// 3x3 same-padded convolution; weight is [9*c_in, c_out] in im2col tap order.
inline Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t h,
                      std::size_t w) {
  require(weight.rows() == 9 * x.cols(), "shape_mismatch", "conv3x3: weight rows != 9*c_in");
  return affine(im2col3x3(x, h, w), weight, bias);
}

// Average pooling of an h x w grid onto oh x ow bins (adaptive bin edges).
inline Tensor adaptive_avg_pool(const Tensor& x, std::size_t h, std::size_t w, std::size_t oh,
                                std::size_t ow) {
  require(x.rows() == h * w, "shape_mismatch", "adaptive_avg_pool: grid size mismatch");
  require(oh >= 1 && ow >= 1 && oh <= h && ow <= w, "shape_mismatch", "adaptive_avg_pool: bad output dims");
  const std::size_t c = x.cols();
  struct Bin {
    std::size_t y0, y1, x0, x1;
  };
  std::vector<Bin> bins(oh * ow);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      bins[i * ow + j] = {i * h / oh, ((i + 1) * h + oh - 1) / oh, j * w / ow, ((j + 1) * w + ow - 1) / ow};
  std::vector<double> v(oh * ow * c, 0.0);
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const Bin& bn = bins[b];
    const double inv = 1.0 / static_cast<double>((bn.y1 - bn.y0) * (bn.x1 - bn.x0));
    for (std::size_t y = bn.y0; y < bn.y1; ++y)
      for (std::size_t xx = bn.x0; xx < bn.x1; ++xx)
        for (std::size_t k = 0; k < c; ++k) v[b * c + k] += x(y * w + xx, k) * inv;
  }
  return detail::make_op(oh * ow, c, std::move(v), {x}, [bins, w, c](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t b = 0; b < bins.size(); ++b) {
      const auto& bn = bins[b];
      const double inv = 1.0 / static_cast<double>((bn.y1 - bn.y0) * (bn.x1 - bn.x0));
      for (std::size_t y = bn.y0; y < bn.y1; ++y)
        for (std::size_t xx = bn.x0; xx < bn.x1; ++xx)
          for (std::size_t k = 0; k < c; ++k) p.grad[(y * w + xx) * c + k] += self.grad[b * c + k] * inv;
    }
  });
}

namespace detail {

// Maps a normalized coordinate in [-1,1] onto [0, n-1] patch-center space and
// returns the lower cell index and fractional part.
struct Axis {
  std::size_t i0 = 0;
  std::size_t i1 = 0;
  double t = 0.0;
  double dpos = 0.0;  // d(grid position)/d(normalized coordinate)
};

inline Axis locate(double u, std::size_t n) {
  Axis a;
  if (n == 1) return a;
  const double pos = std::clamp((u + 1.0) * 0.5 * static_cast<double>(n - 1), 0.0, static_cast<double>(n - 1));
  auto i0 = static_cast<std::size_t>(std::floor(pos));
  if (i0 >= n - 1) i0 = n - 2;
  a.i0 = i0;
  a.i1 = i0 + 1;
  a.t = pos - static_cast<double>(i0);
  a.dpos = 0.5 * static_cast<double>(n - 1);
  return a;
}

}  // namespace detail

// Bilinear sampling of grid features x[h*w, c] at points[n, 2] = (x, y) in
// [-1,1]^2, where -1/+1 map to the first/last patch centers. Differentiable
// w.r.t. both the features and the point coordinates.
inline Tensor bilinear_sample(const Tensor& x, const Tensor& points, std::size_t h, std::size_t w) {
  require(x.rows() == h * w, "shape_mismatch", "bilinear_sample: grid size mismatch");
  require(points.cols() == 2, "shape_mismatch", "bilinear_sample: points must be n x 2");
  const std::size_t c = x.cols(), n = points.rows();
  std::vector<double> v(n * c, 0.0);
  for (std::size_t q = 0; q < n; ++q) {
    const auto ax = detail::locate(points(q, 0), w);
    const auto ay = detail::locate(points(q, 1), h);
    const double w00 = (1 - ax.t) * (1 - ay.t), w01 = ax.t * (1 - ay.t);
    const double w10 = (1 - ax.t) * ay.t, w11 = ax.t * ay.t;
    const double* r00 = x.data().data() + (ay.i0 * w + ax.i0) * c;
    const double* r01 = x.data().data() + (ay.i0 * w + ax.i1) * c;
    const double* r10 = x.data().data() + (ay.i1 * w + ax.i0) * c;
    const double* r11 = x.data().data() + (ay.i1 * w + ax.i1) * c;
    double* out = v.data() + q * c;
    for (std::size_t k = 0; k < c; ++k) out[k] = w00 * r00[k] + w01 * r01[k] + w10 * r10[k] + w11 * r11[k];
  }
  return detail::make_op(n, c, std::move(v), {x, points}, [h, w, c, n](Node& self) {
    Node& px = *self.parents[0];
    Node& pp = *self.parents[1];
    for (std::size_t q = 0; q < n; ++q) {
      const double u = pp.value[q * 2], vv = pp.value[q * 2 + 1];
      const auto ax = detail::locate(u, w);
      const auto ay = detail::locate(vv, h);
      const double* dy = self.grad.data() + q * c;
      const std::size_t i00 = (ay.i0 * w + ax.i0) * c, i01 = (ay.i0 * w + ax.i1) * c;
      const std::size_t i10 = (ay.i1 * w + ax.i0) * c, i11 = (ay.i1 * w + ax.i1) * c;
      if (px.requires_grad) {
        const double w00 = (1 - ax.t) * (1 - ay.t), w01 = ax.t * (1 - ay.t);
        const double w10 = (1 - ax.t) * ay.t, w11 = ax.t * ay.t;
        for (std::size_t k = 0; k < c; ++k) {
          px.grad[i00 + k] += w00 * dy[k];
          px.grad[i01 + k] += w01 * dy[k];
          px.grad[i10 + k] += w10 * dy[k];
          px.grad[i11 + k] += w11 * dy[k];
        }
      }
      if (pp.requires_grad) {
        const double* xv = px.value.data();
        double gx = 0.0, gy = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          const double a = xv[i00 + k], b = xv[i01 + k], cc = xv[i10 + k], d = xv[i11 + k];
          gx += dy[k] * ((1 - ay.t) * (b - a) + ay.t * (d - cc));
          gy += dy[k] * ((1 - ax.t) * (cc - a) + ax.t * (d - b));
        }
        const double pos_x = (u + 1.0) * 0.5 * static_cast<double>(w - 1);
        const double pos_y = (vv + 1.0) * 0.5 * static_cast<double>(h - 1);
        if (w > 1 && pos_x >= 0.0 && pos_x <= static_cast<double>(w - 1)) pp.grad[q * 2] += gx * ax.dpos;
        if (h > 1 && pos_y >= 0.0 && pos_y <= static_cast<double>(h - 1)) pp.grad[q * 2 + 1] += gy * ay.dpos;
      }
    }
  });
}

// Significance-weighted cluster merge: out[k] = sum_{i in k} w_i z_i / sum_{i in k} w_i.
inline Tensor weighted_cluster_merge(const Tensor& z, const Tensor& weights,
                                     const std::vector<std::size_t>& assignment, std::size_t k) {
  require(weights.rows() == z.rows() && weights.cols() == 1, "shape_mismatch",
          "weighted_cluster_merge: weights must be N x 1");
  require(assignment.size() == z.rows(), "shape_mismatch", "weighted_cluster_merge: assignment length");
  const std::size_t c = z.cols();
  std::vector<double> denom(k, 0.0), v(k * c, 0.0);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const std::size_t a = assignment[i];
    require(a < k, "invalid_assignment", "cluster id out of range");
    denom[a] += weights(i, 0);
    for (std::size_t j = 0; j < c; ++j) v[a * c + j] += weights(i, 0) * z(i, j);
  }
  for (std::size_t a = 0; a < k; ++a) {
    require(denom[a] > 0.0, "empty_cluster", "cluster has no members or zero total weight");
    for (std::size_t j = 0; j < c; ++j) v[a * c + j] /= denom[a];
  }
  return detail::make_op(k, c, std::move(v), {z, weights}, [assignment, denom, c](Node& self) {
    Node& pz = *self.parents[0];
    Node& pw = *self.parents[1];
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      const std::size_t a = assignment[i];
      const double wi = pw.value[i];
      const double* g = self.grad.data() + a * c;
      if (pz.requires_grad)
        for (std::size_t j = 0; j < c; ++j) pz.grad[i * c + j] += g[j] * wi / denom[a];
      if (pw.requires_grad) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += g[j] * (pz.value[i * c + j] - self.value[a * c + j]);
        pw.grad[i] += s / denom[a];
      }
    }
  });
}

}  // namespace dmml
