#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
// Every op builds a graph node; backward() walks the graph once in reverse
// topological order and accumulates gradients additively into every reachable
// tensor that requires them. Double precision throughout: the finite-difference
// oracle below is the ground truth for every derivative in this library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace cf {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void op_fail(const char* op, const std::string& msg) {
  throw TensorError(std::string(op) + ": " + msg);
}

inline void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) op_fail(op, msg);
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) op_fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backward;  // accumulates this->grad into inputs

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor from(std::vector<double> data, Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      op_fail("Tensor::from", "data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const size_t n = static_cast<size_t>(numel_of(shape));
    return from(std::vector<double>(n, 0.0), std::move(shape), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const size_t n = static_cast<size_t>(numel_of(shape));
    return from(std::vector<double>(n, v), std::move(shape), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from({v}, Shape{}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& handle() const { return n_; }

  const Shape& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return n_->numel(); }

  double* data() { return n_->value.data(); }
  const double* data() const { return n_->value.data(); }
  std::vector<double>& vec() { return n_->value; }
  const std::vector<double>& vec() const { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (n_->grad.empty()) op_fail("Tensor::grad", "no gradient accumulated");
    return n_->grad;
  }
  std::vector<double>& grad_buffer() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  double item() const {
    if (numel() != 1) op_fail("Tensor::item", "tensor has " + std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  // Value copy outside any graph.
  Tensor detach() const { return from(n_->value, n_->shape, false); }

 private:
  std::shared_ptr<Node> n_;
};

// Factory for ops defined outside this header (window partitioning etc.).
// `bw` runs with out->grad populated and must accumulate into inputs' grads.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  n->inputs.reserve(inputs.size());
  for (auto& t : inputs) {
    rg = rg || t.requires_grad();
    n->inputs.push_back(t.handle());
  }
  n->requires_grad = rg;
  if (rg && bw) {
    Node* raw = n.get();
    n->backward = [raw, f = std::move(bw)]() { f(*raw); };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) op_fail("backward", "loss must be scalar, got " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; deterministic because input order is fixed.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.n->inputs.size()) {
      Node* child = f.n->inputs[f.next_child++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  // Interior grads are pass-local scratch: reset them so repeated backward
  // calls stay additive at the leaves instead of compounding.
  for (Node* n : order)
    if (!n->inputs.empty()) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward();
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void accumulate(Node& dst, const std::vector<double>& g) {
  dst.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<double> v(a.vec());
  const double* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] += pb[i];
  return make_op("add", a.shape(), std::move(v), {a, b}, [](Node& out) {
    for (int k = 0; k < 2; ++k) {
      Node* in = out.inputs[static_cast<size_t>(k)].get();
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); ++i) in->grad[i] += out.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a.shape(), b.shape());
  std::vector<double> v(a.vec());
  const double* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] -= pb[i];
  return make_op("sub", a.shape(), std::move(v), {a, b}, [](Node& out) {
    Node* ia = out.inputs[0].get();
    Node* ib = out.inputs[1].get();
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); ++i) ia->grad[i] += out.grad[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); ++i) ib->grad[i] -= out.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a.shape(), b.shape());
  std::vector<double> v(a.vec());
  const double* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= pb[i];
  return make_op("mul", a.shape(), std::move(v), {a, b}, [](Node& out) {
    Node* ia = out.inputs[0].get();
    Node* ib = out.inputs[1].get();
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); ++i) ia->grad[i] += out.grad[i] * ib->value[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); ++i) ib->grad[i] += out.grad[i] * ia->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> v(a.vec());
  for (double& x : v) x *= c;
  return make_op("scale", a.shape(), std::move(v), {a}, [c](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); ++i) in->grad[i] += c * out.grad[i];
  });
}

// Multiply every element by a 1-element tensor (learnable scalar).
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require(s.numel() == 1, "mul_scalar", "scale must be a 1-element tensor, got " + shape_str(s.shape()));
  double sv = s.data()[0];
  std::vector<double> v(a.vec());
  for (double& x : v) x *= sv;
  return make_op("mul_scalar", a.shape(), std::move(v), {a, s}, [](Node& out) {
    Node* ia = out.inputs[0].get();
    Node* is = out.inputs[1].get();
    const double sv = is->value[0];
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); ++i) ia->grad[i] += sv * out.grad[i];
    }
    if (is->requires_grad) {
      is->ensure_grad();
      double acc = 0.0;
      for (size_t i = 0; i < out.grad.size(); ++i) acc += out.grad[i] * ia->value[i];
      is->grad[0] += acc;
    }
  });
}

inline Tensor add_scalar_value(const Tensor& a, double c) {
  std::vector<double> v(a.vec());
  for (double& x : v) x += c;
  return make_op("add_scalar_value", a.shape(), std::move(v), {a}, [](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); ++i) in->grad[i] += out.grad[i];
  });
}

inline Tensor gelu(const Tensor& a) {
  std::vector<double> v(a.vec());
  for (double& x : v) x = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  return make_op("gelu", a.shape(), std::move(v), {a}, [](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (size_t i = 0; i < out.grad.size(); ++i) {
      double x = in->value[i];
      double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      in->grad[i] += out.grad[i] * (cdf + x * pdf);
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.vec());
  for (double& x : v) x = 1.0 / (1.0 + std::exp(-x));
  return make_op("sigmoid", a.shape(), std::move(v), {a}, [](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); ++i) {
      double y = out.value[i];
      in->grad[i] += out.grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor exp_op(const Tensor& a) {
  std::vector<double> v(a.vec());
  for (double& x : v) x = std::exp(x);
  return make_op("exp", a.shape(), std::move(v), {a}, [](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); ++i) in->grad[i] += out.grad[i] * out.value[i];
  });
}

inline Tensor log_op(const Tensor& a) {
  std::vector<double> v(a.vec());
  for (size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0))
      op_fail("log", "non-positive input " + std::to_string(v[i]) + " at index " + std::to_string(i));
    v[i] = std::log(v[i]);
  }
  return make_op("log", a.shape(), std::move(v), {a}, [](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); ++i) in->grad[i] += out.grad[i] / in->value[i];
  });
}

inline Tensor rsqrt(const Tensor& a) {
  std::vector<double> v(a.vec());
  for (size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0))
      op_fail("rsqrt", "non-positive input " + std::to_string(v[i]) + " at index " + std::to_string(i));
    v[i] = 1.0 / std::sqrt(v[i]);
  }
  return make_op("rsqrt", a.shape(), std::move(v), {a}, [](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); ++i) {
      double y = out.value[i];  // x^{-1/2}
      in->grad[i] += out.grad[i] * (-0.5 * y * y * y);
    }
  });
}

// ---------------------------------------------------------------------------
// matmul and row helpers
// ---------------------------------------------------------------------------

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
inline void mm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// da[m,k] += go[m,n] * b^T  (dot of contiguous rows)
inline void mm_grad_a(const double* go, const double* b, double* da, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* grow = go + i * n;
    double* darow = da + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * n;
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      darow[kk] += acc;
    }
  }
}

// db[k,n] += a^T * go  (axpy over go rows)
inline void mm_grad_b(const double* a, const double* go, double* db, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = go + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      double* dbrow = db + kk * n;
      for (int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul",
          "expects 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    op_fail("matmul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<size_t>(m * n), 0.0);
  detail::mm_acc(a.data(), b.data(), v.data(), m, k, n);
  return make_op("matmul", {m, n}, std::move(v), {a, b}, [m, k, n](Node& out) {
    Node* ia = out.inputs[0].get();
    Node* ib = out.inputs[1].get();
    if (ia->requires_grad) {
      ia->ensure_grad();
      detail::mm_grad_a(out.grad.data(), ib->value.data(), ia->grad.data(), m, k, n);
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      detail::mm_grad_b(ia->value.data(), out.grad.data(), ib->grad.data(), m, k, n);
    }
  });
}

// x[N,D] + b[D] broadcast over rows.
inline Tensor add_rows(const Tensor& x, const Tensor& b) {
  require(x.ndim() == 2 && b.ndim() == 1 && x.dim(1) == b.dim(0), "add_rows",
          "expects [N,D] + [D], got " + shape_str(x.shape()) + " and " + shape_str(b.shape()));
  const int64_t n = x.dim(0), d = x.dim(1);
  std::vector<double> v(x.vec());
  const double* pb = b.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) v[static_cast<size_t>(i * d + j)] += pb[j];
  return make_op("add_rows", x.shape(), std::move(v), {x, b}, [n, d](Node& out) {
    Node* ix = out.inputs[0].get();
    Node* ib = out.inputs[1].get();
    if (ix->requires_grad) {
      ix->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); ++i) ix->grad[i] += out.grad[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) ib->grad[static_cast<size_t>(j)] += out.grad[static_cast<size_t>(i * d + j)];
    }
  });
}

// Row i of x[N,D] scaled by s[i].
inline Tensor rows_scale(const Tensor& x, const Tensor& s) {
  require(x.ndim() == 2 && s.ndim() == 1 && x.dim(0) == s.dim(0), "rows_scale",
          "expects [N,D] with [N], got " + shape_str(x.shape()) + " and " + shape_str(s.shape()));
  const int64_t n = x.dim(0), d = x.dim(1);
  std::vector<double> v(x.vec());
  const double* ps = s.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) v[static_cast<size_t>(i * d + j)] *= ps[i];
  return make_op("rows_scale", x.shape(), std::move(v), {x, s}, [n, d](Node& out) {
    Node* ix = out.inputs[0].get();
    Node* is = out.inputs[1].get();
    if (ix->requires_grad) {
      ix->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const double sv = is->value[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j)
          ix->grad[static_cast<size_t>(i * d + j)] += sv * out.grad[static_cast<size_t>(i * d + j)];
      }
    }
    if (is->requires_grad) {
      is->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < d; ++j)
          acc += out.grad[static_cast<size_t>(i * d + j)] * ix->value[static_cast<size_t>(i * d + j)];
        is->grad[static_cast<size_t>(i)] += acc;
      }
    }
  });
}

// Gather rows of table[V,D] by index; gradients scatter back into the table.
inline Tensor take_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  require(table.ndim() == 2, "take_rows", "table must be 2-D, got " + shape_str(table.shape()));
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    require(id >= 0 && id < v, "take_rows", "index " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<double> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(table.data() + ids[static_cast<size_t>(i)] * d, d, out.begin() + i * d);
  return make_op("take_rows", {n, d}, std::move(out), {table}, [ids, d](Node& o) {
    Node* t = o.inputs[0].get();
    t->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      double* dst = t->grad.data() + ids[i] * d;
      const double* src = o.grad.data() + static_cast<int64_t>(i) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

// ---------------------------------------------------------------------------
// softmax / layer norm / cross entropy over the last axis
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x) {
  require(x.ndim() >= 1, "softmax", "needs at least 1 axis, got scalar");
  const int64_t d = x.shape().back();
  const int64_t rows = x.numel() / d;
  std::vector<double> v(x.vec());
  for (int64_t r = 0; r < rows; ++r) {
    double* p = v.data() + r * d;
    double mx = *std::max_element(p, p + d);
    double sum = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      p[i] = std::exp(p[i] - mx);
      sum += p[i];
    }
    for (int64_t i = 0; i < d; ++i) p[i] /= sum;
  }
  return make_op("softmax", x.shape(), std::move(v), {x}, [d, rows](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = out.value.data() + r * d;
      const double* go = out.grad.data() + r * d;
      double dot = 0.0;
      for (int64_t i = 0; i < d; ++i) dot += go[i] * y[i];
      double* gi = in->grad.data() + r * d;
      for (int64_t i = 0; i < d; ++i) gi[i] += y[i] * (go[i] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes over the last axis; constant rows map to zero pre-affine.
inline Tensor layer_norm(const Tensor& x) {
  require(x.ndim() >= 1, "layer_norm", "needs at least 1 axis");
  const int64_t d = x.shape().back();
  const int64_t rows = x.numel() / d;
  std::vector<double> v(x.numel());
  for (int64_t r = 0; r < rows; ++r) {
    const double* p = x.data() + r * d;
    double mean = 0.0;
    for (int64_t i = 0; i < d; ++i) mean += p[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    double* o = v.data() + r * d;
    for (int64_t i = 0; i < d; ++i) o[i] = (p[i] - mean) * inv;
  }
  return make_op("layer_norm", x.shape(), std::move(v), {x}, [d, rows](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    const double dd = static_cast<double>(d);
    for (int64_t r = 0; r < rows; ++r) {
      const double* p = in->value.data() + r * d;
      const double* xhat = out.value.data() + r * d;
      const double* go = out.grad.data() + r * d;
      double mean = 0.0;
      for (int64_t i = 0; i < d; ++i) mean += p[i];
      mean /= dd;
      double var = 0.0;
      for (int64_t i = 0; i < d; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= dd;
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      double sum_go = 0.0, sum_go_xhat = 0.0;
      for (int64_t i = 0; i < d; ++i) {
        sum_go += go[i];
        sum_go_xhat += go[i] * xhat[i];
      }
      double* gi = in->grad.data() + r * d;
      for (int64_t i = 0; i < d; ++i)
        gi[i] += inv * (go[i] - sum_go / dd - xhat[i] * sum_go_xhat / dd);
    }
  });
}

// Affine layer norm: gain/bias broadcast over rows.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int64_t d = x.shape().back();
  require(gain.ndim() == 1 && gain.dim(0) == d, "layer_norm", "gain shape " + shape_str(gain.shape()));
  require(bias.ndim() == 1 && bias.dim(0) == d, "layer_norm", "bias shape " + shape_str(bias.shape()));
  Tensor normed = layer_norm(x);
  // rows view
  const int64_t rows = x.numel() / d;
  std::vector<double> v(normed.vec());
  const double* pg = gain.data();
  const double* pb = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    double* p = v.data() + r * d;
    for (int64_t i = 0; i < d; ++i) p[i] = p[i] * pg[i] + pb[i];
  }
  return make_op("layer_norm_affine", x.shape(), std::move(v), {normed, gain, bias},
                 [d, rows](Node& out) {
                   Node* nx = out.inputs[0].get();
                   Node* ng = out.inputs[1].get();
                   Node* nb = out.inputs[2].get();
                   if (nx->requires_grad) {
                     nx->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t i = 0; i < d; ++i)
                         nx->grad[static_cast<size_t>(r * d + i)] +=
                             out.grad[static_cast<size_t>(r * d + i)] * ng->value[static_cast<size_t>(i)];
                   }
                   if (ng->requires_grad) {
                     ng->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t i = 0; i < d; ++i)
                         ng->grad[static_cast<size_t>(i)] += out.grad[static_cast<size_t>(r * d + i)] *
                                                             nx->value[static_cast<size_t>(r * d + i)];
                   }
                   if (nb->requires_grad) {
                     nb->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t i = 0; i < d; ++i)
                         nb->grad[static_cast<size_t>(i)] += out.grad[static_cast<size_t>(r * d + i)];
                   }
                 });
}

// Mean of -log p[target] over rows; logits [N,K], integer targets in [0,K).
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int64_t>& targets) {
  require(logits.ndim() == 2, "cross_entropy_mean", "logits must be [N,K], got " + shape_str(logits.shape()));
  const int64_t n = logits.dim(0), k = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == n, "cross_entropy_mean",
          "targets size " + std::to_string(targets.size()) + " vs rows " + std::to_string(n));
  for (int64_t t : targets)
    require(t >= 0 && t < k, "cross_entropy_mean", "class id " + std::to_string(t) + " out of range [0," + std::to_string(k) + ")");
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * k;
    double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    loss += mx + std::log(sum) - row[targets[static_cast<size_t>(i)]];
  }
  loss /= static_cast<double>(n);
  return make_op("cross_entropy_mean", Shape{}, {loss}, {logits}, [targets, n, k](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    const double go = out.grad[0] / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
      const double* row = in->value.data() + i * k;
      double mx = *std::max_element(row, row + k);
      double sum = 0.0;
      for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
      double* gi = in->grad.data() + i * k;
      for (int64_t j = 0; j < k; ++j) {
        double p = std::exp(row[j] - mx) / sum;
        gi[j] += go * (p - (j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  require(numel_of(shape) == x.numel(), "reshape",
          "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return make_op("reshape", std::move(shape), x.vec(), {x}, [](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); ++i) in->grad[i] += out.grad[i];
  });
}

namespace detail {

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[static_cast<size_t>(i)] = st[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
  return st;
}

}  // namespace detail

inline Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  require(static_cast<int>(perm.size()) == nd, "transpose", "perm rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(nd), false);
  for (int p : perm) {
    require(p >= 0 && p < nd && !seen[static_cast<size_t>(p)], "transpose", "invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  auto in_strides = detail::strides_of(x.shape());
  auto out_strides = detail::strides_of(out_shape);
  const int64_t n = x.numel();
  std::vector<double> v(static_cast<size_t>(n));
  // map out linear index -> in linear index
  std::vector<int64_t> map_stride(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) map_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < nd; ++i) {
      int64_t idx = rem / out_strides[static_cast<size_t>(i)];
      rem -= idx * out_strides[static_cast<size_t>(i)];
      src += idx * map_stride[static_cast<size_t>(i)];
    }
    v[static_cast<size_t>(o)] = x.data()[src];
  }
  return make_op("transpose", std::move(out_shape), std::move(v), {x},
                 [out_strides, map_stride, n, nd](Node& out) {
                   Node* in = out.inputs[0].get();
                   in->ensure_grad();
                   for (int64_t o = 0; o < n; ++o) {
                     int64_t rem = o, src = 0;
                     for (int i = 0; i < nd; ++i) {
                       int64_t idx = rem / out_strides[static_cast<size_t>(i)];
                       rem -= idx * out_strides[static_cast<size_t>(i)];
                       src += idx * map_stride[static_cast<size_t>(i)];
                     }
                     in->grad[static_cast<size_t>(src)] += out.grad[static_cast<size_t>(o)];
                   }
                 });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat", "no inputs");
  const int nd = parts[0].ndim();
  require(axis >= 0 && axis < nd, "concat", "axis out of range");
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const Tensor& t : parts) {
    require(t.ndim() == nd, "concat", "rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis)
        require(t.dim(i) == out_shape[static_cast<size_t>(i)], "concat",
                "shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(parts[0].shape()));
    axis_total += t.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[static_cast<size_t>(i)];
  std::vector<double> v(static_cast<size_t>(numel_of(out_shape)));
  std::vector<int64_t> axis_dims;
  axis_dims.reserve(parts.size());
  for (const Tensor& t : parts) axis_dims.push_back(t.dim(axis));
  int64_t offset = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    const int64_t block = axis_dims[p] * inner;
    const double* src = parts[p].data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(src + o * block, block, v.begin() + o * axis_total * inner + offset * inner);
    offset += axis_dims[p];
  }
  return make_op("concat", std::move(out_shape), std::move(v), parts,
                 [axis_dims, outer, inner, axis_total](Node& out) {
                   int64_t offset = 0;
                   for (size_t p = 0; p < out.inputs.size(); ++p) {
                     Node* in = out.inputs[p].get();
                     const int64_t block = axis_dims[p] * inner;
                     if (in->requires_grad) {
                       in->ensure_grad();
                       for (int64_t o = 0; o < outer; ++o) {
                         const double* g = out.grad.data() + o * axis_total * inner + offset * inner;
                         double* dst = in->grad.data() + o * block;
                         for (int64_t i = 0; i < block; ++i) dst[i] += g[i];
                       }
                     }
                     offset += axis_dims[p];
                   }
                 });
}

inline Tensor slice(const Tensor& x, const std::vector<int64_t>& offsets,
                    const std::vector<int64_t>& extents) {
  const int nd = x.ndim();
  require(static_cast<int>(offsets.size()) == nd && static_cast<int>(extents.size()) == nd, "slice",
          "offsets/extents rank mismatch");
  for (int i = 0; i < nd; ++i)
    require(offsets[static_cast<size_t>(i)] >= 0 && extents[static_cast<size_t>(i)] >= 1 &&
                offsets[static_cast<size_t>(i)] + extents[static_cast<size_t>(i)] <= x.dim(i),
            "slice", "window out of bounds on axis " + std::to_string(i));
  Shape out_shape(extents.begin(), extents.end());
  auto in_strides = detail::strides_of(x.shape());
  auto out_strides = detail::strides_of(out_shape);
  const int64_t n = numel_of(out_shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < nd; ++i) {
      int64_t idx = rem / out_strides[static_cast<size_t>(i)];
      rem -= idx * out_strides[static_cast<size_t>(i)];
      src += (idx + offsets[static_cast<size_t>(i)]) * in_strides[static_cast<size_t>(i)];
    }
    v[static_cast<size_t>(o)] = x.data()[src];
  }
  return make_op("slice", std::move(out_shape), std::move(v), {x},
                 [offsets, in_strides, out_strides, n, nd](Node& out) {
                   Node* in = out.inputs[0].get();
                   in->ensure_grad();
                   for (int64_t o = 0; o < n; ++o) {
                     int64_t rem = o, src = 0;
                     for (int i = 0; i < nd; ++i) {
                       int64_t idx = rem / out_strides[static_cast<size_t>(i)];
                       rem -= idx * out_strides[static_cast<size_t>(i)];
                       src += (idx + offsets[static_cast<size_t>(i)]) * in_strides[static_cast<size_t>(i)];
                     }
                     in->grad[static_cast<size_t>(src)] += out.grad[static_cast<size_t>(o)];
                   }
                 });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor mean_all(const Tensor& x) {
  const int64_t n = x.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
  acc /= static_cast<double>(n);
  return make_op("mean_all", Shape{}, {acc}, {x}, [n](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    const double g = out.grad[0] / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) in->grad[static_cast<size_t>(i)] += g;
  });
}

inline Tensor sum_all(const Tensor& x) {
  const int64_t n = x.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
  return make_op("sum_all", Shape{}, {acc}, {x}, [n](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    const double g = out.grad[0];
    for (int64_t i = 0; i < n; ++i) in->grad[static_cast<size_t>(i)] += g;
  });
}

// Mean over a sorted list of axes; reduced axes are dropped from the shape.
inline Tensor mean_axes(const Tensor& x, std::vector<int> axes) {
  const int nd = x.ndim();
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (int a : axes) require(a >= 0 && a < nd, "mean_axes", "axis out of range");
  if (static_cast<int>(axes.size()) == nd) return mean_all(x);
  std::vector<bool> reduced(static_cast<size_t>(nd), false);
  for (int a : axes) reduced[static_cast<size_t>(a)] = true;
  Shape out_shape;
  int64_t count = 1;
  for (int i = 0; i < nd; ++i) {
    if (reduced[static_cast<size_t>(i)])
      count *= x.dim(i);
    else
      out_shape.push_back(x.dim(i));
  }
  auto in_strides = detail::strides_of(x.shape());
  Shape kept_shape = out_shape;
  auto out_strides = detail::strides_of(kept_shape);
  const int64_t n = x.numel();
  std::vector<double> v(static_cast<size_t>(numel_of(out_shape)), 0.0);
  // map input linear index -> output linear index
  std::vector<int64_t> contrib(static_cast<size_t>(n));
  for (int64_t ii = 0; ii < n; ++ii) {
    int64_t rem = ii, o = 0;
    int kept = 0;
    for (int i = 0; i < nd; ++i) {
      int64_t idx = rem / in_strides[static_cast<size_t>(i)];
      rem -= idx * in_strides[static_cast<size_t>(i)];
      if (!reduced[static_cast<size_t>(i)]) {
        o += idx * out_strides[static_cast<size_t>(kept)];
        ++kept;
      }
    }
    contrib[static_cast<size_t>(ii)] = o;
    v[static_cast<size_t>(o)] += x.data()[ii];
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (double& y : v) y *= inv;
  return make_op("mean_axes", std::move(out_shape), std::move(v), {x}, [contrib, inv, n](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (int64_t ii = 0; ii < n; ++ii)
      in->grad[static_cast<size_t>(ii)] += inv * out.grad[static_cast<size_t>(contrib[static_cast<size_t>(ii)])];
  });
}

// Sum over the last axis: [..., D] -> [...].
inline Tensor sum_lastdim(const Tensor& x) {
  require(x.ndim() >= 1, "sum_lastdim", "needs at least 1 axis");
  const int64_t d = x.shape().back();
  const int64_t rows = x.numel() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> v(static_cast<size_t>(rows), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    const double* p = x.data() + r * d;
    double acc = 0.0;
    for (int64_t i = 0; i < d; ++i) acc += p[i];
    v[static_cast<size_t>(r)] = acc;
  }
  return make_op("sum_lastdim", std::move(out_shape), std::move(v), {x}, [d, rows](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double g = out.grad[static_cast<size_t>(r)];
      double* gi = in->grad.data() + r * d;
      for (int64_t i = 0; i < d; ++i) gi[i] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// convolution and resampling
// ---------------------------------------------------------------------------

// x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]; zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require(x.ndim() == 3 && w.ndim() == 4, "conv2d",
          "expects x [Cin,H,W] and w [Cout,Cin,kh,kw], got " + shape_str(x.shape()) + " and " +
              shape_str(w.shape()));
  const int64_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == cin, "conv2d",
          "channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  require(b.ndim() == 1 && b.dim(0) == cout, "conv2d", "bias shape " + shape_str(b.shape()));
  require(stride >= 1, "conv2d", "stride must be positive");
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  require(oh >= 1 && ow >= 1, "conv2d", "kernel larger than padded input");
  std::vector<double> v(static_cast<size_t>(cout * oh * ow));
  for (int64_t oc = 0; oc < cout; ++oc) {
    for (int64_t oy = 0; oy < oh; ++oy) {
      for (int64_t ox = 0; ox < ow; ++ox) {
        double acc = b.data()[oc];
        const int64_t iy0 = oy * stride - pad;
        const int64_t ix0 = ox * stride - pad;
        for (int64_t ic = 0; ic < cin; ++ic) {
          const double* xp = x.data() + ic * h * wd;
          const double* wp = w.data() + ((oc * cin + ic) * kh) * kw;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            const double* xrow = xp + iy * wd;
            const double* wrow = wp + ky * kw;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += wrow[kx] * xrow[ix];
            }
          }
        }
        v[static_cast<size_t>((oc * oh + oy) * ow + ox)] = acc;
      }
    }
  }
  return make_op("conv2d", {cout, oh, ow}, std::move(v), {x, w, b},
                 [cin, h, wd, cout, kh, kw, oh, ow, stride, pad](Node& out) {
                   Node* nx = out.inputs[0].get();
                   Node* nw = out.inputs[1].get();
                   Node* nb = out.inputs[2].get();
                   const bool gx = nx->requires_grad, gw = nw->requires_grad, gb = nb->requires_grad;
                   if (gx) nx->ensure_grad();
                   if (gw) nw->ensure_grad();
                   if (gb) nb->ensure_grad();
                   for (int64_t oc = 0; oc < cout; ++oc) {
                     for (int64_t oy = 0; oy < oh; ++oy) {
                       for (int64_t ox = 0; ox < ow; ++ox) {
                         const double go = out.grad[static_cast<size_t>((oc * oh + oy) * ow + ox)];
                         if (go == 0.0) continue;
                         if (gb) nb->grad[static_cast<size_t>(oc)] += go;
                         const int64_t iy0 = oy * stride - pad;
                         const int64_t ix0 = ox * stride - pad;
                         for (int64_t ic = 0; ic < cin; ++ic) {
                           const double* xp = nx->value.data() + ic * h * wd;
                           double* gxp = gx ? nx->grad.data() + ic * h * wd : nullptr;
                           const double* wp = nw->value.data() + ((oc * cin + ic) * kh) * kw;
                           double* gwp = gw ? nw->grad.data() + ((oc * cin + ic) * kh) * kw : nullptr;
                           for (int64_t ky = 0; ky < kh; ++ky) {
                             const int64_t iy = iy0 + ky;
                             if (iy < 0 || iy >= h) continue;
                             for (int64_t kx = 0; kx < kw; ++kx) {
                               const int64_t ix = ix0 + kx;
                               if (ix < 0 || ix >= wd) continue;
                               if (gw) gwp[ky * kw + kx] += go * xp[iy * wd + ix];
                               if (gx) gxp[iy * wd + ix] += go * wp[ky * kw + kx];
                             }
                           }
                         }
                       }
                     }
                   }
                 });
}

inline Tensor upsample_nearest2d(const Tensor& x, int factor) {
  require(x.ndim() == 3, "upsample_nearest2d", "expects [C,H,W], got " + shape_str(x.shape()));
  require(factor >= 1, "upsample_nearest2d", "factor must be positive");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t oh = h * factor, ow = w * factor;
  std::vector<double> v(static_cast<size_t>(c * oh * ow));
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < oh; ++y) {
      const double* src = x.data() + (ch * h + y / factor) * w;
      double* dst = v.data() + (ch * oh + y) * ow;
      for (int64_t xx = 0; xx < ow; ++xx) dst[xx] = src[xx / factor];
    }
  return make_op("upsample_nearest2d", {c, oh, ow}, std::move(v), {x}, [c, h, w, factor, oh, ow](Node& out) {
    Node* in = out.inputs[0].get();
    in->ensure_grad();
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < oh; ++y) {
        double* dst = in->grad.data() + (ch * h + y / factor) * w;
        const double* g = out.grad.data() + (ch * oh + y) * ow;
        for (int64_t xx = 0; xx < ow; ++xx) dst[xx / factor] += g[xx];
      }
  });
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

// Central differences; f must be deterministic. Aborts on non-finite output.
template <class F>
inline Tensor finite_difference_gradient(F&& f, const Tensor& x, double h = 1e-5) {
  require(h > 0.0, "finite_difference_gradient", "step must be positive");
  Tensor probe = x.detach();
  std::vector<double> g(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double f1 = f(probe);
    probe.data()[i] = orig - h;
    const double f2 = f(probe);
    probe.data()[i] = orig;
    if (!std::isfinite(f1) || !std::isfinite(f2))
      op_fail("finite_difference_gradient", "non-finite objective at index " + std::to_string(i));
    g[static_cast<size_t>(i)] = (f1 - f2) / (2.0 * h);
  }
  return Tensor::from(std::move(g), x.shape());
}

// Relative error with an absolute floor so near-zero gradients compare sanely.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& n) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double denom = std::max({1e-3, std::fabs(a[i]), std::fabs(n[i])});
    worst = std::max(worst, std::fabs(a[i] - n[i]) / denom);
  }
  return worst;
}

}  // namespace cf
