#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 arrays.
//
// A Tensor is a handle to a graph node. Operations build the tape dynamically:
// each result keeps its inputs alive and a closure that pushes its gradient
// back into them. Nothing is cached between steps; a new tape is recorded on
// every forward pass. Values are never mutated once a tensor takes part in a
// tape, except leaf parameters between steps (see Tensor::mutable_values).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fpdlab {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
};

// Test hook for the gradient checker's negative control: the gradient flowing
// out of every node with this op name is scaled by 1.5.
inline std::string& corrupted_op() {
  static std::string name;
  return name;
}

[[noreturn]] inline void shape_fail(std::string_view op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (std::size_t e : shape)
      if (e == 0) detail::shape_fail("tensor", "zero extent in shape " + shape_str(shape));
    if (fpdlab::numel(shape) != values.size())
      detail::shape_fail("tensor", "shape " + shape_str(shape) + " holds " +
                                       std::to_string(fpdlab::numel(shape)) + " values, got " +
                                       std::to_string(values.size()));
    node_->grad.assign(values.size(), 0.0);
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = fpdlab::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor filled(Shape shape, double v) {
    const std::size_t n = fpdlab::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(int axis) const { return node_->shape.at(normalize_axis(axis)); }
  std::span<const double> values() const { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  double item() const {
    if (numel() != 1) detail::shape_fail("item", "tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  const std::string& op() const { return node_->op; }

  void set_requires_grad(bool on) {
    if (!is_leaf()) throw std::logic_error("set_requires_grad: only leaf tensors can change trainability");
    node_->requires_grad = on;
  }

  // Leaf parameters are updated in place between steps by the optimizer.
  std::span<double> mutable_values() {
    if (!is_leaf()) throw std::logic_error("mutable_values: only leaf tensors may be mutated");
    return node_->value;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  // Fresh leaf with copied values (no shared storage, no history).
  Tensor clone(bool requires_grad) const { return Tensor(shape(), node_->value, requires_grad); }

  int normalize_axis(int axis) const {
    const int n = static_cast<int>(ndim());
    const int a = axis < 0 ? axis + n : axis;
    if (a < 0 || a >= n)
      detail::shape_fail("axis", "axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    return a;
  }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Records an op result. Inputs and the backward closure are kept only when
// some input needs gradients; otherwise the result is a plain constant.
inline Tensor record(std::string_view op, Shape shape, std::vector<double> value,
                     std::initializer_list<Tensor> inputs, std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(value));
  Node& n = *out.node();
  n.op = std::string(op);
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n.requires_grad = true;
    for (const Tensor& t : inputs) n.inputs.push_back(t.node_ptr());
    n.backward = std::move(backward);
  }
  return out;
}

inline Tensor record_many(std::string_view op, Shape shape, std::vector<double> value,
                          const std::vector<Tensor>& inputs, std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(value));
  Node& n = *out.node();
  n.op = std::string(op);
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n.requires_grad = true;
    for (const Tensor& t : inputs) n.inputs.push_back(t.node_ptr());
    n.backward = std::move(backward);
  }
  return out;
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Numpy-style broadcast of two shapes. The index maps give, for every output
// element, the source element in each operand; empty means identity.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index, b_index;
};

inline std::vector<std::size_t> source_index(const Shape& src, const Shape& out) {
  const std::size_t nd = out.size();
  const std::size_t off = nd - src.size();
  std::vector<std::size_t> stride(nd, 0);
  std::size_t s = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    stride[i + off] = src[i] == 1 ? 0 : s;
    s *= src[i];
  }
  std::vector<std::size_t> idx(numel(out));
  std::vector<std::size_t> counter(nd, 0);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    idx[k] = cur;
    for (std::size_t d = nd; d-- > 0;) {
      cur += stride[d];
      if (++counter[d] < out[d]) break;
      cur -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

inline Broadcast broadcast(std::string_view op, const Shape& a, const Shape& b) {
  Broadcast r;
  if (a == b) {
    r.out = a;
    return r;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  r.out.assign(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      shape_fail(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    r.out[i] = std::max(ea, eb);
  }
  if (a != r.out) r.a_index = source_index(a, r.out);
  if (b != r.out) r.b_index = source_index(b, r.out);
  return r;
}

template <class F, class DA, class DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto bc = broadcast(op, a.shape(), b.shape());
  const std::size_t n = numel(bc.out);
  auto ia = [&](std::size_t k) { return bc.a_index.empty() ? k : bc.a_index[k]; };
  auto ib = [&](std::size_t k) { return bc.b_index.empty() ? k : bc.b_index[k]; };
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t k = 0; k < n; ++k) out[k] = f(av[ia(k)], bv[ib(k)]);
  return record(op, bc.out, std::move(out), {a, b},
                [ai = std::move(bc.a_index), bi = std::move(bc.b_index), da, db](Node& self) {
                  Node& A = *self.inputs[0];
                  Node& B = *self.inputs[1];
                  for (std::size_t k = 0; k < self.value.size(); ++k) {
                    const std::size_t i = ai.empty() ? k : ai[k];
                    const std::size_t j = bi.empty() ? k : bi[k];
                    const double g = self.grad[k];
                    if (A.requires_grad) A.grad[i] += g * da(A.value[i], B.value[j], self.value[k]);
                    if (B.requires_grad) B.grad[j] += g * db(A.value[i], B.value[j], self.value[k]);
                  }
                });
}

// Elementwise map; dfdx receives (input, output).
template <class F, class D>
Tensor unary(std::string_view op, const Tensor& x, F f, D dfdx) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t k = 0; k < xv.size(); ++k) out[k] = f(xv[k]);
  return record(op, x.shape(), std::move(out), {x}, [dfdx](Node& self) {
    Node& X = *self.inputs[0];
    for (std::size_t k = 0; k < self.value.size(); ++k) X.grad[k] += self.grad[k] * dfdx(X.value[k], self.value[k]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with broadcasting

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }

// ---------------------------------------------------------------------------
// Elementwise functions

inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  return detail::unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(
      "softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

// Forward identity, backward zero. The result is a fresh constant.
inline Tensor stop_gradient(const Tensor& x) {
  Tensor out(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  out.node()->op = "stop_gradient";
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

// a: [m,k] or [b,m,k]; b: [k,n] or [b,k,n]. A 2-D operand is shared across
// the batch of the other.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto bad = [&](const std::string& why) {
    detail::shape_fail("matmul", why + " (lhs " + shape_str(sa) + ", rhs " + shape_str(sb) + ")");
  };
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3) bad("operands must be 2-D or 3-D");
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t k2 = sb[sb.size() - 2], n = sb.back();
  if (k != k2) bad("inner extents differ: " + std::to_string(k) + " vs " + std::to_string(k2));
  const std::size_t ba = sa.size() == 3 ? sa[0] : 1;
  const std::size_t bb = sb.size() == 3 ? sb[0] : 1;
  if (sa.size() == 3 && sb.size() == 3 && ba != bb) bad("batch extents differ");
  const std::size_t batch = std::max(ba, bb);
  const bool a_batched = sa.size() == 3, b_batched = sb.size() == 3;

  Shape out_shape = (a_batched || b_batched) ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (std::size_t t = 0; t < batch; ++t) {
    const double* At = A + (a_batched ? t * m * k : 0);
    const double* Bt = B + (b_batched ? t * k * n : 0);
    double* Ct = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = At[i * k + p];
        const double* brow = Bt + p * n;
        double* crow = Ct + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  return detail::record("matmul", std::move(out_shape), std::move(out), {a, b},
                        [=](detail::Node& self) {
                          detail::Node& NA = *self.inputs[0];
                          detail::Node& NB = *self.inputs[1];
                          for (std::size_t t = 0; t < batch; ++t) {
                            const double* G = self.grad.data() + t * m * n;
                            const std::size_t oa = a_batched ? t * m * k : 0;
                            const std::size_t ob = b_batched ? t * k * n : 0;
                            if (NA.requires_grad)  // dA = G B^T
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t p = 0; p < k; ++p) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * NB.value[ob + p * n + j];
                                  NA.grad[oa + i * k + p] += s;
                                }
                            if (NB.requires_grad)  // dB = A^T G
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t p = 0; p < k; ++p) {
                                  const double av = NA.value[oa + i * k + p];
                                  double* grow = NB.grad.data() + ob + p * n;
                                  for (std::size_t j = 0; j < n; ++j) grow[j] += av * G[i * n + j];
                                }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::record("sum", Shape{}, {s}, {x}, [](detail::Node& self) {
    detail::Node& X = *self.inputs[0];
    for (double& g : X.grad) g += self.grad[0];
  });
}

inline Tensor sum(const Tensor& x, int axis, bool keepdim = false) {
  const std::size_t ax = static_cast<std::size_t>(x.normalize_axis(axis));
  const auto sp = detail::split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.extent + e) * sp.inner + i];
  return detail::record("sum", std::move(out_shape), std::move(out), {x}, [sp](detail::Node& self) {
    detail::Node& X = *self.inputs[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i)
          X.grad[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

inline Tensor mean(const Tensor& x) {
  Tensor s = sum(x);
  Tensor out = scale(s, 1.0 / static_cast<double>(x.numel()));
  out.node()->op = "mean";
  return out;
}

inline Tensor mean(const Tensor& x, int axis, bool keepdim = false) {
  const double n = static_cast<double>(x.dim(axis));
  Tensor out = scale(sum(x, axis, keepdim), 1.0 / n);
  out.node()->op = "mean";
  return out;
}

// Max-subtracted softmax along one axis.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const std::size_t ax = static_cast<std::size_t>(x.normalize_axis(axis));
  const auto sp = detail::split_axis(x.shape(), ax);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t e) { return (o * sp.extent + e) * sp.inner + i; };
      double mx = xv[at(0)];
      for (std::size_t e = 1; e < sp.extent; ++e) mx = std::max(mx, xv[at(e)]);
      double z = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) z += (out[at(e)] = std::exp(xv[at(e)] - mx));
      for (std::size_t e = 0; e < sp.extent; ++e) out[at(e)] /= z;
    }
  return detail::record("softmax", x.shape(), std::move(out), {x}, [sp](detail::Node& self) {
    detail::Node& X = *self.inputs[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t e) { return (o * sp.extent + e) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) dot += self.grad[at(e)] * self.value[at(e)];
        for (std::size_t e = 0; e < sp.extent; ++e) X.grad[at(e)] += self.value[at(e)] * (self.grad[at(e)] - dot);
      }
  });
}

// Normalizes over the last axis to zero mean and unit variance (no affine).
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
  if (x.ndim() == 0) detail::shape_fail("layer_norm", "needs at least one axis");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> inv_sigma(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_sigma[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mu) * inv_sigma[r];
  }
  return detail::record("layer_norm", x.shape(), std::move(out), {x},
                        [n, rows, inv = std::move(inv_sigma)](detail::Node& self) {
                          detail::Node& X = *self.inputs[0];
                          const double dn = static_cast<double>(n);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* g = self.grad.data() + r * n;
                            const double* y = self.value.data() + r * n;
                            double mg = 0.0, mgy = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              mg += g[j];
                              mgy += g[j] * y[j];
                            }
                            mg /= dn;
                            mgy /= dn;
                            for (std::size_t j = 0; j < n; ++j) X.grad[r * n + j] += inv[r] * (g[j] - mg - y[j] * mgy);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Indexing and layout

// Row lookup: table [R, C], one row per index -> [indices.size(), C].
inline Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  if (table.ndim() != 2) detail::shape_fail("gather_rows", "table must be 2-D, got " + shape_str(table.shape()));
  if (indices.empty()) detail::shape_fail("gather_rows", "empty index list");
  const std::size_t rows = table.shape()[0], cols = table.shape()[1];
  std::vector<double> out(indices.size() * cols);
  const auto tv = table.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] < 0 || static_cast<std::size_t>(indices[r]) >= rows)
      detail::shape_fail("gather_rows", "index " + std::to_string(indices[r]) + " out of range for " +
                                            std::to_string(rows) + " rows");
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(indices[r]) * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return detail::record("gather_rows", Shape{indices.size(), cols}, std::move(out), {table},
                        [cols, idx = std::move(idx)](detail::Node& self) {
                          detail::Node& T = *self.inputs[0];
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                              T.grad[static_cast<std::size_t>(idx[r]) * cols + c] += self.grad[r * cols + c];
                        });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (fpdlab::numel(shape) != x.numel())
    detail::shape_fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::record("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    detail::Node& X = *self.inputs[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) X.grad[k] += self.grad[k];
  });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  auto bc = detail::broadcast("broadcast", x.shape(), shape);
  if (bc.out != shape)
    detail::shape_fail("broadcast", "cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  const auto xv = x.values();
  std::vector<double> out(fpdlab::numel(shape));
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = xv[bc.a_index.empty() ? k : bc.a_index[k]];
  return detail::record("broadcast", shape, std::move(out), {x}, [idx = std::move(bc.a_index)](detail::Node& self) {
    detail::Node& X = *self.inputs[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) X.grad[idx.empty() ? k : idx[k]] += self.grad[k];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) detail::shape_fail("concat", "no inputs");
  const std::size_t ax = static_cast<std::size_t>(parts[0].normalize_axis(axis));
  Shape out_shape = parts[0].shape();
  std::vector<std::size_t> extents;
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size())
      detail::shape_fail("concat", "rank mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    for (std::size_t d = 0; d < probe.size(); ++d)
      if (d != ax && probe[d] != parts[0].shape()[d])
        detail::shape_fail("concat", "extent mismatch off the concat axis: " + shape_str(parts[0].shape()) + " vs " +
                                         shape_str(p.shape()));
    extents.push_back(probe[ax]);
    out_shape[ax] += probe[ax];
  }
  const auto sp = detail::split_axis(out_shape, ax);
  std::vector<double> out(fpdlab::numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto pv = parts[q].values();
    const std::size_t e = extents[q];
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * e * sp.inner), e * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + offset) * sp.inner));
    offset += e;
  }
  return detail::record_many("concat", std::move(out_shape), std::move(out), parts,
                             [sp, extents](detail::Node& self) {
                               std::size_t off = 0;
                               for (std::size_t q = 0; q < self.inputs.size(); ++q) {
                                 detail::Node& P = *self.inputs[q];
                                 const std::size_t e = extents[q];
                                 if (P.requires_grad)
                                   for (std::size_t o = 0; o < sp.outer; ++o)
                                     for (std::size_t j = 0; j < e * sp.inner; ++j)
                                       P.grad[o * e * sp.inner + j] += self.grad[(o * sp.extent + off) * sp.inner + j];
                                 off += e;
                               }
                             });
}

// Half-open range [begin, end) along one axis.
inline Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = static_cast<std::size_t>(x.normalize_axis(axis));
  const auto sp = detail::split_axis(x.shape(), ax);
  if (begin >= end || end > sp.extent)
    detail::shape_fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") invalid for extent " + std::to_string(sp.extent) + " of " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t e = end - begin;
  std::vector<double> out(fpdlab::numel(out_shape));
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + begin) * sp.inner), e * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * e * sp.inner));
  return detail::record("slice", std::move(out_shape), std::move(out), {x}, [sp, e, begin](detail::Node& self) {
    detail::Node& X = *self.inputs[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < e * sp.inner; ++j)
        X.grad[(o * sp.extent + begin) * sp.inner + j] += self.grad[o * e * sp.inner + j];
  });
}

// ---------------------------------------------------------------------------
// Tape traversal

// Topologically ordered view of the nodes reachable from a root that carry
// gradients. Inputs always precede the nodes that consume them.
class Graph {
 public:
  static Graph trace(const Tensor& root) {
    Graph g;
    if (!root.requires_grad()) return g;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS; tapes can be deep.
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.order_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  std::span<detail::Node* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<detail::Node*> order_;
};

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// loss. Interior gradients are reset first, so repeated calls add exactly one
// more copy of the gradient to each leaf.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) detail::shape_fail("backward", "loss must be scalar, got shape " + shape_str(loss.shape()));
  const Graph g = Graph::trace(loss);
  if (g.size() == 0) return;
  for (detail::Node* n : g.nodes())
    if (!n->is_leaf()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  loss.node()->grad[0] += 1.0;
  const std::string& corrupted = detail::corrupted_op();
  const auto order = g.nodes();
  for (std::size_t k = order.size(); k-- > 0;) {
    detail::Node* n = order[k];
    if (n->is_leaf()) continue;
    if (!corrupted.empty() && n->op == corrupted)
      for (double& v : n->grad) v *= 1.5;
    n->backward(*n);
  }
}

}  // namespace fpdlab
