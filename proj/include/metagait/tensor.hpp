#ifndef METAGAIT_TENSOR_HPP
#define METAGAIT_TENSOR_HPP

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Values are immutable once an op has produced them; optimizers mutate
// parameter buffers between traces via mutable_values(). Recording is
// thread-local: ops append to the innermost live Tape of the calling
// thread, so forward evaluation without a Tape is pure and safe to run
// concurrently over shared weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metagait {

using Shape = std::vector<std::int64_t>;

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

inline void check_valid_shape(const Shape& s, const char* who) {
  for (std::int64_t e : s)
    check(e > 0, std::string(who) + ": extents must be positive, got " + shape_str(s));
}

class Tensor;
class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_parameter = false;
  std::uint64_t id = 0;  // creation order within the recording trace
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // scatters node.grad into parents

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

inline Tape*& tape_slot() {
  thread_local Tape* slot = nullptr;
  return slot;
}

// Row-major strides of `shape`, with 0 on axes broadcast up to `out`.
// Shapes are right-aligned; missing leading axes broadcast like extent 1.
inline std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t stride = 1;
  const std::size_t off = out.size() - shape.size();
  for (std::size_t k = shape.size(); k-- > 0;) {
    if (shape[k] != 1) strides[off + k] = stride;
    stride *= shape[k];
  }
  return strides;
}

// Odometer walk over `shape`, tracking linear offsets into two broadcast inputs.
template <class Fn>
inline void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                               const std::vector<std::int64_t>& sb, Fn&& fn) {
  const std::size_t rank = out.size();
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t ia = 0, ib = 0;
  const std::int64_t total = shape_size(out);
  for (std::int64_t lin = 0;; ++lin) {
    fn(lin, ia, ib);
    if (lin + 1 == total) break;
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      ia += sa[k];
      ib += sb[k];
      if (idx[k] < out[k]) break;
      ia -= sa[k] * out[k];
      ib -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s) { return full(s, 0.0); }

  static Tensor full(const Shape& s, double v) {
    check_valid_shape(s, "Tensor::full");
    auto n = std::make_shared<detail::Node>();
    n->shape = s;
    n->value.assign(shape_size(s), v);
    return Tensor(std::move(n));
  }

  static Tensor from_values(const Shape& s, std::vector<double> v) {
    check_valid_shape(s, "Tensor::from_values");
    check(static_cast<std::int64_t>(v.size()) == shape_size(s),
          "Tensor::from_values: value count " + std::to_string(v.size()) +
              " does not match shape " + shape_str(s));
    auto n = std::make_shared<detail::Node>();
    n->shape = s;
    n->value = std::move(v);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return from_values({1}, {v}); }

  static Tensor parameter(const Shape& s, std::vector<double> v) {
    Tensor t = from_values(s, std::move(v));
    t.n_->requires_grad = true;
    t.n_->is_parameter = true;
    t.n_->ensure_grad();
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(n_->value.size()); }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t extent(int axis) const { return n_->shape[static_cast<std::size_t>(axis)]; }

  const std::vector<double>& values() const { return n_->value; }

  double scalar_value() const {
    check(size() == 1, "scalar_value: tensor has " + std::to_string(size()) + " elements");
    return n_->value[0];
  }

  double at(std::initializer_list<std::int64_t> idx) const {
    check(idx.size() == n_->shape.size(), "at: index rank mismatch");
    std::int64_t lin = 0;
    std::size_t k = 0;
    for (std::int64_t i : idx) {
      check(i >= 0 && i < n_->shape[k], "at: index out of range");
      lin = lin * n_->shape[k] + i;
      ++k;
    }
    return n_->value[static_cast<std::size_t>(lin)];
  }

  bool requires_grad() const { return n_->requires_grad; }
  bool is_parameter() const { return n_->is_parameter; }
  std::uint64_t node_id() const { return n_->id; }

  const std::vector<double>& grad() const {
    check(!n_->grad.empty(), "grad: no gradient buffer on this tensor");
    return n_->grad;
  }

  void zero_grad() {
    n_->ensure_grad();
    std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  // For optimizers and initialization only; never while a trace holding
  // this tensor is still live.
  std::vector<double>& mutable_values() { return n_->value; }

  detail::NodePtr node() const { return n_; }

  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}

 private:
  detail::NodePtr n_;
};

// Ordered op trace. Creation order is topological order, so backward
// walks records exactly once in reverse. One backward per tape.
class Tape {
 public:
  Tape() : previous_(detail::tape_slot()) { detail::tape_slot() = this; }
  ~Tape() { detail::tape_slot() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const detail::NodePtr& n) {
    n->id = ++next_id_;
    records_.push_back(n);
  }

  std::size_t num_records() const { return records_.size(); }

  void backward(const Tensor& loss) {
    check(loss.size() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    check(loss.requires_grad(),
          "backward: loss is not connected to any differentiable parameter");
    check(!consumed_, "backward: tape already consumed; build a fresh trace");
    consumed_ = true;
    auto seed = loss.node();
    seed->ensure_grad();
    seed->grad[0] += 1.0;
    for (std::size_t i = records_.size(); i-- > 0;) {
      detail::Node& n = *records_[i];
      if (!n.grad.empty() && n.backprop) n.backprop(n);
    }
  }

  static Tape* current() { return detail::tape_slot(); }

 private:
  std::vector<detail::NodePtr> records_;
  Tape* previous_ = nullptr;
  std::uint64_t next_id_ = 0;
  bool consumed_ = false;
};

inline void backward(const Tensor& loss) {
  check(Tape::current() != nullptr, "backward: no active tape on this thread");
  Tape::current()->backward(loss);
}

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                          std::vector<NodePtr> parents, std::function<void(Node&)> backprop,
                          bool tracked) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (tracked) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
    Tape::current()->record(n);
  }
  return Tensor(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <class F, class DF>
Tensor unary_op(const Tensor& x, const char* name, F f, DF df) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const bool tracked = tracking({&x});
  NodePtr xn = x.node();
  return make_result(
      x.shape(), std::move(out), name, {xn},
      [xn, df](Node& n) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          xn->grad[i] += n.grad[i] * df(xn->value[i], n.value[i]);
      },
      tracked);
}

}  // namespace detail

inline constexpr double kLeakySlope = 0.01;

inline Tensor leaky_relu(const Tensor& x) {
  return detail::unary_op(
      x, "leaky_relu", [](double v) { return v >= 0.0 ? v : kLeakySlope * v; },
      [](double v, double) { return v >= 0.0 ? 1.0 : kLeakySlope; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values()) check(v > 0.0, "log: non-positive input");
  return detail::unary_op(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  for (double v : x.values()) check(v >= 0.0, "sqrt: negative input");
  return detail::unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor clamp_min(const Tensor& x, double floor) {
  return detail::unary_op(
      x, "clamp_min", [floor](double v) { return v > floor ? v : floor; },
      [floor](double v, double) { return v >= floor ? 1.0 : 0.0; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with extent-1 broadcasting (right-aligned)

namespace detail {

inline Shape broadcast_result_shape(const Shape& a, const Shape& b, const char* name) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::int64_t ea = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
    const std::int64_t eb = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
    check(ea == eb || ea == 1 || eb == 1,
          std::string(name) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
              " are not broadcastable");
    out[k] = std::max(ea, eb);
  }
  return out;
}

// f(a,b) -> y; dfa(a,b,y) = dy/da; dfb(a,b,y) = dy/db
template <class F, class DFA, class DFB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DFA dfa, DFB dfb) {
  const Shape out_shape = broadcast_result_shape(a.shape(), b.shape(), name);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(shape_size(out_shape)));
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb, [&](std::int64_t lin, std::int64_t ia, std::int64_t ib) {
      out[static_cast<std::size_t>(lin)] = f(av[static_cast<std::size_t>(ia)],
                                             bv[static_cast<std::size_t>(ib)]);
    });
  }
  const bool tracked = tracking({&a, &b});
  NodePtr an = a.node(), bn = b.node();
  return make_result(
      out_shape, std::move(out), name, {an, bn},
      [an, bn, sa, sb, out_shape, dfa, dfb](Node& n) {
        an->ensure_grad();
        bn->ensure_grad();
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::int64_t lin, std::int64_t ia, std::int64_t ib) {
                             const double g = n.grad[static_cast<std::size_t>(lin)];
                             const double va = an->value[static_cast<std::size_t>(ia)];
                             const double vb = bn->value[static_cast<std::size_t>(ib)];
                             const double y = n.value[static_cast<std::size_t>(lin)];
                             an->grad[static_cast<std::size_t>(ia)] += g * dfa(va, vb, y);
                             bn->grad[static_cast<std::size_t>(ib)] += g * dfb(va, vb, y);
                           });
      },
      tracked);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

// Elementwise a^b. Base must be strictly positive (callers clamp first).
inline Tensor pow(const Tensor& a, const Tensor& b) {
  for (double v : a.values()) check(v > 0.0, "pow: base must be strictly positive");
  return detail::binary_op(
      a, b, "pow", [](double x, double y) { return std::pow(x, y); },
      [](double x, double y, double z) { return y * z / x; },
      [](double x, double, double z) { return z * std::log(x); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Matrix product / fully connected layer

// A (M,K) times B (K,N) -> (M,N); B may be rank-1 (K) -> (M).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2, "matmul: left operand must be rank-2, got " + shape_str(a.shape()));
  check(b.rank() == 1 || b.rank() == 2,
        "matmul: right operand must be rank-1 or rank-2, got " + shape_str(b.shape()));
  const std::int64_t m = a.extent(0), k = a.extent(1);
  const std::int64_t kb = b.extent(0);
  const std::int64_t ncols = b.rank() == 2 ? b.extent(1) : 1;
  check(k == kb, "matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(m * ncols), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t t = 0; t < k; ++t) {
      const double aval = av[static_cast<std::size_t>(i * k + t)];
      if (aval == 0.0) continue;
      const double* brow = bv.data() + t * ncols;
      double* orow = out.data() + i * ncols;
      for (std::int64_t j = 0; j < ncols; ++j) orow[j] += aval * brow[j];
    }
  Shape out_shape = b.rank() == 2 ? Shape{m, ncols} : Shape{m};
  const bool tracked = detail::tracking({&a, &b});
  detail::NodePtr an = a.node(), bn = b.node();
  return detail::make_result(
      std::move(out_shape), std::move(out), "matmul", {an, bn},
      [an, bn, m, k, ncols](detail::Node& n) {
        an->ensure_grad();
        bn->ensure_grad();
        // dA = G B^T ; dB = A^T G
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < ncols; ++j) {
            const double g = n.grad[static_cast<std::size_t>(i * ncols + j)];
            if (g == 0.0) continue;
            for (std::int64_t t = 0; t < k; ++t) {
              an->grad[static_cast<std::size_t>(i * k + t)] +=
                  g * bn->value[static_cast<std::size_t>(t * ncols + j)];
              bn->grad[static_cast<std::size_t>(t * ncols + j)] +=
                  g * an->value[static_cast<std::size_t>(i * k + t)];
            }
          }
      },
      tracked);
}

// Fully connected layer without bias: x (C_in) or (C_in,M) columns, W (C_out,C_in).
inline Tensor dense(const Tensor& x, const Tensor& w) {
  check(w.rank() == 2, "dense: weight must be rank-2, got " + shape_str(w.shape()));
  check(x.rank() == 1 || x.rank() == 2,
        "dense: input must be rank-1 or rank-2, got " + shape_str(x.shape()));
  check(w.extent(1) == x.extent(0),
        "dense: weight " + shape_str(w.shape()) + " does not accept input " +
            shape_str(x.shape()));
  return matmul(w, x);
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), stride 1, zero same-padding, odd kernels

// x (C_in,L) or (C_in,B,L); kernel (C_out,C_in,K) with K odd.
inline Tensor conv1d(const Tensor& x, const Tensor& kernel) {
  check(kernel.rank() == 3, "conv1d: kernel must be (C_out,C_in,K), got " +
                                shape_str(kernel.shape()));
  check(x.rank() == 2 || x.rank() == 3,
        "conv1d: input must be (C_in,L) or (C_in,B,L), got " + shape_str(x.shape()));
  const bool batched = x.rank() == 3;
  const std::int64_t cin = x.extent(0);
  const std::int64_t nb = batched ? x.extent(1) : 1;
  const std::int64_t len = batched ? x.extent(2) : x.extent(1);
  const std::int64_t cout = kernel.extent(0);
  const std::int64_t kk = kernel.extent(2);
  check(kernel.extent(1) == cin, "conv1d: kernel expects " + std::to_string(kernel.extent(1)) +
                                     " input channels, input has " + std::to_string(cin));
  check(kk % 2 == 1, "conv1d: kernel extent must be odd, got " + std::to_string(kk));
  const std::int64_t half = kk / 2;
  const auto& xv = x.values();
  const auto& kv = kernel.values();
  std::vector<double> out(static_cast<std::size_t>(cout * nb * len), 0.0);
  for (std::int64_t co = 0; co < cout; ++co)
    for (std::int64_t b = 0; b < nb; ++b)
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const double* xrow = xv.data() + (ci * nb + b) * len;
        const double* krow = kv.data() + (co * cin + ci) * kk;
        double* orow = out.data() + (co * nb + b) * len;
        for (std::int64_t i = 0; i < len; ++i) {
          const std::int64_t lo = std::max<std::int64_t>(0, half - i);
          const std::int64_t hi = std::min<std::int64_t>(kk, len + half - i);
          double acc = 0.0;
          for (std::int64_t t = lo; t < hi; ++t) acc += xrow[i + t - half] * krow[t];
          orow[i] += acc;
        }
      }
  Shape out_shape = batched ? Shape{cout, nb, len} : Shape{cout, len};
  const bool tracked = detail::tracking({&x, &kernel});
  detail::NodePtr xn = x.node(), kn = kernel.node();
  return detail::make_result(
      std::move(out_shape), std::move(out), "conv1d", {xn, kn},
      [xn, kn, cin, cout, nb, len, kk, half](detail::Node& n) {
        xn->ensure_grad();
        kn->ensure_grad();
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t b = 0; b < nb; ++b)
            for (std::int64_t ci = 0; ci < cin; ++ci) {
              const double* xrow = xn->value.data() + (ci * nb + b) * len;
              const double* krow = kn->value.data() + (co * cin + ci) * kk;
              double* dxrow = xn->grad.data() + (ci * nb + b) * len;
              double* dkrow = kn->grad.data() + (co * cin + ci) * kk;
              const double* grow = n.grad.data() + (co * nb + b) * len;
              for (std::int64_t i = 0; i < len; ++i) {
                const double g = grow[i];
                if (g == 0.0) continue;
                const std::int64_t lo = std::max<std::int64_t>(0, half - i);
                const std::int64_t hi = std::min<std::int64_t>(kk, len + half - i);
                for (std::int64_t t = lo; t < hi; ++t) {
                  dxrow[i + t - half] += g * krow[t];
                  dkrow[t] += g * xrow[i + t - half];
                }
              }
            }
      },
      tracked);
}

// x (C_in,H,W) or (C_in,B,H,W); kernel (C_out,C_in,KH,KW) with odd extents.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel) {
  check(kernel.rank() == 4, "conv2d: kernel must be (C_out,C_in,KH,KW), got " +
                                shape_str(kernel.shape()));
  check(x.rank() == 3 || x.rank() == 4,
        "conv2d: input must be (C_in,H,W) or (C_in,B,H,W), got " + shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  const std::int64_t cin = x.extent(0);
  const std::int64_t nb = batched ? x.extent(1) : 1;
  const std::int64_t h = batched ? x.extent(2) : x.extent(1);
  const std::int64_t w = batched ? x.extent(3) : x.extent(2);
  const std::int64_t cout = kernel.extent(0);
  const std::int64_t kh = kernel.extent(2);
  const std::int64_t kw = kernel.extent(3);
  check(kernel.extent(1) == cin, "conv2d: kernel expects " + std::to_string(kernel.extent(1)) +
                                     " input channels, input has " + std::to_string(cin));
  check(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got " +
                                        std::to_string(kh) + "x" + std::to_string(kw));
  const std::int64_t hh = kh / 2, hw = kw / 2;
  const auto& xv = x.values();
  const auto& kv = kernel.values();
  std::vector<double> out(static_cast<std::size_t>(cout * nb * h * w), 0.0);
  for (std::int64_t co = 0; co < cout; ++co)
    for (std::int64_t b = 0; b < nb; ++b)
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const double* xpl = xv.data() + (ci * nb + b) * h * w;
        const double* kpl = kv.data() + (co * cin + ci) * kh * kw;
        double* opl = out.data() + (co * nb + b) * h * w;
        for (std::int64_t r = 0; r < h; ++r) {
          const std::int64_t rlo = std::max<std::int64_t>(0, hh - r);
          const std::int64_t rhi = std::min<std::int64_t>(kh, h + hh - r);
          for (std::int64_t c = 0; c < w; ++c) {
            const std::int64_t clo = std::max<std::int64_t>(0, hw - c);
            const std::int64_t chi = std::min<std::int64_t>(kw, w + hw - c);
            double acc = 0.0;
            for (std::int64_t u = rlo; u < rhi; ++u) {
              const double* xr = xpl + (r + u - hh) * w;
              const double* kr = kpl + u * kw;
              for (std::int64_t v = clo; v < chi; ++v) acc += xr[c + v - hw] * kr[v];
            }
            opl[r * w + c] += acc;
          }
        }
      }
  Shape out_shape = batched ? Shape{cout, nb, h, w} : Shape{cout, h, w};
  const bool tracked = detail::tracking({&x, &kernel});
  detail::NodePtr xn = x.node(), kn = kernel.node();
  return detail::make_result(
      std::move(out_shape), std::move(out), "conv2d", {xn, kn},
      [xn, kn, cin, cout, nb, h, w, kh, kw, hh, hw](detail::Node& n) {
        xn->ensure_grad();
        kn->ensure_grad();
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t b = 0; b < nb; ++b)
            for (std::int64_t ci = 0; ci < cin; ++ci) {
              const double* xpl = xn->value.data() + (ci * nb + b) * h * w;
              double* dxpl = xn->grad.data() + (ci * nb + b) * h * w;
              const double* kpl = kn->value.data() + (co * cin + ci) * kh * kw;
              double* dkpl = kn->grad.data() + (co * cin + ci) * kh * kw;
              const double* gpl = n.grad.data() + (co * nb + b) * h * w;
              for (std::int64_t r = 0; r < h; ++r) {
                const std::int64_t rlo = std::max<std::int64_t>(0, hh - r);
                const std::int64_t rhi = std::min<std::int64_t>(kh, h + hh - r);
                for (std::int64_t c = 0; c < w; ++c) {
                  const double g = gpl[r * w + c];
                  if (g == 0.0) continue;
                  const std::int64_t clo = std::max<std::int64_t>(0, hw - c);
                  const std::int64_t chi = std::min<std::int64_t>(kw, w + hw - c);
                  for (std::int64_t u = rlo; u < rhi; ++u) {
                    const double* xr = xpl + (r + u - hh) * w;
                    double* dxr = dxpl + (r + u - hh) * w;
                    const double* kr = kpl + u * kw;
                    double* dkr = dkpl + u * kw;
                    for (std::int64_t v = clo; v < chi; ++v) {
                      dxr[c + v - hw] += g * kr[v];
                      dkr[v] += g * xr[c + v - hw];
                    }
                  }
                }
              }
            }
      },
      tracked);
}

// ---------------------------------------------------------------------------
// Reductions (reduced axes keep extent 1)

enum class ReduceOp { Mean, Max, Sum };

inline Tensor reduce(const Tensor& x, ReduceOp op, std::vector<int> axes) {
  const int rank = x.rank();
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (int a : axes) check(a >= 0 && a < rank, "reduce: axis " + std::to_string(a) +
                                                   " out of range for " + shape_str(x.shape()));
  if (axes.empty()) {
    // Identity reduction.
    const bool tracked = detail::tracking({&x});
    detail::NodePtr xn = x.node();
    return detail::make_result(
        x.shape(), x.values(), "reduce_identity", {xn},
        [xn](detail::Node& n) {
          xn->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        },
        tracked);
  }

  Shape out_shape = x.shape();
  std::int64_t count = 1;
  for (int a : axes) {
    count *= out_shape[static_cast<std::size_t>(a)];
    out_shape[static_cast<std::size_t>(a)] = 1;
  }
  const std::int64_t out_n = shape_size(out_shape);
  const auto out_strides = detail::broadcast_strides(out_shape, x.shape());
  const auto in_strides = detail::broadcast_strides(x.shape(), x.shape());
  const auto& xv = x.values();

  std::vector<double> out;
  std::vector<std::int64_t> argmax;
  if (op == ReduceOp::Max) {
    out.assign(static_cast<std::size_t>(out_n), -std::numeric_limits<double>::infinity());
    argmax.assign(static_cast<std::size_t>(out_n), -1);
    detail::for_each_broadcast(x.shape(), in_strides, out_strides,
                               [&](std::int64_t, std::int64_t ix, std::int64_t io) {
                                 const double v = xv[static_cast<std::size_t>(ix)];
                                 if (v > out[static_cast<std::size_t>(io)]) {
                                   out[static_cast<std::size_t>(io)] = v;
                                   argmax[static_cast<std::size_t>(io)] = ix;
                                 }
                               });
  } else {
    out.assign(static_cast<std::size_t>(out_n), 0.0);
    detail::for_each_broadcast(x.shape(), in_strides, out_strides,
                               [&](std::int64_t, std::int64_t ix, std::int64_t io) {
                                 out[static_cast<std::size_t>(io)] +=
                                     xv[static_cast<std::size_t>(ix)];
                               });
    if (op == ReduceOp::Mean)
      for (double& v : out) v /= static_cast<double>(count);
  }

  const bool tracked = detail::tracking({&x});
  detail::NodePtr xn = x.node();
  const char* name = op == ReduceOp::Mean ? "reduce_mean"
                     : op == ReduceOp::Max ? "reduce_max"
                                           : "reduce_sum";
  return detail::make_result(
      out_shape, std::move(out), name, {xn},
      [xn, op, count, argmax = std::move(argmax), in_strides, out_strides,
       xshape = x.shape()](detail::Node& n) {
        xn->ensure_grad();
        if (op == ReduceOp::Max) {
          for (std::size_t o = 0; o < n.grad.size(); ++o)
            xn->grad[static_cast<std::size_t>(argmax[o])] += n.grad[o];
        } else {
          const double inv = op == ReduceOp::Mean ? 1.0 / static_cast<double>(count) : 1.0;
          detail::for_each_broadcast(xshape, in_strides, out_strides,
                                     [&](std::int64_t, std::int64_t ix, std::int64_t io) {
                                       xn->grad[static_cast<std::size_t>(ix)] +=
                                           n.grad[static_cast<std::size_t>(io)] * inv;
                                     });
        }
      },
      tracked);
}

inline Tensor reduce_mean(const Tensor& x, std::vector<int> axes) {
  return reduce(x, ReduceOp::Mean, std::move(axes));
}
inline Tensor reduce_max(const Tensor& x, std::vector<int> axes) {
  return reduce(x, ReduceOp::Max, std::move(axes));
}
inline Tensor reduce_sum(const Tensor& x, std::vector<int> axes) {
  return reduce(x, ReduceOp::Sum, std::move(axes));
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor reshape(const Tensor& x, const Shape& target) {
  check_valid_shape(target, "reshape");
  check(shape_size(target) == x.size(), "reshape: cannot view " + shape_str(x.shape()) +
                                            " as " + shape_str(target));
  const bool tracked = detail::tracking({&x});
  detail::NodePtr xn = x.node();
  return detail::make_result(
      target, x.values(), "reshape", {xn},
      [xn](detail::Node& n) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
      },
      tracked);
}

inline Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  check(axis >= 0 && axis < x.rank(), "slice: axis out of range");
  const std::int64_t extent = x.extent(axis);
  check(start >= 0 && len > 0 && start + len <= extent,
        "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
            ") out of bounds for extent " + std::to_string(extent));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int k = 0; k < axis; ++k) outer *= x.extent(k);
  for (int k = axis + 1; k < x.rank(); ++k) inner *= x.extent(k);
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + (o * extent + start) * inner, len * inner,
                out.data() + o * len * inner);
  const bool tracked = detail::tracking({&x});
  detail::NodePtr xn = x.node();
  return detail::make_result(
      std::move(out_shape), std::move(out), "slice", {xn},
      [xn, outer, inner, len, extent, start](detail::Node& n) {
        xn->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* g = n.grad.data() + o * len * inner;
          double* dx = xn->grad.data() + (o * extent + start) * inner;
          for (std::int64_t i = 0; i < len * inner; ++i) dx[i] += g[i];
        }
      },
      tracked);
}

inline Tensor stack0(std::span<const Tensor> parts) {
  check(!parts.empty(), "stack0: no tensors given");
  const Shape& base = parts[0].shape();
  for (const Tensor& t : parts)
    check(t.shape() == base, "stack0: mismatched shapes " + shape_str(base) + " vs " +
                                 shape_str(t.shape()));
  const std::int64_t piece = shape_size(base);
  Shape out_shape;
  out_shape.push_back(static_cast<std::int64_t>(parts.size()));
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  std::vector<double> out(static_cast<std::size_t>(piece * parts.size()));
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy_n(parts[i].values().data(), piece, out.data() + piece * i);
  bool any = false;
  std::vector<detail::NodePtr> ps;
  ps.reserve(parts.size());
  for (const Tensor& t : parts) {
    any = any || t.requires_grad();
    ps.push_back(t.node());
  }
  const bool tracked = Tape::current() != nullptr && any;
  return detail::make_result(
      std::move(out_shape), std::move(out), "stack0", ps,
      [ps, piece](detail::Node& n) {
        for (std::size_t i = 0; i < ps.size(); ++i) {
          ps[i]->ensure_grad();
          const double* g = n.grad.data() + piece * i;
          for (std::int64_t j = 0; j < piece; ++j) ps[i]->grad[j] += g[j];
        }
      },
      tracked);
}

inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int rank = x.rank();
  check(static_cast<int>(perm.size()) == rank, "permute: axis list must cover all axes");
  std::vector<bool> seen(perm.size(), false);
  for (int a : perm) {
    check(a >= 0 && a < rank && !seen[static_cast<std::size_t>(a)], "permute: invalid axis list");
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k)
    out_shape[k] = x.extent(perm[k]);
  // in_strides over x, walked in output order
  std::vector<std::int64_t> xstr(static_cast<std::size_t>(rank));
  std::int64_t s = 1;
  for (int k = rank; k-- > 0;) {
    xstr[static_cast<std::size_t>(k)] = s;
    s *= x.extent(k);
  }
  std::vector<std::int64_t> walk(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k)
    walk[k] = xstr[static_cast<std::size_t>(perm[k])];
  const auto zero = std::vector<std::int64_t>(perm.size(), 0);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  detail::for_each_broadcast(out_shape, walk, zero,
                             [&](std::int64_t lin, std::int64_t ix, std::int64_t) {
                               out[static_cast<std::size_t>(lin)] =
                                   xv[static_cast<std::size_t>(ix)];
                             });
  const bool tracked = detail::tracking({&x});
  detail::NodePtr xn = x.node();
  return detail::make_result(
      std::move(out_shape), std::move(out), "permute", {xn},
      [xn, walk, zero, oshape = Shape(out_shape)](detail::Node& n) {
        xn->ensure_grad();
        detail::for_each_broadcast(n.shape, walk, zero,
                                   [&](std::int64_t lin, std::int64_t ix, std::int64_t) {
                                     xn->grad[static_cast<std::size_t>(ix)] +=
                                         n.grad[static_cast<std::size_t>(lin)];
                                   });
      },
      tracked);
}

// 2x2 stride-2 max pooling over the trailing two axes of (C,B,H,W).
// Odd trailing rows/columns are dropped.
inline Tensor max_pool2x2(const Tensor& x) {
  check(x.rank() == 4, "max_pool2x2: input must be (C,B,H,W), got " + shape_str(x.shape()));
  const std::int64_t c = x.extent(0), b = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::int64_t ho = h / 2, wo = w / 2;
  check(ho > 0 && wo > 0, "max_pool2x2: spatial extents too small in " + shape_str(x.shape()));
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c * b * ho * wo));
  std::vector<std::int64_t> argmax(out.size());
  for (std::int64_t cb = 0; cb < c * b; ++cb) {
    const double* xpl = xv.data() + cb * h * w;
    double* opl = out.data() + cb * ho * wo;
    std::int64_t* apl = argmax.data() + cb * ho * wo;
    for (std::int64_t i = 0; i < ho; ++i)
      for (std::int64_t j = 0; j < wo; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t besti = -1;
        for (std::int64_t u = 0; u < 2; ++u)
          for (std::int64_t v = 0; v < 2; ++v) {
            const std::int64_t lin = (2 * i + u) * w + (2 * j + v);
            if (xpl[lin] > best) {
              best = xpl[lin];
              besti = cb * h * w + lin;
            }
          }
        opl[i * wo + j] = best;
        apl[i * wo + j] = besti;
      }
  }
  const bool tracked = detail::tracking({&x});
  detail::NodePtr xn = x.node();
  return detail::make_result(
      Shape{c, b, ho, wo}, std::move(out), "max_pool2x2", {xn},
      [xn, argmax = std::move(argmax)](detail::Node& n) {
        xn->ensure_grad();
        for (std::size_t o = 0; o < n.grad.size(); ++o)
          xn->grad[static_cast<std::size_t>(argmax[o])] += n.grad[o];
      },
      tracked);
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckOptions {
  double eps = 1e-5;
  // <0 checks every entry; otherwise a seeded subsample per parameter.
  std::int64_t max_entries_per_param = -1;
  std::uint64_t sample_seed = 17;
};

// Max over checked parameter entries of |analytic - numeric| /
// max(1e-8, |analytic| + |numeric|), central differences.
// Clears parameter gradients. Throws if two forward passes disagree bitwise.
inline double grad_check(const std::function<Tensor()>& program, std::span<const Tensor> params,
                         const GradCheckOptions& opt = {}) {
  // Determinism probe: two untracked forward passes must agree bitwise.
  const std::vector<double> run1 = program().values();
  const std::vector<double> run2 = program().values();
  check(run1.size() == run2.size() &&
            std::equal(run1.begin(), run1.end(), run2.begin(),
                       [](double a, double b) {
                         return std::memcmp(&a, &b, sizeof(double)) == 0;
                       }),
        "grad_check: program is not deterministic");

  std::vector<std::vector<double>> analytic;
  {
    for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
    Tape tape;
    Tensor loss = program();
    check(loss.size() == 1, "grad_check: program must produce a scalar");
    tape.backward(loss);
    for (const Tensor& p : params) analytic.push_back(p.grad());
  }

  double max_rel = 0.0;
  std::mt19937_64 rng(opt.sample_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = const_cast<Tensor&>(params[pi]);
    const std::int64_t n = p.size();
    std::vector<std::int64_t> entries;
    if (opt.max_entries_per_param < 0 || n <= opt.max_entries_per_param) {
      entries.resize(static_cast<std::size_t>(n));
      std::iota(entries.begin(), entries.end(), 0);
    } else {
      std::vector<std::int64_t> all(static_cast<std::size_t>(n));
      std::iota(all.begin(), all.end(), 0);
      for (std::int64_t k = 0; k < opt.max_entries_per_param; ++k) {
        std::uniform_int_distribution<std::int64_t> pick(k, n - 1);
        std::swap(all[static_cast<std::size_t>(k)], all[static_cast<std::size_t>(pick(rng))]);
      }
      entries.assign(all.begin(), all.begin() + opt.max_entries_per_param);
    }
    for (std::int64_t e : entries) {
      double& w = p.mutable_values()[static_cast<std::size_t>(e)];
      const double saved = w;
      w = saved + opt.eps;
      const double fplus = program().scalar_value();
      w = saved - opt.eps;
      const double fminus = program().scalar_value();
      w = saved;
      const double numeric = (fplus - fminus) / (2.0 * opt.eps);
      const double a = analytic[pi][static_cast<std::size_t>(e)];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace metagait

#endif  // METAGAIT_TENSOR_HPP
