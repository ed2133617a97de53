#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dspk/errors.hpp"
#include "dspk/tensor.hpp"

namespace dspk {

// ---------------------------------------------------------------------------
// Shared numeric kernels. The tape ops and the fast inference paths call the
// same routines, so graph and non-graph evaluations agree bit for bit.
// ---------------------------------------------------------------------------
namespace kernels {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

// Inverse of softplus, stable for large y.
inline double softplus_inv(double y) {
  if (y > 35.0) return y;
  return std::log(std::expm1(y));
}

// C[m x n] = A[m x k] * B[k x n], accumulating into C (caller zeros/initializes).
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t m,
                       std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      double av = ai[l];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// dA[m x k] += dC[m x n] * B^T;  dB[k x n] += A^T * dC
inline void matmul_backward(const double* a, const double* b, const double* dc, double* da,
                            double* db, std::size_t m, std::size_t k, std::size_t n) {
  if (da) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        const double* dci = dc + i * n;
        const double* bl = b + l * n;
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += dci[j] * bl[j];
        da[i * k + l] += acc;
      }
  }
  if (db) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        double av = a[i * k + l];
        const double* dci = dc + i * n;
        double* dbl = db + l * n;
        for (std::size_t j = 0; j < n; ++j) dbl[j] += av * dci[j];
      }
  }
}

// Zero-padded "same" 1-D convolution: out[co][t] = b[co] + sum_{ci,k} w[co][ci][k] * x[ci][t+k-pad].
// Loops are arranged as shifted axpys over t so the inner loop is contiguous.
inline void conv1d_forward(const double* x, std::size_t cin, std::size_t T, const double* w,
                           std::size_t cout, std::size_t kw, const double* bias, double* out) {
  std::size_t pad = (kw - 1) / 2;
  for (std::size_t co = 0; co < cout; ++co) {
    double* o = out + co * T;
    double bv = bias ? bias[co] : 0.0;
    for (std::size_t t = 0; t < T; ++t) o[t] = bv;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xc = x + ci * T;
      const double* wrow = w + (co * cin + ci) * kw;
      for (std::size_t k = 0; k < kw; ++k) {
        double wv = wrow[k];
        // x index j = t + k - pad must lie in [0, T)
        std::size_t t0 = (pad > k) ? (pad - k) : 0;
        std::size_t t1 = (k > pad) ? (T - (k - pad)) : T;
        const double* xs = xc + (t0 + k - pad);
        double* os = o + t0;
        for (std::size_t t = 0; t + t0 < t1; ++t) os[t] += wv * xs[t];
      }
    }
  }
}

inline void conv1d_backward(const double* x, std::size_t cin, std::size_t T, const double* w,
                            std::size_t cout, std::size_t kw, const double* dout, double* dx,
                            double* dw, double* db) {
  std::size_t pad = (kw - 1) / 2;
  for (std::size_t co = 0; co < cout; ++co) {
    const double* g = dout + co * T;
    if (db) {
      double acc = 0.0;
      for (std::size_t t = 0; t < T; ++t) acc += g[t];
      db[co] += acc;
    }
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xc = x + ci * T;
      double* dxc = dx ? dx + ci * T : nullptr;
      const double* wrow = w + (co * cin + ci) * kw;
      double* dwrow = dw ? dw + (co * cin + ci) * kw : nullptr;
      for (std::size_t k = 0; k < kw; ++k) {
        std::size_t t0 = (pad > k) ? (pad - k) : 0;
        std::size_t t1 = (k > pad) ? (T - (k - pad)) : T;
        const double* gs = g + t0;
        std::size_t off = t0 + k - pad;
        if (dwrow) {
          const double* xs = xc + off;
          double acc = 0.0;
          for (std::size_t t = 0; t + t0 < t1; ++t) acc += gs[t] * xs[t];
          dwrow[k] += acc;
        }
        if (dxc) {
          double wv = wrow[k];
          double* dxs = dxc + off;
          for (std::size_t t = 0; t + t0 < t1; ++t) dxs[t] += wv * gs[t];
        }
      }
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Parameter: a named value with a gradient accumulator. Accumulation is
// additive across backward passes until zero_grad().
// ---------------------------------------------------------------------------
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(v), grad(Tensor::zeros(v.shape)), trainable(train) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// ---------------------------------------------------------------------------
// Tape: a topologically ordered record of primitive ops over tensors.
// Building is eager (creating an op computes its value); backward() walks the
// record once in reverse. replay() re-executes the record in order.
// ---------------------------------------------------------------------------
class Tape {
  enum class Op : int {
    kConst,
    kParam,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kMatMul,
    kConv1d,
    kRow,
    kCol,
    kSlice,
    kConcat,
    kExp,
    kLog,
    kPow,
    kSigmoid,
    kTanh,
    kLeakyRelu,
    kSoftplus,
    kClamp,
    kSum,
    kMean,
    kReshape,
    kRepeatRows,
    kSliceCols,
  };

  struct Node {
    Op op;
    int a = -1, b = -1, c = -1;
    std::vector<int> extra;  // concat inputs
    double x0 = 0.0, x1 = 0.0;
    long i0 = 0, i1 = 0;
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    Parameter* bound = nullptr;
  };

 public:
  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    ran_backward_ = false;
  }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  const Tensor& val(Var v) const { return nodes_[check(v)].val; }
  const Tensor& grad(Var v) const { return nodes_[check(v)].grad; }

  Var constant(Tensor t) {
    Node n;
    n.op = Op::kConst;
    n.val = std::move(t);
    return push(std::move(n), "constant");
  }
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  // Leaf bound to a Parameter: the current value is captured, and backward
  // accumulates into the parameter's gradient.
  Var param(Parameter& p) {
    Node n;
    n.op = Op::kParam;
    n.val = p.value;
    n.bound = &p;
    n.needs_grad = p.trainable;
    return push(std::move(n), "param");
  }

  Var add(Var a, Var b) { return binary(Op::kAdd, a, b, "add"); }
  Var sub(Var a, Var b) { return binary(Op::kSub, a, b, "sub"); }
  Var mul(Var a, Var b) { return binary(Op::kMul, a, b, "mul"); }
  Var div(Var a, Var b) { return binary(Op::kDiv, a, b, "div"); }
  Var pow(Var base, Var expo) { return binary(Op::kPow, base, expo, "pow"); }

  Var matmul(Var a, Var b) {
    Node n;
    n.op = Op::kMatMul;
    n.a = check(a);
    n.b = check(b);
    return push(std::move(n), "matmul");
  }

  // x: [Cin,T] or [T]; w: [Cout,Cin,Kw]; bias: [Cout]. Output [Cout,T].
  Var conv1d(Var x, Var w, Var bias) {
    Node n;
    n.op = Op::kConv1d;
    n.a = check(x);
    n.b = check(w);
    n.c = check(bias);
    return push(std::move(n), "conv1d");
  }

  Var row(Var m, std::size_t i) { return indexed(Op::kRow, m, static_cast<long>(i), "row"); }
  Var col(Var m, std::size_t j) { return indexed(Op::kCol, m, static_cast<long>(j), "col"); }

  Var slice(Var v, std::size_t start, std::size_t len) {
    Node n;
    n.op = Op::kSlice;
    n.a = check(v);
    n.i0 = static_cast<long>(start);
    n.i1 = static_cast<long>(len);
    return push(std::move(n), "slice");
  }

  // Contiguous column range of a rank-2 tensor.
  Var slice_cols(Var m, std::size_t start, std::size_t len) {
    Node n;
    n.op = Op::kSliceCols;
    n.a = check(m);
    n.i0 = static_cast<long>(start);
    n.i1 = static_cast<long>(len);
    return push(std::move(n), "slice_cols");
  }

  Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw numeric_error("concat: no inputs");
    Node n;
    n.op = Op::kConcat;
    for (Var p : parts) n.extra.push_back(check(p));
    return push(std::move(n), "concat");
  }

  Var exp(Var a) { return unary(Op::kExp, a, "exp"); }
  Var log(Var a) { return unary(Op::kLog, a, "log"); }
  Var sigmoid(Var a) { return unary(Op::kSigmoid, a, "sigmoid"); }
  Var tanh(Var a) { return unary(Op::kTanh, a, "tanh"); }
  Var softplus(Var a) { return unary(Op::kSoftplus, a, "softplus"); }

  Var leaky_relu(Var a, double slope) {
    Node n;
    n.op = Op::kLeakyRelu;
    n.a = check(a);
    n.x0 = slope;
    return push(std::move(n), "leaky_relu");
  }

  Var clamp(Var a, double lo, double hi) {
    Node n;
    n.op = Op::kClamp;
    n.a = check(a);
    n.x0 = lo;
    n.x1 = hi;
    return push(std::move(n), "clamp");
  }

  Var sum(Var a) { return unary(Op::kSum, a, "sum"); }
  Var mean(Var a) { return unary(Op::kMean, a, "mean"); }

  Var reshape(Var a, std::vector<std::size_t> shape) {
    Node n;
    n.op = Op::kReshape;
    n.a = check(a);
    n.val.shape = std::move(shape);
    return push(std::move(n), "reshape");
  }

  Var repeat_rows(Var v, std::size_t m) {
    return indexed(Op::kRepeatRows, v, static_cast<long>(m), "repeat_rows");
  }

  // Convenience composites.
  Var neg(Var a) { return sub(constant(0.0), a); }
  Var scale(Var a, double s) { return mul(a, constant(s)); }
  Var add_const(Var a, double s) { return add(a, constant(s)); }
  Var dot(Var a, Var b) { return sum(mul(a, b)); }
  Var square(Var a) { return mul(a, a); }

  // Reverse sweep from a scalar output; accumulates into bound Parameters.
  void backward(Var out, double seed = 1.0) {
    int o = check(out);
    if (!nodes_[o].val.is_scalar())
      throw numeric_error("backward: output is not scalar (shape " + nodes_[o].val.shape_str() + ")");
    for (Node& n : nodes_) {
      if (n.needs_grad)
        n.grad = Tensor::zeros(n.val.shape);
      else
        n.grad = Tensor();
    }
    if (!nodes_[o].needs_grad) return;  // constant objective
    nodes_[o].grad.data[0] = seed;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) backprop_node(i);
    for (Node& n : nodes_)
      if (n.op == Op::kParam && n.bound && n.bound->trainable)
        for (std::size_t i = 0; i < n.grad.numel(); ++i) n.bound->grad.data[i] += n.grad.data[i];
    ran_backward_ = true;
  }

  // Re-executes the recorded forward pass in order; values are recomputed
  // from leaf values. Used to assert record/replay determinism.
  void replay() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op == Op::kConst || nodes_[i].op == Op::kParam) continue;
      compute(nodes_[i]);
    }
  }

 private:
  int check(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw numeric_error("tape: invalid var");
    return v.id;
  }

  Var push(Node&& n, const char* what) {
    if (n.op != Op::kConst && n.op != Op::kParam) {
      for (int p : {n.a, n.b, n.c})
        if (p >= 0 && nodes_[p].needs_grad) n.needs_grad = true;
      for (int p : n.extra)
        if (nodes_[p].needs_grad) n.needs_grad = true;
      compute(n);
    }
    if (!n.val.all_finite())
      throw numeric_error(std::string("non-finite value produced by ") + what);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var binary(Op op, Var a, Var b, const char* what) {
    Node n;
    n.op = op;
    n.a = check(a);
    n.b = check(b);
    return push(std::move(n), what);
  }
  Var unary(Op op, Var a, const char* what) {
    Node n;
    n.op = op;
    n.a = check(a);
    return push(std::move(n), what);
  }
  Var indexed(Op op, Var a, long i, const char* what) {
    Node n;
    n.op = op;
    n.a = check(a);
    n.i0 = i;
    return push(std::move(n), what);
  }

  static void require(bool ok, const char* msg) {
    if (!ok) throw numeric_error(msg);
  }

  void compute(Node& n) {
    const Tensor& A = n.a >= 0 ? nodes_[n.a].val : n.val;
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
        break;
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul:
      case Op::kDiv:
      case Op::kPow: {
        const Tensor& B = nodes_[n.b].val;
        require(A.same_shape(B) || A.is_scalar() || B.is_scalar(),
                "elementwise op: shape mismatch");
        const Tensor& big = A.is_scalar() && !B.is_scalar() ? B : A;
        n.val = Tensor::zeros(big.shape);
        std::size_t m = n.val.numel();
        bool sa = A.is_scalar() && m > 1, sb = B.is_scalar() && m > 1;
        for (std::size_t i = 0; i < m; ++i) {
          double x = A.data[sa ? 0 : i], y = B.data[sb ? 0 : i];
          double r = 0.0;
          switch (n.op) {
            case Op::kAdd: r = x + y; break;
            case Op::kSub: r = x - y; break;
            case Op::kMul: r = x * y; break;
            case Op::kDiv: r = x / y; break;
            default: r = std::pow(x, y); break;
          }
          n.val.data[i] = r;
        }
        break;
      }
      case Op::kMatMul: {
        const Tensor& B = nodes_[n.b].val;
        require(A.rank() == 2, "matmul: lhs must be rank 2");
        std::size_t m = A.dim(0), k = A.dim(1);
        if (B.rank() == 1) {
          require(B.dim(0) == k, "matmul: inner dim mismatch");
          n.val = Tensor::zeros({m});
          kernels::matmul_acc(A.data.data(), B.data.data(), n.val.data.data(), m, k, 1);
        } else {
          require(B.rank() == 2 && B.dim(0) == k, "matmul: inner dim mismatch");
          std::size_t c = B.dim(1);
          n.val = Tensor::zeros({m, c});
          kernels::matmul_acc(A.data.data(), B.data.data(), n.val.data.data(), m, k, c);
        }
        break;
      }
      case Op::kConv1d: {
        const Tensor& W = nodes_[n.b].val;
        const Tensor& Bi = nodes_[n.c].val;
        require(W.rank() == 3, "conv1d: weight must be [Cout,Cin,Kw]");
        std::size_t cout = W.dim(0), cin = W.dim(1), kw = W.dim(2);
        std::size_t T = A.rank() == 1 ? A.dim(0) : A.dim(1);
        std::size_t xc = A.rank() == 1 ? 1 : A.dim(0);
        require(xc == cin, "conv1d: channel mismatch");
        require(Bi.numel() == cout, "conv1d: bias size mismatch");
        n.val = Tensor::zeros({cout, T});
        kernels::conv1d_forward(A.data.data(), cin, T, W.data.data(), cout, kw, Bi.data.data(),
                                n.val.data.data());
        break;
      }
      case Op::kRow: {
        require(A.rank() == 2, "row: rank-2 input required");
        std::size_t cols = A.dim(1), i = static_cast<std::size_t>(n.i0);
        require(i < A.dim(0), "row: index out of range");
        n.val = Tensor::zeros({cols});
        for (std::size_t j = 0; j < cols; ++j) n.val.data[j] = A.data[i * cols + j];
        break;
      }
      case Op::kCol: {
        require(A.rank() == 2, "col: rank-2 input required");
        std::size_t rows = A.dim(0), cols = A.dim(1), j = static_cast<std::size_t>(n.i0);
        require(j < cols, "col: index out of range");
        n.val = Tensor::zeros({rows});
        for (std::size_t i = 0; i < rows; ++i) n.val.data[i] = A.data[i * cols + j];
        break;
      }
      case Op::kSlice: {
        require(A.rank() == 1, "slice: rank-1 input required");
        std::size_t s = static_cast<std::size_t>(n.i0), l = static_cast<std::size_t>(n.i1);
        require(s + l <= A.dim(0), "slice: out of range");
        n.val = Tensor::zeros({l});
        for (std::size_t i = 0; i < l; ++i) n.val.data[i] = A.data[s + i];
        break;
      }
      case Op::kSliceCols: {
        require(A.rank() == 2, "slice_cols: rank-2 input required");
        std::size_t s = static_cast<std::size_t>(n.i0), l = static_cast<std::size_t>(n.i1);
        std::size_t rows = A.dim(0), cols = A.dim(1);
        require(s + l <= cols, "slice_cols: out of range");
        n.val = Tensor::zeros({rows, l});
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < l; ++j) n.val.data[i * l + j] = A.data[i * cols + s + j];
        break;
      }
      case Op::kConcat: {
        std::size_t total = 0;
        for (int p : n.extra) {
          require(nodes_[p].val.rank() == 1, "concat: rank-1 inputs required");
          total += nodes_[p].val.numel();
        }
        n.val = Tensor::zeros({total});
        std::size_t off = 0;
        for (int p : n.extra) {
          const Tensor& t = nodes_[p].val;
          for (std::size_t i = 0; i < t.numel(); ++i) n.val.data[off + i] = t.data[i];
          off += t.numel();
        }
        break;
      }
      case Op::kExp:
      case Op::kLog:
      case Op::kSigmoid:
      case Op::kTanh:
      case Op::kSoftplus:
      case Op::kLeakyRelu:
      case Op::kClamp: {
        n.val = Tensor::zeros(A.shape);
        for (std::size_t i = 0; i < A.numel(); ++i) {
          double x = A.data[i], r = 0.0;
          switch (n.op) {
            case Op::kExp: r = std::exp(x); break;
            case Op::kLog: r = std::log(x); break;
            case Op::kSigmoid: r = kernels::sigmoid(x); break;
            case Op::kTanh: r = std::tanh(x); break;
            case Op::kSoftplus: r = kernels::softplus(x); break;
            case Op::kLeakyRelu: r = x >= 0.0 ? x : n.x0 * x; break;
            default: r = x < n.x0 ? n.x0 : (x > n.x1 ? n.x1 : x); break;
          }
          n.val.data[i] = r;
        }
        break;
      }
      case Op::kSum:
      case Op::kMean: {
        double acc = 0.0;
        for (double v : A.data) acc += v;
        if (n.op == Op::kMean) acc /= static_cast<double>(A.numel());
        n.val = Tensor::scalar(acc);
        break;
      }
      case Op::kReshape: {
        require(Tensor::count(n.val.shape) == A.numel(), "reshape: element count mismatch");
        n.val.data = A.data;
        break;
      }
      case Op::kRepeatRows: {
        require(A.rank() == 1, "repeat_rows: rank-1 input required");
        std::size_t m = static_cast<std::size_t>(n.i0), c = A.dim(0);
        n.val = Tensor::zeros({m, c});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) n.val.data[i * c + j] = A.data[j];
        break;
      }
    }
  }

  // Adds g into parent a with scalar-broadcast reduction.
  template <typename F>
  void scatter(int a, const Tensor& g, F&& term) {
    Node& pa = nodes_[a];
    if (!pa.needs_grad) return;
    if (pa.grad.numel() == g.numel()) {
      for (std::size_t i = 0; i < g.numel(); ++i) pa.grad.data[i] += term(i);
    } else {  // parent is a broadcast scalar
      double acc = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += term(i);
      pa.grad.data[0] += acc;
    }
  }

  void backprop_node(int idx) {
    Node& n = nodes_[idx];
    if (!n.needs_grad || n.op == Op::kConst || n.op == Op::kParam) return;
    const Tensor& g = n.grad;
    const Tensor& A = nodes_[n.a >= 0 ? n.a : idx].val;
    switch (n.op) {
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul:
      case Op::kDiv:
      case Op::kPow: {
        const Tensor& B = nodes_[n.b].val;
        std::size_t m = g.numel();
        bool sa = A.is_scalar() && m > 1, sb = B.is_scalar() && m > 1;
        auto av = [&](std::size_t i) { return A.data[sa ? 0 : i]; };
        auto bv = [&](std::size_t i) { return B.data[sb ? 0 : i]; };
        switch (n.op) {
          case Op::kAdd:
            scatter(n.a, g, [&](std::size_t i) { return g.data[i]; });
            scatter(n.b, g, [&](std::size_t i) { return g.data[i]; });
            break;
          case Op::kSub:
            scatter(n.a, g, [&](std::size_t i) { return g.data[i]; });
            scatter(n.b, g, [&](std::size_t i) { return -g.data[i]; });
            break;
          case Op::kMul:
            scatter(n.a, g, [&](std::size_t i) { return g.data[i] * bv(i); });
            scatter(n.b, g, [&](std::size_t i) { return g.data[i] * av(i); });
            break;
          case Op::kDiv:
            scatter(n.a, g, [&](std::size_t i) { return g.data[i] / bv(i); });
            scatter(n.b, g,
                    [&](std::size_t i) { return -g.data[i] * av(i) / (bv(i) * bv(i)); });
            break;
          default:  // pow: d/da a^e = e a^(e-1); d/de = a^e ln a (0 at a<=0, the a->0+ limit)
            scatter(n.a, g, [&](std::size_t i) {
              double a = av(i), e = bv(i);
              if (a == 0.0) return e == 1.0 ? g.data[i] : 0.0;
              return g.data[i] * e * std::pow(a, e - 1.0);
            });
            scatter(n.b, g, [&](std::size_t i) {
              double a = av(i), e = bv(i);
              if (a <= 0.0) return 0.0;
              return g.data[i] * std::pow(a, e) * std::log(a);
            });
            break;
        }
        break;
      }
      case Op::kMatMul: {
        Node& pa = nodes_[n.a];
        Node& pb = nodes_[n.b];
        std::size_t m = pa.val.dim(0), k = pa.val.dim(1);
        std::size_t c = pb.val.rank() == 1 ? 1 : pb.val.dim(1);
        kernels::matmul_backward(pa.val.data.data(), pb.val.data.data(), g.data.data(),
                                 pa.needs_grad ? pa.grad.data.data() : nullptr,
                                 pb.needs_grad ? pb.grad.data.data() : nullptr, m, k, c);
        break;
      }
      case Op::kConv1d: {
        Node& px = nodes_[n.a];
        Node& pw = nodes_[n.b];
        Node& pb = nodes_[n.c];
        std::size_t cout = pw.val.dim(0), cin = pw.val.dim(1), kw = pw.val.dim(2);
        std::size_t T = px.val.rank() == 1 ? px.val.dim(0) : px.val.dim(1);
        kernels::conv1d_backward(px.val.data.data(), cin, T, pw.val.data.data(), cout, kw,
                                 g.data.data(), px.needs_grad ? px.grad.data.data() : nullptr,
                                 pw.needs_grad ? pw.grad.data.data() : nullptr,
                                 pb.needs_grad ? pb.grad.data.data() : nullptr);
        break;
      }
      case Op::kRow: {
        Node& pa = nodes_[n.a];
        if (!pa.needs_grad) break;
        std::size_t cols = pa.val.dim(1), i = static_cast<std::size_t>(n.i0);
        for (std::size_t j = 0; j < cols; ++j) pa.grad.data[i * cols + j] += g.data[j];
        break;
      }
      case Op::kCol: {
        Node& pa = nodes_[n.a];
        if (!pa.needs_grad) break;
        std::size_t rows = pa.val.dim(0), cols = pa.val.dim(1);
        std::size_t j = static_cast<std::size_t>(n.i0);
        for (std::size_t i = 0; i < rows; ++i) pa.grad.data[i * cols + j] += g.data[i];
        break;
      }
      case Op::kSlice: {
        Node& pa = nodes_[n.a];
        if (!pa.needs_grad) break;
        std::size_t s = static_cast<std::size_t>(n.i0);
        for (std::size_t i = 0; i < g.numel(); ++i) pa.grad.data[s + i] += g.data[i];
        break;
      }
      case Op::kSliceCols: {
        Node& pa = nodes_[n.a];
        if (!pa.needs_grad) break;
        std::size_t s = static_cast<std::size_t>(n.i0), l = static_cast<std::size_t>(n.i1);
        std::size_t rows = pa.val.dim(0), cols = pa.val.dim(1);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < l; ++j) pa.grad.data[i * cols + s + j] += g.data[i * l + j];
        break;
      }
      case Op::kConcat: {
        std::size_t off = 0;
        for (int p : n.extra) {
          Node& pp = nodes_[p];
          std::size_t len = pp.val.numel();
          if (pp.needs_grad)
            for (std::size_t i = 0; i < len; ++i) pp.grad.data[i] += g.data[off + i];
          off += len;
        }
        break;
      }
      case Op::kExp:
        scatter(n.a, g, [&](std::size_t i) { return g.data[i] * n.val.data[i]; });
        break;
      case Op::kLog:
        scatter(n.a, g, [&](std::size_t i) { return g.data[i] / A.data[i]; });
        break;
      case Op::kSigmoid:
        scatter(n.a, g, [&](std::size_t i) {
          double y = n.val.data[i];
          return g.data[i] * y * (1.0 - y);
        });
        break;
      case Op::kTanh:
        scatter(n.a, g, [&](std::size_t i) {
          double y = n.val.data[i];
          return g.data[i] * (1.0 - y * y);
        });
        break;
      case Op::kSoftplus:
        scatter(n.a, g, [&](std::size_t i) { return g.data[i] * kernels::sigmoid(A.data[i]); });
        break;
      case Op::kLeakyRelu:
        scatter(n.a, g,
                [&](std::size_t i) { return g.data[i] * (A.data[i] >= 0.0 ? 1.0 : n.x0); });
        break;
      case Op::kClamp:
        scatter(n.a, g, [&](std::size_t i) {
          double x = A.data[i];
          return (x > n.x0 && x < n.x1) ? g.data[i] : 0.0;
        });
        break;
      case Op::kSum:
        scatter(n.a, nodes_[n.a].val, [&](std::size_t) { return g.data[0]; });
        break;
      case Op::kMean: {
        double s = g.data[0] / static_cast<double>(A.numel());
        scatter(n.a, nodes_[n.a].val, [&](std::size_t) { return s; });
        break;
      }
      case Op::kReshape:
        scatter(n.a, g, [&](std::size_t i) { return g.data[i]; });
        break;
      case Op::kRepeatRows: {
        Node& pa = nodes_[n.a];
        if (!pa.needs_grad) break;
        std::size_t c = pa.val.dim(0), m = static_cast<std::size_t>(n.i0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) pa.grad.data[j] += g.data[i * c + j];
        break;
      }
      default:
        break;
    }
  }

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Finite-difference oracle. Returns the max over coordinates of
// |analytic - central| / (|analytic| + |central| + 1e-12).
// ---------------------------------------------------------------------------
inline double fd_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point,
                       double step) {
  Parameter p("fd_point", point);
  Tape tape;
  Var y = f(tape, tape.param(p));
  if (!tape.val(y).is_scalar()) throw numeric_error("fd_check: f must be scalar-valued");
  p.zero_grad();
  tape.backward(y);
  Tensor analytic = p.grad;

  auto eval = [&](const Tensor& x) {
    Tape t;
    Var out = f(t, t.constant(x));
    return t.val(out).value();
  };

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    double x0 = point.data[i];
    probe.data[i] = x0 + step;
    double fp = eval(probe);
    probe.data[i] = x0 - step;
    double fm = eval(probe);
    probe.data[i] = x0;
    double central = (fp - fm) / (2.0 * step);
    double err = std::abs(analytic.data[i] - central) /
                 (std::abs(analytic.data[i]) + std::abs(central) + 1e-12);
    if (err > worst) worst = err;
  }
  return worst;
}

// Same oracle for a scalar built from a set of Parameters (e.g. a log-joint
// as a function of unconstrained model parameters).
inline double fd_check_params(const std::function<Var(Tape&)>& build,
                              const std::vector<Parameter*>& params, double step) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var y = build(tape);
    if (!tape.val(y).is_scalar()) throw numeric_error("fd_check_params: scalar output required");
    tape.backward(y);
  }
  auto eval = [&]() {
    Tape t;
    return t.val(build(t)).value();
  };
  double worst = 0.0;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      double x0 = p->value.data[i];
      p->value.data[i] = x0 + step;
      double fp = eval();
      p->value.data[i] = x0 - step;
      double fm = eval();
      p->value.data[i] = x0;
      double central = (fp - fm) / (2.0 * step);
      double err = std::abs(p->grad.data[i] - central) /
                   (std::abs(p->grad.data[i]) + std::abs(central) + 1e-12);
      if (err > worst) worst = err;
    }
  }
  return worst;
}

}  // namespace dspk
