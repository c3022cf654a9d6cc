#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "smac/error.hpp"

namespace smac::ad {

// Reverse-mode engine over row-major double matrices. The graph is a flat
// tape rebuilt per minibatch; node ids are already a topological order, so
// backward is a single reverse sweep. Values and gradients live in one
// arena that is reused across resets, so steady-state training performs no
// allocations.
//
// Supported broadcasting is deliberately narrow: AddRow adds a 1xC row to
// every row of an RxC matrix (bias), Scale multiplies by a compile-time
// constant. Everything else requires exact shape agreement.

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kAddRow,
  kMatMul,
  kRelu,
  kTanh,
  kExp,
  kLog,
  kSquare,
  kScale,
  kClip,
  kDetach,
  kSum,
  kMean,
  kConcatCols,
  kCols,
  kMin,
  kMax,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kAddRow: return "add_row";
    case Op::kMatMul: return "matmul";
    case Op::kRelu: return "relu";
    case Op::kTanh: return "tanh";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSquare: return "square";
    case Op::kScale: return "scale";
    case Op::kClip: return "clip";
    case Op::kDetach: return "detach";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kConcatCols: return "concat_cols";
    case Op::kCols: return "cols";
    case Op::kMin: return "min";
    case Op::kMax: return "max";
  }
  return "?";
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

class Tape {
 public:
  Tape() { arena_.reserve(1 << 16); }

  int size() const { return static_cast<int>(nodes_.size()); }

  // Clears the graph but keeps the arena capacity.
  void reset() {
    nodes_.clear();
    used_ = 0;
  }

  Var leaf(int rows, int cols, std::span<const double> vals) {
    if (static_cast<int>(vals.size()) != rows * cols)
      throw DimensionError("leaf: data size does not match shape");
    Var v = make(Op::kLeaf, rows, cols, -1, -1);
    std::memcpy(val(v.id), vals.data(), sizeof(double) * vals.size());
    check_finite(v.id);
    return v;
  }

  Var leaf_scalar(double x) { return leaf(1, 1, std::span<const double>(&x, 1)); }

  // Leaf with uninitialized values; caller fills via value().
  Var leaf_uninit(int rows, int cols) { return make(Op::kLeaf, rows, cols, -1, -1); }

  Var add(Var a, Var b) { return binary_same(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary_same(Op::kSub, a, b); }
  Var mul(Var a, Var b) { return binary_same(Op::kMul, a, b); }
  Var div(Var a, Var b) { return binary_same(Op::kDiv, a, b); }
  Var cmin(Var a, Var b) { return binary_same(Op::kMin, a, b); }
  Var cmax(Var a, Var b) { return binary_same(Op::kMax, a, b); }

  // m: RxC, row: 1xC, broadcast over rows.
  // NOTE: make() can reallocate nodes_ and the arena, so every op reads
  // shapes into locals first and takes data pointers only after make().
  Var add_row(Var m, Var row) {
    const int rows = node(m.id).rows, cols = node(m.id).cols;
    if (node(row.id).rows != 1 || node(row.id).cols != cols)
      throw DimensionError("add_row: row must be 1x" + std::to_string(cols));
    Var out = make(Op::kAddRow, rows, cols, m.id, row.id);
    const double* a = val(m.id);
    const double* r = val(row.id);
    double* o = val(out.id);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) o[i * cols + j] = a[i * cols + j] + r[j];
    check_finite(out.id);
    return out;
  }

  Var matmul(Var a, Var b) {
    const int R = node(a.id).rows, K = node(a.id).cols;
    const int Kb = node(b.id).rows, C = node(b.id).cols;
    if (K != Kb)
      throw DimensionError("matmul: inner dims " + std::to_string(K) + " vs " +
                           std::to_string(Kb));
    Var out = make(Op::kMatMul, R, C, a.id, b.id);
    const double* A = val(a.id);
    const double* B = val(b.id);
    double* O = val(out.id);
    std::fill(O, O + static_cast<size_t>(R) * C, 0.0);
    for (int r = 0; r < R; ++r) {
      const double* ar = A + static_cast<size_t>(r) * K;
      double* orow = O + static_cast<size_t>(r) * C;
      for (int k = 0; k < K; ++k) {
        const double av = ar[k];
        const double* brow = B + static_cast<size_t>(k) * C;
        for (int j = 0; j < C; ++j) orow[j] += av * brow[j];
      }
    }
    check_finite(out.id);
    return out;
  }

  Var relu(Var a) {
    return unary(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; });
  }
  Var tanh(Var a) {
    return unary(Op::kTanh, a, [](double x) { return std::tanh(x); });
  }
  Var exp(Var a) {
    return unary(Op::kExp, a, [](double x) { return std::exp(x); });
  }
  Var log(Var a) {
    return unary(Op::kLog, a, [](double x) { return std::log(x); });
  }
  Var square(Var a) {
    return unary(Op::kSquare, a, [](double x) { return x * x; });
  }

  Var scale(Var a, double s) {
    Var out = unary(Op::kScale, a, [s](double x) { return s * x; });
    node(out.id).p0 = s;
    return out;
  }

  // Saturation with closed-interval semantics: the gradient passes only
  // strictly inside (lo, hi) and is zero at and beyond the bounds.
  Var clip(Var a, double lo, double hi) {
    if (!(lo < hi)) throw ContractError("clip: lo must be < hi");
    Var out = unary(Op::kClip, a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); });
    node(out.id).p0 = lo;
    node(out.id).p1 = hi;
    return out;
  }

  // Value copy that blocks all gradient flow.
  Var detach(Var a) {
    return unary(Op::kDetach, a, [](double x) { return x; });
  }

  Var sum(Var a) { return reduce(Op::kSum, a); }
  Var mean(Var a) { return reduce(Op::kMean, a); }

  Var concat_cols(Var a, Var b) {
    const int rows = node(a.id).rows, ca = node(a.id).cols;
    const int rb = node(b.id).rows, cb = node(b.id).cols;
    if (rows != rb) throw DimensionError("concat_cols: row counts differ");
    Var out = make(Op::kConcatCols, rows, ca + cb, a.id, b.id);
    const double* A = val(a.id);
    const double* B = val(b.id);
    double* O = val(out.id);
    const int C = ca + cb;
    for (int r = 0; r < rows; ++r) {
      std::memcpy(O + static_cast<size_t>(r) * C, A + static_cast<size_t>(r) * ca,
                  sizeof(double) * ca);
      std::memcpy(O + static_cast<size_t>(r) * C + ca, B + static_cast<size_t>(r) * cb,
                  sizeof(double) * cb);
    }
    return out;
  }

  // Column slice [begin, end).
  Var cols(Var a, int begin, int end) {
    const int rows = node(a.id).rows, ca = node(a.id).cols;
    if (begin < 0 || end > ca || begin >= end)
      throw DimensionError("cols: bad range [" + std::to_string(begin) + ", " +
                           std::to_string(end) + ") of " + std::to_string(ca));
    Var out = make(Op::kCols, rows, end - begin, a.id, -1);
    node(out.id).p0 = begin;
    const double* A = val(a.id);
    double* O = val(out.id);
    const int W = end - begin;
    for (int r = 0; r < rows; ++r)
      std::memcpy(O + static_cast<size_t>(r) * W, A + static_cast<size_t>(r) * ca + begin,
                  sizeof(double) * W);
    return out;
  }

  // Reverse sweep from a scalar root. Gradients of every node at or before
  // the root are (re)computed; each equals d(root)/d(node).
  void backward(Var root) {
    const Node& nr = node(root.id);
    if (nr.rows != 1 || nr.cols != 1)
      throw ContractError("backward: root must be scalar, got " + std::to_string(nr.rows) +
                          "x" + std::to_string(nr.cols));
    for (int i = 0; i <= root.id; ++i) {
      double* g = grd(i);
      std::fill(g, g + count(i), 0.0);
    }
    grd(root.id)[0] = 1.0;
    for (int i = root.id; i >= 0; --i) step_backward(i);
  }

  int rows(Var v) const { return node(v.id).rows; }
  int cols(Var v) const { return node(v.id).cols; }

  std::span<double> value(Var v) { return {val(v.id), count(v.id)}; }
  std::span<const double> value(Var v) const { return {val(v.id), count(v.id)}; }
  std::span<const double> grad(Var v) const { return {grd(v.id), count(v.id)}; }

  double value_scalar(Var v) const {
    if (count(v.id) != 1) throw ContractError("value_scalar on non-scalar");
    return val(v.id)[0];
  }

 private:
  struct Node {
    Op op;
    int a, b;
    int rows, cols;
    std::size_t voff, goff;
    double p0 = 0.0, p1 = 0.0;
  };

  std::vector<Node> nodes_;
  std::vector<double> arena_;
  std::size_t used_ = 0;

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  std::size_t count(int id) const {
    const Node& n = node(id);
    return static_cast<std::size_t>(n.rows) * n.cols;
  }

  double* val(int id) { return arena_.data() + node(id).voff; }
  const double* val(int id) const { return arena_.data() + node(id).voff; }
  double* grd(int id) { return arena_.data() + node(id).goff; }
  const double* grd(int id) const { return arena_.data() + node(id).goff; }

  std::size_t alloc(std::size_t n) {
    const std::size_t off = used_;
    used_ += n;
    if (used_ > arena_.size()) arena_.resize(used_);
    return off;
  }

  Var make(Op op, int rows, int cols, int a, int b) {
    if (rows <= 0 || cols <= 0) throw DimensionError("node with non-positive shape");
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.rows = rows;
    n.cols = cols;
    const std::size_t cnt = static_cast<std::size_t>(rows) * cols;
    n.voff = alloc(cnt);
    n.goff = alloc(cnt);
    nodes_.push_back(n);
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void check_finite(int id) const {
    const double* v = val(id);
    const std::size_t n = count(id);
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(v[i]))
        throw NumericError(std::string(op_name(node(id).op)) + ": non-finite output");
  }

  Var binary_same(Op op, Var a, Var b) {
    const int ra = node(a.id).rows, ca = node(a.id).cols;
    const int rb = node(b.id).rows, cb = node(b.id).cols;
    if (ra != rb || ca != cb)
      throw DimensionError(std::string(op_name(op)) + ": shape mismatch " + std::to_string(ra) +
                           "x" + std::to_string(ca) + " vs " + std::to_string(rb) + "x" +
                           std::to_string(cb));
    Var out = make(op, ra, ca, a.id, b.id);
    const double* A = val(a.id);
    const double* B = val(b.id);
    double* O = val(out.id);
    const std::size_t n = count(out.id);
    switch (op) {
      case Op::kAdd:
        for (std::size_t i = 0; i < n; ++i) O[i] = A[i] + B[i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < n; ++i) O[i] = A[i] - B[i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < n; ++i) O[i] = A[i] * B[i];
        break;
      case Op::kDiv:
        for (std::size_t i = 0; i < n; ++i) O[i] = A[i] / B[i];
        break;
      case Op::kMin:
        for (std::size_t i = 0; i < n; ++i) O[i] = A[i] <= B[i] ? A[i] : B[i];
        break;
      case Op::kMax:
        for (std::size_t i = 0; i < n; ++i) O[i] = A[i] >= B[i] ? A[i] : B[i];
        break;
      default:
        throw ContractError("binary_same: bad op");
    }
    check_finite(out.id);
    return out;
  }

  template <typename F>
  Var unary(Op op, Var a, F f) {
    const int rows = node(a.id).rows, cols = node(a.id).cols;
    Var out = make(op, rows, cols, a.id, -1);
    const double* A = val(a.id);
    double* O = val(out.id);
    const std::size_t n = count(out.id);
    for (std::size_t i = 0; i < n; ++i) O[i] = f(A[i]);
    check_finite(out.id);
    return out;
  }

  Var reduce(Op op, Var a) {
    Var out = make(op, 1, 1, a.id, -1);
    const double* A = val(a.id);
    const std::size_t n = count(a.id);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += A[i];
    val(out.id)[0] = op == Op::kMean ? s / static_cast<double>(n) : s;
    check_finite(out.id);
    return out;
  }

  void step_backward(int id) {
    const Node& n = node(id);
    if (n.op == Op::kLeaf || n.op == Op::kDetach) return;
    const double* go = grd(id);
    const double* vo = val(id);
    const std::size_t cnt = count(id);
    double* ga = grd(n.a);
    const double* va = val(n.a);
    switch (n.op) {
      case Op::kAdd: {
        double* gb = grd(n.b);
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += go[i];
          gb[i] += go[i];
        }
        break;
      }
      case Op::kSub: {
        double* gb = grd(n.b);
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += go[i];
          gb[i] -= go[i];
        }
        break;
      }
      case Op::kMul: {
        double* gb = grd(n.b);
        const double* vb = val(n.b);
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += go[i] * vb[i];
          gb[i] += go[i] * va[i];
        }
        break;
      }
      case Op::kDiv: {
        double* gb = grd(n.b);
        const double* vb = val(n.b);
        for (std::size_t i = 0; i < cnt; ++i) {
          ga[i] += go[i] / vb[i];
          gb[i] -= go[i] * vo[i] / vb[i];
        }
        break;
      }
      case Op::kAddRow: {
        double* gb = grd(n.b);
        for (int r = 0; r < n.rows; ++r)
          for (int j = 0; j < n.cols; ++j) {
            ga[r * n.cols + j] += go[r * n.cols + j];
            gb[j] += go[r * n.cols + j];
          }
        break;
      }
      case Op::kMatMul: {
        double* gb = grd(n.b);
        const double* vb = val(n.b);
        const int R = node(n.a).rows, K = node(n.a).cols, C = n.cols;
        // dA = dO * B^T
        for (int r = 0; r < R; ++r) {
          const double* gor = go + static_cast<size_t>(r) * C;
          double* gar = ga + static_cast<size_t>(r) * K;
          for (int k = 0; k < K; ++k) {
            const double* brow = vb + static_cast<size_t>(k) * C;
            double s = 0.0;
            for (int j = 0; j < C; ++j) s += gor[j] * brow[j];
            gar[k] += s;
          }
        }
        // dB = A^T * dO
        for (int r = 0; r < R; ++r) {
          const double* ar = va + static_cast<size_t>(r) * K;
          const double* gor = go + static_cast<size_t>(r) * C;
          for (int k = 0; k < K; ++k) {
            const double av = ar[k];
            double* gbr = gb + static_cast<size_t>(k) * C;
            for (int j = 0; j < C; ++j) gbr[j] += av * gor[j];
          }
        }
        break;
      }
      case Op::kRelu:
        for (std::size_t i = 0; i < cnt; ++i)
          if (va[i] > 0.0) ga[i] += go[i];
        break;
      case Op::kTanh:
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += go[i] * (1.0 - vo[i] * vo[i]);
        break;
      case Op::kExp:
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += go[i] * vo[i];
        break;
      case Op::kLog:
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += go[i] / va[i];
        break;
      case Op::kSquare:
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += go[i] * 2.0 * va[i];
        break;
      case Op::kScale:
        for (std::size_t i = 0; i < cnt; ++i) ga[i] += go[i] * n.p0;
        break;
      case Op::kClip:
        for (std::size_t i = 0; i < cnt; ++i)
          if (va[i] > n.p0 && va[i] < n.p1) ga[i] += go[i];
        break;
      case Op::kSum:
        for (std::size_t i = 0; i < count(n.a); ++i) ga[i] += go[0];
        break;
      case Op::kMean: {
        const double inv = 1.0 / static_cast<double>(count(n.a));
        for (std::size_t i = 0; i < count(n.a); ++i) ga[i] += go[0] * inv;
        break;
      }
      case Op::kConcatCols: {
        double* gb = grd(n.b);
        const int ca = node(n.a).cols, cb = node(n.b).cols;
        for (int r = 0; r < n.rows; ++r) {
          const double* gor = go + static_cast<size_t>(r) * n.cols;
          for (int j = 0; j < ca; ++j) ga[r * ca + j] += gor[j];
          for (int j = 0; j < cb; ++j) gb[r * cb + j] += gor[ca + j];
        }
        break;
      }
      case Op::kCols: {
        const int begin = static_cast<int>(n.p0);
        const int ca = node(n.a).cols;
        for (int r = 0; r < n.rows; ++r)
          for (int j = 0; j < n.cols; ++j) ga[r * ca + begin + j] += go[r * n.cols + j];
        break;
      }
      case Op::kMin: {
        double* gb = grd(n.b);
        const double* vb = val(n.b);
        for (std::size_t i = 0; i < cnt; ++i)
          if (va[i] <= vb[i]) ga[i] += go[i]; else gb[i] += go[i];
        break;
      }
      case Op::kMax: {
        double* gb = grd(n.b);
        const double* vb = val(n.b);
        for (std::size_t i = 0; i < cnt; ++i)
          if (va[i] >= vb[i]) ga[i] += go[i]; else gb[i] += go[i];
        break;
      }
      default:
        break;
    }
  }
};

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }

}  // namespace smac::ad
