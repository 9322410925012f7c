#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fpo/tensor.hpp"

namespace fpo {

// Reverse-mode automatic differentiation over matrices. Nodes live on an
// append-only tape; construction order is already topological, so backward
// is a single reverse sweep. Graphs are built per minibatch and cleared
// afterwards, never retained across optimizer steps.
//
// A tape constructed with grad_enabled = false evaluates the identical
// arithmetic without recording derivatives. Rollout-time losses and
// update-time recomputation share the same builders, so stored quantities
// are reproducible bit-exactly.
class Tape {
 public:
  struct Ref {
    int id = -1;
    int rows = 0;
    int cols = 0;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  void clear() {
    nodes_.clear();
    ran_backward_ = false;
  }

  size_t num_nodes() const { return nodes_.size(); }

  // ---- graph construction -------------------------------------------------

  Ref leaf(Matrix value, bool requires_grad = false) {
    Node n;
    n.op = Op::kLeaf;
    n.val = std::move(value);
    n.needs_grad = grad_enabled_ && requires_grad;
    return push(std::move(n));
  }

  Ref constant(Matrix value) { return leaf(std::move(value), false); }

  // C = A * B
  Ref matmul(Ref a, Ref b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimension mismatch");
    Node n = binary(Op::kMatmul, a, b, a.rows, b.cols);
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    const int nr = a.rows, kk = a.cols, mc = b.cols;
    for (int i = 0; i < nr; ++i) {
      const double* arow = A.row_ptr(i);
      double* crow = n.val.row_ptr(i);
      for (int k = 0; k < kk; ++k) {
        const double aik = arow[k];
        if (aik == 0.0) continue;
        const double* brow = B.row_ptr(k);
        for (int j = 0; j < mc; ++j) crow[j] += aik * brow[j];
      }
    }
    return push(std::move(n));
  }

  Ref add(Ref a, Ref b) { return elementwise(Op::kAdd, a, b); }
  Ref sub(Ref a, Ref b) { return elementwise(Op::kSub, a, b); }
  Ref mul(Ref a, Ref b) { return elementwise(Op::kMul, a, b); }
  Ref min_of(Ref a, Ref b) { return elementwise(Op::kMin, a, b); }
  Ref max_of(Ref a, Ref b) { return elementwise(Op::kMax, a, b); }

  // A (n x m) + b (1 x m), broadcast down rows. b may be 1 x 1.
  Ref add_rowvec(Ref a, Ref b) {
    if (b.rows != 1 || (b.cols != a.cols && b.cols != 1)) {
      throw std::invalid_argument("add_rowvec: expected 1 x cols (or 1 x 1)");
    }
    Node n = binary(Op::kAddRow, a, b, a.rows, a.cols);
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    for (int i = 0; i < a.rows; ++i) {
      for (int j = 0; j < a.cols; ++j) {
        n.val.at(i, j) = A.at(i, j) + (B.cols == 1 ? B.data[0] : B.at(0, j));
      }
    }
    return push(std::move(n));
  }

  // A (n x m) ⊙ b (1 x m), broadcast down rows.
  Ref mul_rowvec(Ref a, Ref b) {
    if (b.rows != 1 || (b.cols != a.cols && b.cols != 1)) {
      throw std::invalid_argument("mul_rowvec: expected 1 x cols (or 1 x 1)");
    }
    Node n = binary(Op::kMulRow, a, b, a.rows, a.cols);
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    for (int i = 0; i < a.rows; ++i) {
      for (int j = 0; j < a.cols; ++j) {
        n.val.at(i, j) = A.at(i, j) * (B.cols == 1 ? B.data[0] : B.at(0, j));
      }
    }
    return push(std::move(n));
  }

  // k * A + c, elementwise with scalar constants.
  Ref affine(Ref a, double k, double c) {
    Node n = unary(Op::kAffine, a, a.rows, a.cols);
    n.k0 = k;
    n.k1 = c;
    const Matrix& A = val(a);
    for (int i = 0; i < A.size(); ++i) n.val.data[i] = k * A.data[i] + c;
    return push(std::move(n));
  }

  // Row i of A scaled by constant c[i]. c is data, not a node.
  Ref scale_rows(Ref a, const Matrix& c) {
    if (c.rows != a.rows || c.cols != 1) throw std::invalid_argument("scale_rows: expected n x 1 constants");
    Node n = unary(Op::kScaleRows, a, a.rows, a.cols);
    n.aux = c;
    const Matrix& A = val(a);
    for (int i = 0; i < a.rows; ++i) {
      const double s = c.data[i];
      for (int j = 0; j < a.cols; ++j) n.val.at(i, j) = A.at(i, j) * s;
    }
    return push(std::move(n));
  }

  Ref tanh_of(Ref a) {
    Node n = unary(Op::kTanh, a, a.rows, a.cols);
    const Matrix& A = val(a);
    for (int i = 0; i < A.size(); ++i) n.val.data[i] = std::tanh(A.data[i]);
    return push(std::move(n));
  }

  // x * sigmoid(x)
  Ref swish_of(Ref a) {
    Node n = unary(Op::kSwish, a, a.rows, a.cols);
    const Matrix& A = val(a);
    for (int i = 0; i < A.size(); ++i) {
      const double x = A.data[i];
      n.val.data[i] = x / (1.0 + std::exp(-x));
    }
    return push(std::move(n));
  }

  Ref exp_of(Ref a) {
    Node n = unary(Op::kExp, a, a.rows, a.cols);
    const Matrix& A = val(a);
    for (int i = 0; i < A.size(); ++i) n.val.data[i] = std::exp(A.data[i]);
    return push(std::move(n));
  }

  // Clamp to [lo, hi]; gradient passes through inside the bounds (inclusive).
  Ref clamp(Ref a, double lo, double hi) {
    Node n = unary(Op::kClamp, a, a.rows, a.cols);
    n.k0 = lo;
    n.k1 = hi;
    const Matrix& A = val(a);
    for (int i = 0; i < A.size(); ++i) {
      double x = A.data[i];
      n.val.data[i] = x < lo ? lo : (x > hi ? hi : x);
    }
    return push(std::move(n));
  }

  Ref row_sum(Ref a) {
    Node n = unary(Op::kRowSum, a, a.rows, 1);
    const Matrix& A = val(a);
    for (int i = 0; i < a.rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < a.cols; ++j) s += A.at(i, j);
      n.val.data[i] = s;
    }
    return push(std::move(n));
  }

  Ref row_mean(Ref a) {
    Node n = unary(Op::kRowMean, a, a.rows, 1);
    const Matrix& A = val(a);
    const double inv = 1.0 / a.cols;
    for (int i = 0; i < a.rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < a.cols; ++j) s += A.at(i, j);
      n.val.data[i] = s * inv;
    }
    return push(std::move(n));
  }

  Ref sum_all(Ref a) {
    Node n = unary(Op::kSumAll, a, 1, 1);
    const Matrix& A = val(a);
    double s = 0.0;
    for (double v : A.data) s += v;
    n.val.data[0] = s;
    return push(std::move(n));
  }

  Ref mean_all(Ref a) {
    Node n = unary(Op::kMeanAll, a, 1, 1);
    const Matrix& A = val(a);
    double s = 0.0;
    for (double v : A.data) s += v;
    n.val.data[0] = s / A.size();
    return push(std::move(n));
  }

  // Same data, new shape (row-major order preserved).
  Ref reshape(Ref a, int rows, int cols) {
    if (rows * cols != a.rows * a.cols) throw std::invalid_argument("reshape: element count mismatch");
    Node n = unary(Op::kReshape, a, rows, cols);
    n.val.data = val(a).data;
    return push(std::move(n));
  }

  Ref neg(Ref a) { return affine(a, -1.0, 0.0); }

  // ---- evaluation ---------------------------------------------------------

  const Matrix& value(Ref r) const { return nodes_[r.id].val; }

  // Reverse sweep from a recorded scalar.
  void backward(Ref root) {
    if (!grad_enabled_) throw std::runtime_error("backward: tape built without gradient recording");
    if (root.rows != 1 || root.cols != 1) throw std::runtime_error("backward: root is not a scalar");
    Node& top = nodes_[root.id];
    if (!top.needs_grad) throw std::runtime_error("backward: root does not depend on any parameter");
    ensure_grad(root.id);
    top.grad.data[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.data.empty()) continue;
      propagate(n);
    }
    ran_backward_ = true;
  }

  // Gradient of the last backward() root with respect to node r; zeros if r
  // did not participate.
  Matrix gradient(Ref r) const {
    const Node& n = nodes_[r.id];
    if (n.grad.data.empty()) return Matrix(r.rows, r.cols, 0.0);
    return n.grad;
  }

 private:
  enum class Op : uint8_t {
    kLeaf,
    kMatmul,
    kAdd,
    kSub,
    kMul,
    kMin,
    kMax,
    kAddRow,
    kMulRow,
    kAffine,
    kScaleRows,
    kTanh,
    kSwish,
    kExp,
    kClamp,
    kRowSum,
    kRowMean,
    kSumAll,
    kMeanAll,
    kReshape,
  };

  struct Node {
    Op op = Op::kLeaf;
    int a = -1;
    int b = -1;
    double k0 = 0.0;
    double k1 = 0.0;
    Matrix val;
    Matrix grad;  // allocated lazily during backward
    Matrix aux;   // op-specific constants
    bool needs_grad = false;
  };

  const Matrix& val(Ref r) const { return nodes_[r.id].val; }

  Node binary(Op op, Ref a, Ref b, int rows, int cols) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.val = Matrix(rows, cols);
    n.needs_grad = grad_enabled_ && (nodes_[a.id].needs_grad || nodes_[b.id].needs_grad);
    return n;
  }

  Node unary(Op op, Ref a, int rows, int cols) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.val = Matrix(rows, cols);
    n.needs_grad = grad_enabled_ && nodes_[a.id].needs_grad;
    return n;
  }

  Ref elementwise(Op op, Ref a, Ref b) {
    if (a.rows != b.rows || a.cols != b.cols) throw std::invalid_argument("elementwise op: shape mismatch");
    Node n = binary(op, a, b, a.rows, a.cols);
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    switch (op) {
      case Op::kAdd:
        for (int i = 0; i < A.size(); ++i) n.val.data[i] = A.data[i] + B.data[i];
        break;
      case Op::kSub:
        for (int i = 0; i < A.size(); ++i) n.val.data[i] = A.data[i] - B.data[i];
        break;
      case Op::kMul:
        for (int i = 0; i < A.size(); ++i) n.val.data[i] = A.data[i] * B.data[i];
        break;
      case Op::kMin:
        for (int i = 0; i < A.size(); ++i) n.val.data[i] = A.data[i] <= B.data[i] ? A.data[i] : B.data[i];
        break;
      case Op::kMax:
        for (int i = 0; i < A.size(); ++i) n.val.data[i] = A.data[i] >= B.data[i] ? A.data[i] : B.data[i];
        break;
      default:
        throw std::logic_error("elementwise: bad op");
    }
    return push(std::move(n));
  }

  Ref push(Node n) {
    if (ran_backward_) throw std::runtime_error("tape reused after backward; call clear()");
    nodes_.push_back(std::move(n));
    Node& stored = nodes_.back();
    return Ref{static_cast<int>(nodes_.size()) - 1, stored.val.rows, stored.val.cols};
  }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Matrix(n.val.rows, n.val.cols, 0.0);
  }

  // Accumulate into parent grads assuming n.grad holds d(root)/d(n).
  void propagate(Node& n) {
    Node* pa = n.a >= 0 ? &nodes_[n.a] : nullptr;
    Node* pb = n.b >= 0 ? &nodes_[n.b] : nullptr;
    const bool ga = pa && pa->needs_grad;
    const bool gb = pb && pb->needs_grad;
    if (!ga && !gb) return;
    if (ga) ensure_grad(n.a);
    if (gb) ensure_grad(n.b);
    const Matrix& g = n.grad;

    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        // dA += g * B^T ; dB += A^T * g
        const Matrix& A = pa->val;
        const Matrix& B = pb->val;
        const int nr = A.rows, kk = A.cols, mc = B.cols;
        if (ga) {
          Matrix& dA = pa->grad;
          for (int i = 0; i < nr; ++i) {
            const double* grow = g.row_ptr(i);
            double* darow = dA.row_ptr(i);
            for (int k = 0; k < kk; ++k) {
              const double* brow = B.row_ptr(k);
              double s = 0.0;
              for (int j = 0; j < mc; ++j) s += grow[j] * brow[j];
              darow[k] += s;
            }
          }
        }
        if (gb) {
          Matrix& dB = pb->grad;
          for (int i = 0; i < nr; ++i) {
            const double* arow = A.row_ptr(i);
            const double* grow = g.row_ptr(i);
            for (int k = 0; k < kk; ++k) {
              const double aik = arow[k];
              if (aik == 0.0) continue;
              double* dbrow = dB.row_ptr(k);
              for (int j = 0; j < mc; ++j) dbrow[j] += aik * grow[j];
            }
          }
        }
        break;
      }
      case Op::kAdd:
        if (ga)
          for (int i = 0; i < g.size(); ++i) pa->grad.data[i] += g.data[i];
        if (gb)
          for (int i = 0; i < g.size(); ++i) pb->grad.data[i] += g.data[i];
        break;
      case Op::kSub:
        if (ga)
          for (int i = 0; i < g.size(); ++i) pa->grad.data[i] += g.data[i];
        if (gb)
          for (int i = 0; i < g.size(); ++i) pb->grad.data[i] -= g.data[i];
        break;
      case Op::kMul:
        if (ga)
          for (int i = 0; i < g.size(); ++i) pa->grad.data[i] += g.data[i] * pb->val.data[i];
        if (gb)
          for (int i = 0; i < g.size(); ++i) pb->grad.data[i] += g.data[i] * pa->val.data[i];
        break;
      case Op::kMin:
        for (int i = 0; i < g.size(); ++i) {
          if (pa->val.data[i] <= pb->val.data[i]) {
            if (ga) pa->grad.data[i] += g.data[i];
          } else if (gb) {
            pb->grad.data[i] += g.data[i];
          }
        }
        break;
      case Op::kMax:
        for (int i = 0; i < g.size(); ++i) {
          if (pa->val.data[i] >= pb->val.data[i]) {
            if (ga) pa->grad.data[i] += g.data[i];
          } else if (gb) {
            pb->grad.data[i] += g.data[i];
          }
        }
        break;
      case Op::kAddRow:
        if (ga)
          for (int i = 0; i < g.size(); ++i) pa->grad.data[i] += g.data[i];
        if (gb) {
          const int cols = n.val.cols;
          for (int i = 0; i < n.val.rows; ++i) {
            for (int j = 0; j < cols; ++j) {
              pb->grad.data[pb->val.cols == 1 ? 0 : j] += g.at(i, j);
            }
          }
        }
        break;
      case Op::kMulRow: {
        const int cols = n.val.cols;
        for (int i = 0; i < n.val.rows; ++i) {
          for (int j = 0; j < cols; ++j) {
            const int bj = pb->val.cols == 1 ? 0 : j;
            if (ga) pa->grad.at(i, j) += g.at(i, j) * pb->val.data[bj];
            if (gb) pb->grad.data[bj] += g.at(i, j) * pa->val.at(i, j);
          }
        }
        break;
      }
      case Op::kAffine:
        if (ga)
          for (int i = 0; i < g.size(); ++i) pa->grad.data[i] += n.k0 * g.data[i];
        break;
      case Op::kScaleRows:
        if (ga) {
          for (int i = 0; i < n.val.rows; ++i) {
            const double s = n.aux.data[i];
            for (int j = 0; j < n.val.cols; ++j) pa->grad.at(i, j) += s * g.at(i, j);
          }
        }
        break;
      case Op::kTanh:
        if (ga)
          for (int i = 0; i < g.size(); ++i) {
            const double y = n.val.data[i];
            pa->grad.data[i] += (1.0 - y * y) * g.data[i];
          }
        break;
      case Op::kSwish:
        if (ga)
          for (int i = 0; i < g.size(); ++i) {
            const double x = pa->val.data[i];
            const double s = 1.0 / (1.0 + std::exp(-x));
            pa->grad.data[i] += s * (1.0 + x * (1.0 - s)) * g.data[i];
          }
        break;
      case Op::kExp:
        if (ga)
          for (int i = 0; i < g.size(); ++i) pa->grad.data[i] += n.val.data[i] * g.data[i];
        break;
      case Op::kClamp:
        if (ga)
          for (int i = 0; i < g.size(); ++i) {
            const double x = pa->val.data[i];
            if (x >= n.k0 && x <= n.k1) pa->grad.data[i] += g.data[i];
          }
        break;
      case Op::kRowSum:
        if (ga)
          for (int i = 0; i < pa->val.rows; ++i)
            for (int j = 0; j < pa->val.cols; ++j) pa->grad.at(i, j) += g.data[i];
        break;
      case Op::kRowMean:
        if (ga) {
          const double inv = 1.0 / pa->val.cols;
          for (int i = 0; i < pa->val.rows; ++i)
            for (int j = 0; j < pa->val.cols; ++j) pa->grad.at(i, j) += g.data[i] * inv;
        }
        break;
      case Op::kSumAll:
        if (ga)
          for (int i = 0; i < pa->val.size(); ++i) pa->grad.data[i] += g.data[0];
        break;
      case Op::kMeanAll:
        if (ga) {
          const double inv = 1.0 / pa->val.size();
          for (int i = 0; i < pa->val.size(); ++i) pa->grad.data[i] += g.data[0] * inv;
        }
        break;
      case Op::kReshape:
        if (ga)
          for (int i = 0; i < g.size(); ++i) pa->grad.data[i] += g.data[i];
        break;
    }
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool ran_backward_ = false;
};

}  // namespace fpo
