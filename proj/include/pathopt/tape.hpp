#pragma once

// Reverse-mode automatic differentiation over dense matrices. A Tape records
// primitive operations in topological (append) order; backward replays them
// once in reverse. Values are Eigen matrices; column vectors are n-by-1.
//
// Vars with node < 0 are constants: operations accept them freely and no
// gradient flows into them. An operation whose inputs are all constants is
// evaluated eagerly and produces another constant.

#include "pathopt/common.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace pathopt::tape {

class Tape;

struct Var {
  Mat value;
  int node = -1;        // -1 marks a constant
  Tape* tape = nullptr;

  Var() = default;
  Var(Mat v, int id, Tape* t) : value(std::move(v)), node(id), tape(t) {}

  bool is_const() const { return node < 0; }
  long rows() const { return value.rows(); }
  long cols() const { return value.cols(); }
};

inline Var constant(Mat v) { return Var(std::move(v), -1, nullptr); }
inline Var constant(double v) { return constant(Mat::Constant(1, 1, v)); }

// Gradient map produced by Tape::backward: node id -> adjoint matrix.
class Gradients {
 public:
  explicit Gradients(std::size_t n) : grads_(n), has_(n, false) {}

  bool has(const Var& v) const { return v.node >= 0 && has_[v.node]; }

  // Adjoint of v; zero (of v's shape) for constants and untouched nodes.
  Mat grad(const Var& v) const {
    if (!has(v)) return Mat::Zero(v.rows(), v.cols());
    return grads_[v.node];
  }

  void seed(int node, Mat g) {
    grads_[node] = std::move(g);
    has_[node] = true;
  }

  void accumulate(int node, const Mat& g) {
    if (node < 0) return;
    if (has_[node]) {
      grads_[node] += g;
    } else {
      grads_[node] = g;
      has_[node] = true;
    }
  }

  const Mat& at(int node) const { return grads_[node]; }
  bool present(int node) const { return has_[node]; }

 private:
  std::vector<Mat> grads_;
  std::vector<bool> has_;
};

// Column-wise scalar function with its gradient; the terminal hook that lets
// externally-defined objectives participate in a recorded graph. The function
// is treated as a black box differentiated exactly once.
struct ScalarField {
  std::function<double(const Vec&)> value;
  std::function<Vec(const Vec&)> grad;
};

class Tape {
 public:
  // Registers a differentiable input and returns its leaf Var.
  Var input(Mat v) {
    const int id = push({}, nullptr);
    return Var(std::move(v), id, this);
  }

  std::size_t size() const { return nodes_.size(); }

  // Discards all recorded nodes. Vars created before the reset are invalid.
  void reset() { nodes_.clear(); }

  // Backpropagates from a scalar (1x1) Var recorded on this tape.
  Gradients backward(const Var& loss) const {
    if (loss.tape != this || loss.is_const())
      throw std::invalid_argument("backward: loss is not recorded on this tape");
    if (loss.rows() != 1 || loss.cols() != 1)
      throw std::invalid_argument("backward: loss must be a 1x1 scalar");
    Gradients g(nodes_.size());
    g.seed(loss.node, Mat::Ones(1, 1));
    for (int i = loss.node; i >= 0; --i) {
      if (!g.present(i) || !nodes_[i].pull) continue;
      nodes_[i].pull(g.at(i), g);
    }
    return g;
  }

  // Records a node. `pull` consumes the node's adjoint and accumulates into
  // its parents; leaves pass nullptr.
  int push(std::vector<int> parents, std::function<void(const Mat&, Gradients&)> pull) {
    nodes_.push_back({std::move(parents), std::move(pull)});
    return static_cast<int>(nodes_.size()) - 1;
  }

 private:
  struct Node {
    std::vector<int> parents;
    std::function<void(const Mat&, Gradients&)> pull;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline Tape* owner(const Var& a, const Var& b) {
  if (a.tape && b.tape && a.tape != b.tape)
    throw std::invalid_argument("tape: operands recorded on different tapes");
  return a.tape ? a.tape : b.tape;
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
}

inline Var record_unary(const Var& a, Mat value, std::function<Mat(const Mat&)> pull_a) {
  if (a.is_const()) return constant(std::move(value));
  Tape* t = a.tape;
  const int pa = a.node;
  const int id = t->push({pa}, [pa, f = std::move(pull_a)](const Mat& up, Gradients& g) {
    g.accumulate(pa, f(up));
  });
  return Var(std::move(value), id, t);
}

inline Var record_binary(const Var& a, const Var& b, Mat value,
                         std::function<Mat(const Mat&)> pull_a,
                         std::function<Mat(const Mat&)> pull_b) {
  Tape* t = owner(a, b);
  if (!t || (a.is_const() && b.is_const())) return constant(std::move(value));
  const int pa = a.is_const() ? -1 : a.node;
  const int pb = b.is_const() ? -1 : b.node;
  const int id = t->push({pa, pb}, [pa, pb, fa = std::move(pull_a), fb = std::move(pull_b)](
                                       const Mat& up, Gradients& g) {
    if (pa >= 0) g.accumulate(pa, fa(up));
    if (pb >= 0) g.accumulate(pb, fb(up));
  });
  return Var(std::move(value), id, t);
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  return detail::record_binary(a, b, a.value + b.value,
                               [](const Mat& up) { return up; },
                               [](const Mat& up) { return up; });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  return detail::record_binary(a, b, a.value - b.value,
                               [](const Mat& up) { return up; },
                               [](const Mat& up) { return Mat(-up); });
}

inline Var scalar_mul(double c, const Var& a) {
  return detail::record_unary(a, c * a.value, [c](const Mat& up) { return Mat(c * up); });
}

// Elementwise product.
inline Var cmul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "cmul");
  Mat av = a.value, bv = b.value;
  return detail::record_binary(a, b, av.cwiseProduct(bv),
                               [bv](const Mat& up) { return Mat(up.cwiseProduct(bv)); },
                               [av](const Mat& up) { return Mat(up.cwiseProduct(av)); });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ (" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                ")");
  Mat av = a.value, bv = b.value;
  return detail::record_binary(a, b, av * bv,
                               [bv](const Mat& up) { return Mat(up * bv.transpose()); },
                               [av](const Mat& up) { return Mat(av.transpose() * up); });
}

inline Var tanh(const Var& a) {
  Mat y = a.value.array().tanh();
  return detail::record_unary(a, y, [y](const Mat& up) {
    return Mat(up.array() * (1.0 - y.array().square()));
  });
}

inline Var relu(const Var& a) {
  Mat x = a.value;
  Mat y = x.cwiseMax(0.0);
  return detail::record_unary(a, y, [x](const Mat& up) {
    return Mat((x.array() > 0.0).select(up, Mat::Zero(up.rows(), up.cols())));
  });
}

inline Var sin(const Var& a) {
  Mat x = a.value;
  return detail::record_unary(a, x.array().sin(), [x](const Mat& up) {
    return Mat(up.array() * x.array().cos());
  });
}

inline Var cos(const Var& a) {
  Mat x = a.value;
  return detail::record_unary(a, x.array().cos(), [x](const Mat& up) {
    return Mat(-up.array() * x.array().sin());
  });
}

inline Var exp(const Var& a) {
  Mat y = a.value.array().exp();
  if (!y.allFinite()) throw NumericFailure("exp: overflow to non-finite values");
  return detail::record_unary(a, y, [y](const Mat& up) { return Mat(up.cwiseProduct(y)); });
}

inline Var log(const Var& a) {
  if ((a.value.array() <= 0.0).any())
    throw NumericFailure("log: non-positive argument");
  Mat x = a.value;
  return detail::record_unary(a, x.array().log(), [x](const Mat& up) {
    return Mat(up.cwiseQuotient(x));
  });
}

inline Var sigmoid(const Var& a) {
  Mat y = (1.0 + (-a.value.array()).exp()).inverse();
  return detail::record_unary(a, y, [y](const Mat& up) {
    return Mat(up.array() * y.array() * (1.0 - y.array()));
  });
}

// Clamp with pass-through gradient strictly inside [lo, hi], zero outside.
inline Var clamp(const Var& a, double lo, double hi) {
  Mat x = a.value;
  Mat y = x.cwiseMax(lo).cwiseMin(hi);
  return detail::record_unary(a, y, [x, lo, hi](const Mat& up) {
    return Mat(((x.array() >= lo) && (x.array() <= hi))
                   .select(up, Mat::Zero(up.rows(), up.cols())));
  });
}

// Sum of all entries, as a 1x1 Var.
inline Var sum(const Var& a) {
  const long r = a.rows(), c = a.cols();
  return detail::record_unary(a, Mat::Constant(1, 1, a.value.sum()), [r, c](const Mat& up) {
    return Mat(Mat::Constant(r, c, up(0, 0)));
  });
}

// Squared Frobenius norm, as a 1x1 Var.
inline Var squared_norm(const Var& a) {
  Mat x = a.value;
  return detail::record_unary(a, Mat::Constant(1, 1, x.squaredNorm()), [x](const Mat& up) {
    return Mat(2.0 * up(0, 0) * x);
  });
}

// Column sums, as a 1-by-cols row.
inline Var colwise_sum(const Var& a) {
  const long r = a.rows();
  Mat v = a.value.colwise().sum();
  return detail::record_unary(a, v, [r](const Mat& up) {
    return Mat(up.replicate(r, 1));
  });
}

// Vertical concatenation.
inline Var concat_rows(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("concat_rows: column count differs");
  Mat v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.value;
  v.bottomRows(b.rows()) = b.value;
  const long ra = a.rows(), rb = b.rows();
  return detail::record_binary(a, b, std::move(v),
                               [ra](const Mat& up) { return Mat(up.topRows(ra)); },
                               [ra, rb](const Mat& up) { return Mat(up.middleRows(ra, rb)); });
}

// Contiguous row slice [start, start+count).
inline Var slice_rows(const Var& a, long start, long count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  const long r = a.rows(), c = a.cols();
  Mat v = a.value.middleRows(start, count);
  return detail::record_unary(a, std::move(v), [r, c, start, count](const Mat& up) {
    Mat g = Mat::Zero(r, c);
    g.middleRows(start, count) = up;
    return g;
  });
}

// Column-major reshape; the inverse reshape is applied on the way back.
inline Var reshape(const Var& a, long r, long c) {
  if (r * c != a.rows() * a.cols()) throw std::invalid_argument("reshape: element count differs");
  const long r0 = a.rows(), c0 = a.cols();
  Mat v = a.value.reshaped(r, c);
  return detail::record_unary(a, std::move(v), [r0, c0](const Mat& up) {
    return Mat(up.reshaped(r0, c0));
  });
}

// Adds a column vector to every column of a.
inline Var broadcast_add(const Var& a, const Var& bias) {
  if (bias.cols() != 1 || bias.rows() != a.rows())
    throw std::invalid_argument("broadcast_add: bias must be rows(a) x 1");
  Mat v = a.value.colwise() + Eigen::VectorXd(bias.value.col(0));
  return detail::record_binary(a, bias, std::move(v),
                               [](const Mat& up) { return up; },
                               [](const Mat& up) { return Mat(up.rowwise().sum()); });
}

// Tiles a column vector to `count` columns.
inline Var replicate_cols(const Var& a, long count) {
  if (a.cols() != 1) throw std::invalid_argument("replicate_cols: input must be a column");
  Mat v = a.value.replicate(1, count);
  return detail::record_unary(a, std::move(v), [](const Mat& up) {
    return Mat(up.rowwise().sum());
  });
}

// Applies `field.value` to every column of x, yielding a 1-by-cols row; the
// pullback routes each column's adjoint through `field.grad`.
inline Var colwise_apply(const Var& x, ScalarField field) {
  Mat xv = x.value;
  Mat v(1, xv.cols());
  for (long j = 0; j < xv.cols(); ++j) v(0, j) = field.value(xv.col(j));
  return detail::record_unary(x, std::move(v), [xv, field](const Mat& up) {
    Mat g(xv.rows(), xv.cols());
    for (long j = 0; j < xv.cols(); ++j) g.col(j) = up(0, j) * field.grad(xv.col(j));
    return g;
  });
}

// Stops gradient flow; the value continues as a constant.
inline Var detach(const Var& a) { return constant(a.value); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double c, const Var& a) { return scalar_mul(c, a); }
inline Var operator*(const Var& a, double c) { return scalar_mul(c, a); }

}  // namespace pathopt::tape
