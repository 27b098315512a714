#pragma once

// A small reverse-mode tape over dense Eigen matrices. Nodes are appended in
// evaluation order, so a single reverse sweep visits every node after all of
// its consumers. Only the handful of operations the shaping losses need are
// provided.

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mishape/error.hpp"

namespace mishape::autodiff {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

class Tape {
 public:
  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var parameter(Matrix value) { return push(std::move(value), true, {}); }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient accumulated into `v` by the last backward(); zero if untouched.
  Matrix grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and sweeps the tape backwards.
  void backward(Var root) {
    if (value(root).size() != 1) fail(ErrorCategory::argument, "backward() needs a scalar root");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    accumulate(root.id, Matrix::Ones(1, 1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Building blocks for operations.
  using Backward = std::function<void(const Matrix& upstream)>;

  Var push(Matrix value, bool needs_grad, Backward backward) {
    nodes_.push_back({std::move(value), Matrix(), needs_grad, std::move(backward)});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  void accumulate(int id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  template <typename F>
  void accumulate_with(int id, F&& f) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    f(n.grad);
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) fail(ErrorCategory::argument, "variables live on different tapes");
  return *a.tape;
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrorCategory::argument, std::string("shape mismatch in ") + op);
}

}  // namespace detail

inline Var matmul(Var A, Var B) {
  Tape& t = detail::same_tape(A, B);
  if (t.value(A).cols() != t.value(B).rows()) fail(ErrorCategory::argument, "shape mismatch in matmul");
  const bool ng = t.needs_grad(A) || t.needs_grad(B);
  return t.push(t.value(A) * t.value(B), ng, [&t, A, B](const Matrix& up) {
    if (t.needs_grad(A)) t.accumulate_with(A.id, [&](Matrix& g) { g.noalias() += up * t.value(B).transpose(); });
    if (t.needs_grad(B)) t.accumulate_with(B.id, [&](Matrix& g) { g.noalias() += t.value(A).transpose() * up; });
  });
}

/// X + b 1^T for a column vector b.
inline Var add_bias(Var X, Var b) {
  Tape& t = detail::same_tape(X, b);
  if (t.value(b).cols() != 1 || t.value(b).rows() != t.value(X).rows())
    fail(ErrorCategory::argument, "bias must be a column matching the rows of X");
  Matrix out = t.value(X);
  out.colwise() += t.value(b).col(0);
  return t.push(std::move(out), t.needs_grad(X) || t.needs_grad(b), [&t, X, b](const Matrix& up) {
    t.accumulate(X.id, up);
    if (t.needs_grad(b)) t.accumulate(b.id, up.rowwise().sum());
  });
}

inline Var relu(Var X) {
  Tape& t = *X.tape;
  return t.push(t.value(X).cwiseMax(0.0), t.needs_grad(X), [&t, X](const Matrix& up) {
    t.accumulate(X.id, (t.value(X).array() > 0.0).select(up, 0.0));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(t.value(a), t.value(b), "add");
  return t.push(t.value(a) + t.value(b), t.needs_grad(a) || t.needs_grad(b), [&t, a, b](const Matrix& up) {
    t.accumulate(a.id, up);
    t.accumulate(b.id, up);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(t.value(a), t.value(b), "sub");
  return t.push(t.value(a) - t.value(b), t.needs_grad(a) || t.needs_grad(b), [&t, a, b](const Matrix& up) {
    t.accumulate(a.id, up);
    t.accumulate(b.id, -up);
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(t.value(a), t.value(b), "mul");
  return t.push(t.value(a).cwiseProduct(t.value(b)), t.needs_grad(a) || t.needs_grad(b), [&t, a, b](const Matrix& up) {
    if (t.needs_grad(a)) t.accumulate(a.id, up.cwiseProduct(t.value(b)));
    if (t.needs_grad(b)) t.accumulate(b.id, up.cwiseProduct(t.value(a)));
  });
}

inline Var div(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(t.value(a), t.value(b), "div");
  return t.push(t.value(a).cwiseQuotient(t.value(b)), t.needs_grad(a) || t.needs_grad(b), [&t, a, b](const Matrix& up) {
    const Matrix& va = t.value(a);
    const Matrix& vb = t.value(b);
    if (t.needs_grad(a)) t.accumulate(a.id, up.cwiseQuotient(vb));
    if (t.needs_grad(b)) t.accumulate(b.id, (-up.array() * va.array() / (vb.array() * vb.array())).matrix());
  });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  return t.push(c * t.value(a), t.needs_grad(a), [&t, a, c](const Matrix& up) { t.accumulate(a.id, c * up); });
}

inline Var add_scalar(Var a, double c) {
  Tape& t = *a.tape;
  Matrix out = t.value(a).array() + c;
  return t.push(std::move(out), t.needs_grad(a), [&t, a](const Matrix& up) { t.accumulate(a.id, up); });
}

inline Var square(Var a) {
  Tape& t = *a.tape;
  return t.push(t.value(a).cwiseAbs2(), t.needs_grad(a), [&t, a](const Matrix& up) {
    t.accumulate(a.id, 2.0 * up.cwiseProduct(t.value(a)));
  });
}

/// log(1 + e^x), evaluated stably.
inline Var softplus(Var a) {
  Tape& t = *a.tape;
  Matrix out = t.value(a).unaryExpr([](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
  return t.push(std::move(out), t.needs_grad(a), [&t, a](const Matrix& up) {
    const Matrix sig = t.value(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    t.accumulate(a.id, up.cwiseProduct(sig));
  });
}

inline Var mean(Var a) {
  Tape& t = *a.tape;
  const double n = static_cast<double>(t.value(a).size());
  if (n == 0) fail(ErrorCategory::argument, "mean of an empty matrix");
  Matrix out(1, 1);
  out(0, 0) = t.value(a).sum() / n;
  return t.push(std::move(out), t.needs_grad(a), [&t, a, n](const Matrix& up) {
    t.accumulate(a.id, Matrix::Constant(t.value(a).rows(), t.value(a).cols(), up(0, 0) / n));
  });
}

/// Euclidean norm of every column, as a 1 x B row. The gradient at a zero
/// column is taken to be zero.
inline Var col_norm(Var X) {
  Tape& t = *X.tape;
  Matrix out = t.value(X).colwise().norm();
  return t.push(std::move(out), t.needs_grad(X), [&t, X](const Matrix& up) {
    const Matrix& x = t.value(X);
    t.accumulate_with(X.id, [&](Matrix& g) {
      for (Index c = 0; c < x.cols(); ++c) {
        const double n = x.col(c).norm();
        if (n > 0.0) g.col(c) += (up(0, c) / n) * x.col(c);
      }
    });
  });
}

/// Row of dot products <X[:, I_p], X[:, J_p]> for index pairs p. When the
/// pairs are dense over few columns the Gram matrix of those columns is used.
inline Var pair_dot(Var X, std::vector<int> I, std::vector<int> J) {
  Tape& t = *X.tape;
  if (I.size() != J.size()) fail(ErrorCategory::argument, "pair_dot index lists differ in length");
  const Matrix& x = t.value(X);
  const std::size_t P = I.size();

  std::vector<int> local(static_cast<std::size_t>(x.cols()), -1);
  std::vector<int> cols;
  for (std::size_t p = 0; p < P; ++p)
    for (int c : {I[p], J[p]})
      if (local[c] < 0) {
        local[c] = static_cast<int>(cols.size());
        cols.push_back(c);
      }
  const auto K = static_cast<Index>(cols.size());

  Matrix out(1, static_cast<Index>(P));
  if (K * K <= 4 * static_cast<Index>(P)) {
    Matrix sub(x.rows(), K);
    for (Index k = 0; k < K; ++k) sub.col(k) = x.col(cols[k]);
    const Matrix gram = sub.transpose() * sub;
    for (std::size_t p = 0; p < P; ++p) out(0, static_cast<Index>(p)) = gram(local[I[p]], local[J[p]]);
    return t.push(std::move(out), t.needs_grad(X),
                  [&t, X, I = std::move(I), J = std::move(J), cols = std::move(cols), local = std::move(local),
                   sub = std::move(sub)](const Matrix& up) {
                    const Index K = static_cast<Index>(cols.size());
                    Matrix U = Matrix::Zero(K, K);
                    for (std::size_t p = 0; p < I.size(); ++p) {
                      const double u = up(0, static_cast<Index>(p));
                      U(local[I[p]], local[J[p]]) += u;
                      U(local[J[p]], local[I[p]]) += u;
                    }
                    const Matrix dsub = sub * U;
                    t.accumulate_with(X.id, [&](Matrix& g) {
                      for (Index k = 0; k < K; ++k) g.col(cols[k]) += dsub.col(k);
                    });
                  });
  }
  for (std::size_t p = 0; p < P; ++p) out(0, static_cast<Index>(p)) = x.col(I[p]).dot(x.col(J[p]));
  return t.push(std::move(out), t.needs_grad(X), [&t, X, I = std::move(I), J = std::move(J)](const Matrix& up) {
    const Matrix& x = t.value(X);
    t.accumulate_with(X.id, [&](Matrix& g) {
      for (std::size_t p = 0; p < I.size(); ++p) {
        const double u = up(0, static_cast<Index>(p));
        g.col(I[p]) += u * x.col(J[p]);
        g.col(J[p]) += u * x.col(I[p]);
      }
    });
  });
}

/// Row of sum_c m[c, I_p] m[c, J_p] ||W[:, c]||^2 for a constant mask matrix m
/// (width x B). This is <W diag(m_I), W diag(m_J)> without forming either product.
inline Var masked_weight_dot(Var W, Matrix masks, std::vector<int> I, std::vector<int> J) {
  Tape& t = *W.tape;
  if (I.size() != J.size()) fail(ErrorCategory::argument, "masked_weight_dot index lists differ in length");
  if (masks.rows() != t.value(W).cols()) fail(ErrorCategory::argument, "mask rows must match the columns of W");
  const Eigen::VectorXd w = t.value(W).colwise().squaredNorm().transpose();
  Matrix out(1, static_cast<Index>(I.size()));
  for (std::size_t p = 0; p < I.size(); ++p)
    out(0, static_cast<Index>(p)) = (masks.col(I[p]).cwiseProduct(masks.col(J[p]))).dot(w);
  return t.push(std::move(out), t.needs_grad(W),
                [&t, W, masks = std::move(masks), I = std::move(I), J = std::move(J)](const Matrix& up) {
                  Eigen::VectorXd dw = Eigen::VectorXd::Zero(masks.rows());
                  for (std::size_t p = 0; p < I.size(); ++p)
                    dw += up(0, static_cast<Index>(p)) * masks.col(I[p]).cwiseProduct(masks.col(J[p]));
                  t.accumulate_with(W.id, [&](Matrix& g) { g += 2.0 * t.value(W) * dw.asDiagonal(); });
                });
}

/// Element-wise square root; the gradient at zero is taken to be zero.
inline Var safe_sqrt(Var a) {
  Tape& t = *a.tape;
  Matrix out = t.value(a).cwiseMax(0.0).cwiseSqrt();
  return t.push(out, t.needs_grad(a), [&t, a, out](const Matrix& up) {
    t.accumulate(a.id, (out.array() > 0.0).select(up.array() / (2.0 * out.array()), 0.0).matrix());
  });
}

/// Picks entries of a 1 x B row: out_p = row[idx_p].
inline Var select(Var row, std::vector<int> idx) {
  Tape& t = *row.tape;
  const Matrix& r = t.value(row);
  if (r.rows() != 1) fail(ErrorCategory::argument, "select expects a row vector");
  Matrix out(1, static_cast<Index>(idx.size()));
  for (std::size_t p = 0; p < idx.size(); ++p) out(0, static_cast<Index>(p)) = r(0, idx[p]);
  return t.push(std::move(out), t.needs_grad(row), [&t, row, idx = std::move(idx)](const Matrix& up) {
    t.accumulate_with(row.id, [&](Matrix& g) {
      for (std::size_t p = 0; p < idx.size(); ++p) g(0, idx[p]) += up(0, static_cast<Index>(p));
    });
  });
}

/// Per-column Jacobian heads of a ReLU chain. For column i the product
///   G_i = W_K diag(m_{K-1,i}) W_{K-1} diag(m_{K-2,i}) ... W_1 diag(m_{0,i})
/// is formed and stored flattened (column-major) in column i of the result.
/// `weights` lists W_K first; `masks` lists m_{K-1} first and has one more
/// entry than there are weights after the first, i.e. masks.size() == weights.size().
/// Masks are constants: no gradient flows through them.
inline Var masked_chain(const std::vector<Var>& weights, std::vector<Matrix> masks) {
  if (weights.empty() || masks.size() != weights.size())
    fail(ErrorCategory::argument, "masked_chain needs one mask per weight");
  Tape& t = *weights.front().tape;
  const Index B = masks.front().cols();
  const Index rows = t.value(weights.front()).rows();
  const Index cols = masks.back().rows();
  bool ng = false;
  for (auto w : weights) ng = ng || t.needs_grad(w);

  auto product = [&t, &weights, &masks](Index i, std::size_t upto) {
    // X_1 ... up to and including weight index `upto` and its mask.
    Matrix P = t.value(weights[0]);
    for (std::size_t k = 0; k <= upto; ++k) {
      if (k > 0) P = P * t.value(weights[k]);
      for (Index c = 0; c < P.cols(); ++c)
        if (masks[k](c, i) == 0.0) P.col(c).setZero();
    }
    return P;
  };

  Matrix out(rows * cols, B);
  for (Index i = 0; i < B; ++i) {
    const Matrix G = product(i, weights.size() - 1);
    out.col(i) = Eigen::Map<const Eigen::VectorXd>(G.data(), G.size());
  }
  return t.push(std::move(out), ng, [&t, weights, masks = std::move(masks), rows, cols, B](const Matrix& up) {
    const std::size_t K = weights.size();
    for (Index i = 0; i < B; ++i) {
      // T holds dG (X_{k+1} ... X_end)^T while walking from the right.
      Matrix T = Eigen::Map<const Matrix>(up.col(i).data(), rows, cols);
      for (std::size_t k = K; k-- > 0;) {
        for (Index c = 0; c < T.cols(); ++c)
          if (masks[k](c, i) == 0.0) T.col(c).setZero();
        if (t.needs_grad(weights[k])) {
          if (k == 0) {
            t.accumulate_with(weights[0].id, [&](Matrix& g) { g += T; });
          } else {
            Matrix P = t.value(weights[0]);
            for (std::size_t j = 0; j < k; ++j) {
              if (j > 0) P = P * t.value(weights[j]);
              for (Index c = 0; c < P.cols(); ++c)
                if (masks[j](c, i) == 0.0) P.col(c).setZero();
            }
            t.accumulate_with(weights[k].id, [&](Matrix& g) { g.noalias() += P.transpose() * T; });
          }
        }
        if (k > 0) T = T * t.value(weights[k]).transpose();
      }
    }
  });
}

}  // namespace mishape::autodiff
