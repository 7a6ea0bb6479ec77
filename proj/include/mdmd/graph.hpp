#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mdmd/error.hpp"

namespace mdmd {

// Row-major so a row-major reshape is a plain reinterpretation of the buffer.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
struct Node {
  Mat<S> value;
  Mat<S> grad;  // empty until backward touches this node
  bool needs_grad = false;
  std::function<void()> backward;  // pulls from grad into parents
};

// Dynamic reverse-mode tape. Nodes live in a deque so pointers stay valid as
// the graph grows; creation order is a topological order, so the backward pass
// is a single reverse sweep. One tape per training step.
template <typename S>
class Tape {
 public:
  using Ref = Node<S>*;

  Ref leaf(Mat<S> v, bool needs_grad) {
    return make(std::move(v), needs_grad, nullptr);
  }
  Ref constant(Mat<S> v) { return make(std::move(v), false, nullptr); }

  Ref matmul(Ref a, Ref b) {
    if (a->value.cols() != b->value.rows())
      fail("shape", "matmul inner dims " + dims(a) + " x " + dims(b));
    Ref out = make(a->value * b->value, a->needs_grad || b->needs_grad, nullptr);
    out->backward = [a, b, out] {
      if (a->needs_grad) acc(a).noalias() += out->grad * b->value.transpose();
      if (b->needs_grad) acc(b).noalias() += a->value.transpose() * out->grad;
    };
    return out;
  }

  Ref add(Ref a, Ref b) {
    same_shape(a, b, "add");
    Ref out = make(a->value + b->value, a->needs_grad || b->needs_grad, nullptr);
    out->backward = [a, b, out] {
      if (a->needs_grad) acc(a) += out->grad;
      if (b->needs_grad) acc(b) += out->grad;
    };
    return out;
  }

  Ref sub(Ref a, Ref b) {
    same_shape(a, b, "sub");
    Ref out = make(a->value - b->value, a->needs_grad || b->needs_grad, nullptr);
    out->backward = [a, b, out] {
      if (a->needs_grad) acc(a) += out->grad;
      if (b->needs_grad) acc(b) -= out->grad;
    };
    return out;
  }

  Ref scale(Ref a, S s) {
    Ref out = make(a->value * s, a->needs_grad, nullptr);
    out->backward = [a, out, s] {
      if (a->needs_grad) acc(a) += out->grad * s;
    };
    return out;
  }

  // Broadcast-add a 1 x C row vector to every row.
  Ref add_rowvec(Ref a, Ref v) {
    if (v->value.rows() != 1 || v->value.cols() != a->value.cols())
      fail("shape", "add_rowvec " + dims(a) + " + " + dims(v));
    Mat<S> y = a->value.rowwise() + v->value.row(0);
    Ref out = make(std::move(y), a->needs_grad || v->needs_grad, nullptr);
    out->backward = [a, v, out] {
      if (a->needs_grad) acc(a) += out->grad;
      if (v->needs_grad) acc(v).row(0) += out->grad.colwise().sum();
    };
    return out;
  }

  Ref relu(Ref a) {
    Mat<S> y = a->value.cwiseMax(S(0));
    Ref out = make(std::move(y), a->needs_grad, nullptr);
    out->backward = [a, out] {
      if (!a->needs_grad) return;
      acc(a).array() +=
          out->grad.array() * (a->value.array() > S(0)).template cast<S>();
    };
    return out;
  }

  // Exact erf form; derivative 0.5*(1+erf(x/sqrt2)) + x*phi(x).
  Ref gelu(Ref a) {
    const S inv_sqrt2 = S(0.7071067811865475244L);
    Mat<S> y = a->value.unaryExpr([&](S x) {
      return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
    });
    Ref out = make(std::move(y), a->needs_grad, nullptr);
    out->backward = [a, out, inv_sqrt2] {
      if (!a->needs_grad) return;
      const S inv_sqrt2pi = S(0.3989422804014326779L);
      acc(a).array() += out->grad.array() * a->value.array().unaryExpr([&](S x) {
        const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
        const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
        return cdf + x * pdf;
      });
    };
    return out;
  }

  // Row-wise layer normalization with learned gain/bias (1 x C each).
  Ref layer_norm(Ref a, Ref gamma, Ref beta, S eps = S(1e-5)) {
    const auto n = a->value.cols();
    if (gamma->value.cols() != n || beta->value.cols() != n ||
        gamma->value.rows() != 1 || beta->value.rows() != 1)
      fail("shape", "layer_norm gain/bias must be 1 x " + std::to_string(n));
    Mat<S> xhat(a->value.rows(), n);
    Mat<S> inv_std(a->value.rows(), 1);
    for (Eigen::Index r = 0; r < a->value.rows(); ++r) {
      const S mu = a->value.row(r).mean();
      const S var = (a->value.row(r).array() - mu).square().mean();
      const S inv = S(1) / std::sqrt(var + eps);
      inv_std(r, 0) = inv;
      xhat.row(r) = (a->value.row(r).array() - mu) * inv;
    }
    Mat<S> y = (xhat.array().rowwise() * gamma->value.row(0).array()).rowwise() +
               beta->value.row(0).array();
    bool needs = a->needs_grad || gamma->needs_grad || beta->needs_grad;
    Ref out = make(std::move(y), needs, nullptr);
    // Keep xhat/inv_std alive in the closure for the backward pass.
    out->backward = [a, gamma, beta, out, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)] {
      if (beta->needs_grad) acc(beta).row(0) += out->grad.colwise().sum();
      if (gamma->needs_grad)
        acc(gamma).row(0) +=
            (out->grad.array() * xhat.array()).colwise().sum().matrix();
      if (!a->needs_grad) return;
      for (Eigen::Index r = 0; r < a->value.rows(); ++r) {
        Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
            out->grad.row(r).array() * gamma->value.row(0).array();
        const S m1 = dxhat.mean();
        const S m2 = (dxhat * xhat.row(r).array()).mean();
        acc(a).row(r).array() +=
            inv_std(r, 0) * (dxhat - m1 - xhat.row(r).array() * m2);
      }
    };
    return out;
  }

  // Row-wise softmax with max subtraction.
  Ref softmax_rows(Ref a) {
    Mat<S> y(a->value.rows(), a->value.cols());
    for (Eigen::Index r = 0; r < a->value.rows(); ++r) {
      const S m = a->value.row(r).maxCoeff();
      y.row(r) = (a->value.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
    Ref out = make(std::move(y), a->needs_grad, nullptr);
    out->backward = [a, out] {
      if (!a->needs_grad) return;
      for (Eigen::Index r = 0; r < out->value.rows(); ++r) {
        const S dot = out->grad.row(r).dot(out->value.row(r));
        acc(a).row(r).array() +=
            out->value.row(r).array() * (out->grad.row(r).array() - dot);
      }
    };
    return out;
  }

  Ref transpose(Ref a) {
    Ref out = make(a->value.transpose(), a->needs_grad, nullptr);
    out->backward = [a, out] {
      if (a->needs_grad) acc(a) += out->grad.transpose();
    };
    return out;
  }

  Ref slice_cols(Ref a, Eigen::Index c0, Eigen::Index nc) {
    if (c0 < 0 || c0 + nc > a->value.cols())
      fail("shape", "slice_cols out of range on " + dims(a));
    Ref out = make(a->value.middleCols(c0, nc), a->needs_grad, nullptr);
    out->backward = [a, out, c0, nc] {
      if (a->needs_grad) acc(a).middleCols(c0, nc) += out->grad;
    };
    return out;
  }

  Ref slice_rows(Ref a, Eigen::Index r0, Eigen::Index nr) {
    if (r0 < 0 || r0 + nr > a->value.rows())
      fail("shape", "slice_rows out of range on " + dims(a));
    Ref out = make(a->value.middleRows(r0, nr), a->needs_grad, nullptr);
    out->backward = [a, out, r0, nr] {
      if (a->needs_grad) acc(a).middleRows(r0, nr) += out->grad;
    };
    return out;
  }

  Ref concat_cols(const std::vector<Ref>& parts) {
    if (parts.empty()) fail("shape", "concat_cols of nothing");
    Eigen::Index rows = parts[0]->value.rows(), cols = 0;
    bool needs = false;
    for (Ref p : parts) {
      if (p->value.rows() != rows) fail("shape", "concat_cols row mismatch");
      cols += p->value.cols();
      needs = needs || p->needs_grad;
    }
    Mat<S> y(rows, cols);
    Eigen::Index at = 0;
    for (Ref p : parts) {
      y.middleCols(at, p->value.cols()) = p->value;
      at += p->value.cols();
    }
    Ref out = make(std::move(y), needs, nullptr);
    out->backward = [parts, out] {
      Eigen::Index at = 0;
      for (Ref p : parts) {
        if (p->needs_grad) acc(p) += out->grad.middleCols(at, p->value.cols());
        at += p->value.cols();
      }
    };
    return out;
  }

  Ref concat_rows(const std::vector<Ref>& parts) {
    if (parts.empty()) fail("shape", "concat_rows of nothing");
    Eigen::Index cols = parts[0]->value.cols(), rows = 0;
    bool needs = false;
    for (Ref p : parts) {
      if (p->value.cols() != cols) fail("shape", "concat_rows col mismatch");
      rows += p->value.rows();
      needs = needs || p->needs_grad;
    }
    Mat<S> y(rows, cols);
    Eigen::Index at = 0;
    for (Ref p : parts) {
      y.middleRows(at, p->value.rows()) = p->value;
      at += p->value.rows();
    }
    Ref out = make(std::move(y), needs, nullptr);
    out->backward = [parts, out] {
      Eigen::Index at = 0;
      for (Ref p : parts) {
        if (p->needs_grad) acc(p) += out->grad.middleRows(at, p->value.rows());
        at += p->value.rows();
      }
    };
    return out;
  }

  // Row-major reinterpretation of the same buffer.
  Ref reshape(Ref a, Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != a->value.size())
      fail("shape", "reshape " + dims(a) + " to " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    Mat<S> y = Eigen::Map<const Mat<S>>(a->value.data(), rows, cols);
    Ref out = make(std::move(y), a->needs_grad, nullptr);
    out->backward = [a, out] {
      if (!a->needs_grad) return;
      acc(a) += Eigen::Map<const Mat<S>>(out->grad.data(), a->value.rows(),
                                         a->value.cols());
    };
    return out;
  }

  // Places row i of a at row target[i] of an m-row output. Targets must be
  // distinct; rows not targeted stay zero.
  Ref scatter_rows(Ref a, std::vector<int> target, Eigen::Index m) {
    if (static_cast<Eigen::Index>(target.size()) != a->value.rows())
      fail("shape", "scatter_rows target count mismatch");
    Mat<S> y = Mat<S>::Zero(m, a->value.cols());
    for (size_t i = 0; i < target.size(); ++i) {
      if (target[i] < 0 || target[i] >= m) fail("shape", "scatter_rows target range");
      y.row(target[i]) = a->value.row(static_cast<Eigen::Index>(i));
    }
    Ref out = make(std::move(y), a->needs_grad, nullptr);
    out->backward = [a, out, target = std::move(target)] {
      if (!a->needs_grad) return;
      for (size_t i = 0; i < target.size(); ++i)
        acc(a).row(static_cast<Eigen::Index>(i)) += out->grad.row(target[i]);
    };
    return out;
  }

  Ref sum_all(Ref a) {
    Mat<S> y(1, 1);
    y(0, 0) = a->value.sum();
    Ref out = make(std::move(y), a->needs_grad, nullptr);
    out->backward = [a, out] {
      if (a->needs_grad) acc(a).array() += out->grad(0, 0);
    };
    return out;
  }

  Ref mean_all(Ref a) { return scale(sum_all(a), S(1) / S(a->value.size())); }

  // Sum of the elementwise product with a fixed weight matrix; 1 x 1 output.
  Ref inner_const(Ref a, Mat<S> w) {
    if (w.rows() != a->value.rows() || w.cols() != a->value.cols())
      fail("shape", "inner_const weight shape mismatch");
    Mat<S> y(1, 1);
    y(0, 0) = (a->value.array() * w.array()).sum();
    Ref out = make(std::move(y), a->needs_grad, nullptr);
    out->backward = [a, out, w = std::move(w)] {
      if (a->needs_grad) acc(a) += out->grad(0, 0) * w;
    };
    return out;
  }

  // Weighted sum of 1 x 1 nodes.
  Ref weighted_sum(const std::vector<Ref>& terms, const std::vector<S>& weights) {
    if (terms.size() != weights.size() || terms.empty())
      fail("shape", "weighted_sum arity");
    Mat<S> y = Mat<S>::Zero(1, 1);
    bool needs = false;
    for (size_t i = 0; i < terms.size(); ++i) {
      if (terms[i]->value.size() != 1) fail("shape", "weighted_sum needs scalars");
      y(0, 0) += weights[i] * terms[i]->value(0, 0);
      needs = needs || terms[i]->needs_grad;
    }
    Ref out = make(std::move(y), needs, nullptr);
    out->backward = [terms, weights, out] {
      for (size_t i = 0; i < terms.size(); ++i)
        if (terms[i]->needs_grad) acc(terms[i])(0, 0) += weights[i] * out->grad(0, 0);
    };
    return out;
  }

  // Per-landmark negative Laplacian log-likelihood column (N x 1) from
  // predicted means (N x 2), raw Cholesky outputs (N x 3), and fixed targets.
  // Row formula with L = [[a,0],[b,c]], a = softplus(r0)+eps, c = softplus(r2)+eps:
  //   u = (mu0-g0)/a, v = (mu1-g1-b*u)/c,
  //   loss = ln a + ln c + sqrt(3*(u^2+v^2)).
  // The sqrt takes subgradient 0 at zero residual.
  Ref laplacian_terms(Ref mu, Ref chol_raw, const Mat<S>& gt, S eps = S(1e-6)) {
    const Eigen::Index n = mu->value.rows();
    if (mu->value.cols() != 2 || chol_raw->value.cols() != 3 ||
        chol_raw->value.rows() != n || gt.rows() != n || gt.cols() != 2)
      fail("shape", "laplacian_terms expects N x 2 mu, N x 3 chol, N x 2 gt");
    Mat<S> y(n, 1);
    Mat<S> work(n, 5);  // a, c, u, v, s  (b is read straight from chol_raw)
    for (Eigen::Index k = 0; k < n; ++k) {
      const S a = softplus(chol_raw->value(k, 0)) + eps;
      const S b = chol_raw->value(k, 1);
      const S c = softplus(chol_raw->value(k, 2)) + eps;
      const S u = (mu->value(k, 0) - gt(k, 0)) / a;
      const S v = (mu->value(k, 1) - gt(k, 1) - b * u) / c;
      const S s = std::sqrt(S(3) * (u * u + v * v));
      work(k, 0) = a;
      work(k, 1) = c;
      work(k, 2) = u;
      work(k, 3) = v;
      work(k, 4) = s;
      y(k, 0) = std::log(a) + std::log(c) + s;
    }
    bool needs = mu->needs_grad || chol_raw->needs_grad;
    Ref out = make(std::move(y), needs, nullptr);
    out->backward = [mu, chol_raw, out, work = std::move(work)] {
      for (Eigen::Index k = 0; k < out->value.rows(); ++k) {
        const S g = out->grad(k, 0);
        const S a = work(k, 0), c = work(k, 1);
        const S u = work(k, 2), v = work(k, 3), s = work(k, 4);
        const S b = chol_raw->value(k, 1);
        S da = S(1) / a, dc = S(1) / c, db = 0, de0 = 0, de1 = 0;
        if (s > S(0)) {
          const S su = S(3) * u / s;  // ds/du
          const S sv = S(3) * v / s;  // ds/dv
          de0 = (su - sv * b / c) / a;
          de1 = sv / c;
          da += (su - sv * b / c) * (-u / a);
          db += sv * (-u / c);
          dc += sv * (-v / c);
        }
        if (mu->needs_grad) {
          acc(mu)(k, 0) += g * de0;
          acc(mu)(k, 1) += g * de1;
        }
        if (chol_raw->needs_grad) {
          acc(chol_raw)(k, 0) += g * da * sigmoid(chol_raw->value(k, 0));
          acc(chol_raw)(k, 1) += g * db;
          acc(chol_raw)(k, 2) += g * dc * sigmoid(chol_raw->value(k, 2));
        }
      }
    };
    return out;
  }

  // Per-landmark Euclidean distance column (N x 1); subgradient 0 at zero.
  Ref euclidean_terms(Ref mu, const Mat<S>& gt) {
    const Eigen::Index n = mu->value.rows();
    if (mu->value.cols() != 2 || gt.rows() != n || gt.cols() != 2)
      fail("shape", "euclidean_terms expects N x 2 mu and gt");
    Mat<S> y(n, 1);
    for (Eigen::Index k = 0; k < n; ++k)
      y(k, 0) = std::hypot(mu->value(k, 0) - gt(k, 0), mu->value(k, 1) - gt(k, 1));
    Ref out = make(std::move(y), mu->needs_grad, nullptr);
    out->backward = [mu, out, gt] {
      if (!mu->needs_grad) return;
      for (Eigen::Index k = 0; k < out->value.rows(); ++k) {
        const S d = out->value(k, 0);
        if (d <= S(0)) continue;
        const S g = out->grad(k, 0) / d;
        acc(mu)(k, 0) += g * (mu->value(k, 0) - gt(k, 0));
        acc(mu)(k, 1) += g * (mu->value(k, 1) - gt(k, 1));
      }
    };
    return out;
  }

  // Seeds root (must be 1 x 1) with 1 and sweeps the tape in reverse.
  void backward(Ref root) {
    if (root->value.size() != 1) fail("shape", "backward root must be 1 x 1");
    acc(root)(0, 0) += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<S>& node = *it;
      if (node.backward && node.needs_grad && node.grad.size() != 0)
        node.backward();
    }
  }

  size_t node_count() const { return nodes_.size(); }

  static S softplus(S x) {
    // For large x, log1p(exp(-x)) keeps full precision.
    return x > S(20) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  static S sigmoid(S x) {
    return x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                     : std::exp(x) / (S(1) + std::exp(x));
  }

 private:
  Ref make(Mat<S> v, bool needs, std::function<void()> bw) {
    nodes_.push_back(Node<S>{std::move(v), Mat<S>(), needs, std::move(bw)});
    return &nodes_.back();
  }

  // Lazily allocated gradient accumulator.
  static Mat<S>& acc(Ref n) {
    if (n->grad.size() == 0) n->grad = Mat<S>::Zero(n->value.rows(), n->value.cols());
    return n->grad;
  }

  static void same_shape(Ref a, Ref b, const char* op) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
      fail("shape", std::string(op) + " shape mismatch " + dims(a) + " vs " + dims(b));
  }

  static std::string dims(Ref a) {
    return std::to_string(a->value.rows()) + "x" + std::to_string(a->value.cols());
  }

  std::deque<Node<S>> nodes_;
};

}  // namespace mdmd
