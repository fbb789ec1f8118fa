#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
// Graphs are built eagerly by value-semantic Var handles; backward() walks
// the recorded closure list in reverse topological order. Each graph island
// is confined to the thread that built it.

#include "smamba/common.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace smamba::ad {

using smamba::Index;
using smamba::Mat;

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <class S>
struct Node {
  Mat<S> val;
  Mat<S> grad;
  bool needs = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> back;

  void accum(const Mat<S>& g) {
    if (grad.size() == 0) grad = Mat<S>::Zero(val.rows(), val.cols());
    grad += g;
  }
};

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

  static Var constant(Mat<S> v) {
    auto n = std::make_shared<Node<S>>();
    n->val = std::move(v);
    return Var(n);
  }
  static Var scalar(S v) { return constant(Mat<S>::Constant(1, 1, v)); }
  static Var param(Mat<S> v) {
    auto n = std::make_shared<Node<S>>();
    n->val = std::move(v);
    n->needs = g_grad_enabled;
    return Var(n);
  }

  const Mat<S>& val() const { return n_->val; }
  const Mat<S>& grad() const { return n_->grad; }
  bool has_grad() const { return n_ && n_->grad.size() != 0; }
  bool needs() const { return n_ && n_->needs; }
  bool defined() const { return bool(n_); }
  Index rows() const { return n_->val.rows(); }
  Index cols() const { return n_->val.cols(); }
  S item() const { return n_->val(0, 0); }
  std::shared_ptr<Node<S>> node() const { return n_; }

 private:
  std::shared_ptr<Node<S>> n_;
};

template <class S, class BackFn>
Var<S> make_op(Mat<S> val, std::initializer_list<Var<S>> parents, BackFn&& back) {
  auto n = std::make_shared<Node<S>>();
  n->val = std::move(val);
  if (g_grad_enabled) {
    bool needs = false;
    for (const auto& p : parents) needs |= p.needs();
    if (needs) {
      n->needs = true;
      for (const auto& p : parents) n->parents.push_back(p.node());
      n->back = std::forward<BackFn>(back);
    }
  }
  return Var<S>(n);
}

// ---- broadcasting -------------------------------------------------------

template <class S>
Mat<S> broadcast_to(const Mat<S>& x, Index r, Index c) {
  if (x.rows() == r && x.cols() == c) return x;
  require((x.rows() == r || x.rows() == 1) && (x.cols() == c || x.cols() == 1),
          "broadcast: incompatible shapes");
  return x.replicate(r / x.rows(), c / x.cols());
}

template <class S>
Mat<S> reduce_to(const Mat<S>& g, Index r, Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  Mat<S> out = g;
  if (r == 1 && g.rows() != 1) out = out.colwise().sum().eval();
  if (c == 1 && out.cols() != 1) out = out.rowwise().sum().eval();
  return out;
}

namespace detail {
template <class S>
std::pair<Index, Index> bshape(const Var<S>& a, const Var<S>& b) {
  const Index r = std::max(a.rows(), b.rows()), c = std::max(a.cols(), b.cols());
  require((a.rows() == r || a.rows() == 1) && (b.rows() == r || b.rows() == 1) &&
              (a.cols() == c || a.cols() == 1) && (b.cols() == c || b.cols() == 1),
          "elementwise op: incompatible shapes");
  return {r, c};
}
}  // namespace detail

// ---- arithmetic ---------------------------------------------------------

template <class S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
  auto [r, c] = detail::bshape(a, b);
  Mat<S> v = broadcast_to(a.val(), r, c) + broadcast_to(b.val(), r, c);
  auto an = a.node(), bn = b.node();
  return make_op<S>(std::move(v), {a, b}, [an, bn](Node<S>& self) {
    if (an->needs) an->accum(reduce_to(self.grad, an->val.rows(), an->val.cols()));
    if (bn->needs) bn->accum(reduce_to(self.grad, bn->val.rows(), bn->val.cols()));
  });
}

template <class S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
  auto [r, c] = detail::bshape(a, b);
  Mat<S> v = broadcast_to(a.val(), r, c) - broadcast_to(b.val(), r, c);
  auto an = a.node(), bn = b.node();
  return make_op<S>(std::move(v), {a, b}, [an, bn](Node<S>& self) {
    if (an->needs) an->accum(reduce_to(self.grad, an->val.rows(), an->val.cols()));
    if (bn->needs) bn->accum(reduce_to((-self.grad).eval(), bn->val.rows(), bn->val.cols()));
  });
}

template <class S>
Var<S> operator*(const Var<S>& a, const Var<S>& b) {
  auto [r, c] = detail::bshape(a, b);
  Mat<S> v =
      broadcast_to(a.val(), r, c).cwiseProduct(broadcast_to(b.val(), r, c));
  auto an = a.node(), bn = b.node();
  return make_op<S>(std::move(v), {a, b}, [an, bn, r, c](Node<S>& self) {
    if (an->needs)
      an->accum(reduce_to(self.grad.cwiseProduct(broadcast_to(bn->val, r, c)).eval(),
                          an->val.rows(), an->val.cols()));
    if (bn->needs)
      bn->accum(reduce_to(self.grad.cwiseProduct(broadcast_to(an->val, r, c)).eval(),
                          bn->val.rows(), bn->val.cols()));
  });
}

template <class S>
Var<S> operator/(const Var<S>& a, const Var<S>& b) {
  auto [r, c] = detail::bshape(a, b);
  const Mat<S> bb = broadcast_to(b.val(), r, c);
  Mat<S> v = broadcast_to(a.val(), r, c).cwiseQuotient(bb);
  auto an = a.node(), bn = b.node();
  return make_op<S>(std::move(v), {a, b}, [an, bn, r, c](Node<S>& self) {
    const Mat<S> bb2 = broadcast_to(bn->val, r, c);
    if (an->needs)
      an->accum(reduce_to(self.grad.cwiseQuotient(bb2).eval(), an->val.rows(), an->val.cols()));
    if (bn->needs) {
      const Mat<S> ab = broadcast_to(an->val, r, c);
      Mat<S> gb = -self.grad.cwiseProduct(ab).cwiseQuotient(bb2.cwiseProduct(bb2));
      bn->accum(reduce_to(gb, bn->val.rows(), bn->val.cols()));
    }
  });
}

template <class S>
Var<S> operator-(const Var<S>& a) {
  auto an = a.node();
  return make_op<S>((-a.val()).eval(), {a}, [an](Node<S>& self) {
    if (an->needs) an->accum((-self.grad).eval());
  });
}

template <class S>
Var<S> operator*(const Var<S>& a, S s) {
  return a * Var<S>::scalar(s);
}
template <class S>
Var<S> operator*(S s, const Var<S>& a) {
  return a * Var<S>::scalar(s);
}
template <class S>
Var<S> operator+(const Var<S>& a, S s) {
  return a + Var<S>::scalar(s);
}
template <class S>
Var<S> operator-(const Var<S>& a, S s) {
  return a - Var<S>::scalar(s);
}
template <class S>
Var<S> operator-(S s, const Var<S>& a) {
  return Var<S>::scalar(s) - a;
}
template <class S>
Var<S> operator/(S s, const Var<S>& a) {
  return Var<S>::scalar(s) / a;
}

// ---- linear algebra -----------------------------------------------------

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions disagree");
  Mat<S> v = a.val() * b.val();
  auto an = a.node(), bn = b.node();
  return make_op<S>(std::move(v), {a, b}, [an, bn](Node<S>& self) {
    if (an->needs) an->accum(self.grad * bn->val.transpose());
    if (bn->needs) bn->accum(an->val.transpose() * self.grad);
  });
}

template <class S>
Var<S> transpose(const Var<S>& a) {
  auto an = a.node();
  return make_op<S>(a.val().transpose().eval(), {a}, [an](Node<S>& self) {
    if (an->needs) an->accum(self.grad.transpose());
  });
}

/// X = A^{-1} B via partial-pivot LU; differentiable through the solve.
template <class S>
Var<S> solve(const Var<S>& a, const Var<S>& b) {
  require(a.rows() == a.cols() && a.rows() == b.rows(), "solve: shape mismatch");
  Mat<S> x = a.val().partialPivLu().solve(b.val());
  auto an = a.node(), bn = b.node();
  return make_op<S>(std::move(x), {a, b}, [an, bn](Node<S>& self) {
    const Mat<S> gt = an->val.transpose().partialPivLu().solve(self.grad);
    if (bn->needs) bn->accum(gt);
    if (an->needs) an->accum((-gt * self.val.transpose()).eval());
  });
}

// ---- elementwise --------------------------------------------------------

template <class S, class F, class DFromInOut>
Var<S> unary_op(const Var<S>& a, F f, DFromInOut df) {
  Mat<S> v = a.val().unaryExpr(f);
  auto an = a.node();
  return make_op<S>(std::move(v), {a}, [an, df](Node<S>& self) {
    if (!an->needs) return;
    Mat<S> d(an->val.rows(), an->val.cols());
    for (Index j = 0; j < d.cols(); ++j)
      for (Index i = 0; i < d.rows(); ++i) d(i, j) = df(an->val(i, j), self.val(i, j));
    an->accum(self.grad.cwiseProduct(d).eval());
  });
}

template <class S>
Var<S> exp(const Var<S>& a) {
  return unary_op<S>(
      a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <class S>
Var<S> log(const Var<S>& a) {
  return unary_op<S>(
      a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <class S>
Var<S> sqrt(const Var<S>& a) {
  return unary_op<S>(
      a, [](S x) { return std::sqrt(x); }, [](S, S y) { return S(0.5) / y; });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  return unary_op<S>(
      a, [](S x) { return smamba::sigmoid(x); }, [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Var<S> silu(const Var<S>& a) {
  return unary_op<S>(
      a, [](S x) { return smamba::silu(x); },
      [](S x, S) {
        const S s = smamba::sigmoid(x);
        return s * (S(1) + x * (S(1) - s));
      });
}

template <class S>
Var<S> gelu(const Var<S>& a) {
  return unary_op<S>(
      a,
      [](S x) { return S(0.5) * x * (S(1) + std::erf(x / S(std::sqrt(2.0)))); },
      [](S x, S) {
        const S cdf = S(0.5) * (S(1) + std::erf(x / S(std::sqrt(2.0))));
        const S pdf = S(std::exp(-0.5 * double(x) * double(x)) / std::sqrt(2.0 * M_PI));
        return cdf + x * pdf;
      });
}

template <class S>
Var<S> softplus(const Var<S>& a) {
  return unary_op<S>(
      a, [](S x) { return smamba::softplus(x); }, [](S x, S) { return smamba::sigmoid(x); });
}

/// max(x, lo); subgradient 0 below the floor.
template <class S>
Var<S> clamp_min(const Var<S>& a, S lo) {
  return unary_op<S>(
      a, [lo](S x) { return std::max(x, lo); },
      [lo](S x, S) { return x > lo ? S(1) : S(0); });
}

// ---- reductions ---------------------------------------------------------

template <class S>
Var<S> sum(const Var<S>& a) {
  auto an = a.node();
  return make_op<S>(Mat<S>::Constant(1, 1, a.val().sum()), {a}, [an](Node<S>& self) {
    if (an->needs)
      an->accum(Mat<S>::Constant(an->val.rows(), an->val.cols(), self.grad(0, 0)));
  });
}

template <class S>
Var<S> rowwise_sum(const Var<S>& a) {
  auto an = a.node();
  return make_op<S>(a.val().rowwise().sum().eval(), {a}, [an](Node<S>& self) {
    if (an->needs) an->accum(self.grad.replicate(1, an->val.cols()).eval());
  });
}

template <class S>
Var<S> colwise_sum(const Var<S>& a) {
  auto an = a.node();
  return make_op<S>(a.val().colwise().sum().eval(), {a}, [an](Node<S>& self) {
    if (an->needs) an->accum(self.grad.replicate(an->val.rows(), 1).eval());
  });
}

template <class S>
Var<S> mean_all(const Var<S>& a) {
  return sum(a) * (S(1) / S(a.rows() * a.cols()));
}

/// Columnwise inclusive cumulative sum from the top row down.
template <class S>
Var<S> cumsum_down(const Var<S>& a) {
  Mat<S> v = a.val();
  for (Index i = 1; i < v.rows(); ++i) v.row(i) += v.row(i - 1);
  auto an = a.node();
  return make_op<S>(std::move(v), {a}, [an](Node<S>& self) {
    if (!an->needs) return;
    Mat<S> g = self.grad;
    for (Index i = g.rows() - 2; i >= 0; --i) g.row(i) += g.row(i + 1);
    an->accum(g);
  });
}

// ---- structure ----------------------------------------------------------

template <class S>
Var<S> block(const Var<S>& a, Index i, Index j, Index p, Index q) {
  require(i >= 0 && j >= 0 && i + p <= a.rows() && j + q <= a.cols(),
          "block: out of bounds");
  auto an = a.node();
  return make_op<S>(a.val().block(i, j, p, q).eval(), {a}, [an, i, j, p, q](Node<S>& self) {
    if (!an->needs) return;
    Mat<S> g = Mat<S>::Zero(an->val.rows(), an->val.cols());
    g.block(i, j, p, q) = self.grad;
    an->accum(g);
  });
}

template <class S>
Var<S> vconcat(const Var<S>& a, const Var<S>& b) {
  require(a.cols() == b.cols(), "vconcat: column mismatch");
  Mat<S> v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.val();
  v.bottomRows(b.rows()) = b.val();
  auto an = a.node(), bn = b.node();
  return make_op<S>(std::move(v), {a, b}, [an, bn](Node<S>& self) {
    if (an->needs) an->accum(self.grad.topRows(an->val.rows()).eval());
    if (bn->needs) bn->accum(self.grad.bottomRows(bn->val.rows()).eval());
  });
}

template <class S>
Var<S> hconcat(const Var<S>& a, const Var<S>& b) {
  require(a.rows() == b.rows(), "hconcat: row mismatch");
  Mat<S> v(a.rows(), a.cols() + b.cols());
  v.leftCols(a.cols()) = a.val();
  v.rightCols(b.cols()) = b.val();
  auto an = a.node(), bn = b.node();
  return make_op<S>(std::move(v), {a, b}, [an, bn](Node<S>& self) {
    if (an->needs) an->accum(self.grad.leftCols(an->val.cols()).eval());
    if (bn->needs) bn->accum(self.grad.rightCols(bn->val.cols()).eval());
  });
}

/// Column-major reinterpretation to r x c.
template <class S>
Var<S> reshape(const Var<S>& a, Index r, Index c) {
  require(a.rows() * a.cols() == r * c, "reshape: element count mismatch");
  Mat<S> v = Eigen::Map<const Mat<S>>(a.val().data(), r, c);
  auto an = a.node();
  return make_op<S>(std::move(v), {a}, [an](Node<S>& self) {
    if (an->needs)
      an->accum(Mat<S>(Eigen::Map<const Mat<S>>(self.grad.data(), an->val.rows(),
                                                an->val.cols())));
  });
}

template <class S>
Var<S> detach(const Var<S>& a) {
  return Var<S>::constant(a.val());
}

// ---- composites ---------------------------------------------------------

/// y = x W^T + b with W out x in and b a 1 x out row (may be undefined).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b = Var<S>()) {
  Var<S> y = matmul(x, transpose(w));
  if (b.defined()) y = y + b;
  return y;
}

template <class S>
Var<S> layer_norm_rows(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                       S eps = S(1e-5)) {
  const S invc = S(1) / S(x.cols());
  Var<S> m = rowwise_sum(x) * invc;
  Var<S> d = x - m;
  Var<S> var = rowwise_sum(d * d) * invc;
  Var<S> xn = d / sqrt(var + eps);
  return xn * gamma + beta;
}

template <class S>
Var<S> rms_norm_rows(const Var<S>& x, const Var<S>& gamma, S eps = S(1e-5)) {
  const S invc = S(1) / S(x.cols());
  Var<S> ms = rowwise_sum(x * x) * invc;
  return x / sqrt(ms + eps) * gamma;
}

template <class S>
Var<S> softmax_rows(const Var<S>& x) {
  Var<S> shift = Var<S>::constant(x.val().rowwise().maxCoeff());
  Var<S> e = exp(x - shift);
  return e / rowwise_sum(e);
}

// ---- backward -----------------------------------------------------------

template <class S>
void backward(const Var<S>& loss) {
  require(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be 1x1");
  if (!loss.needs()) return;

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<S>* p = n->parents[idx++].get();
      if (p->needs && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->grad = Mat<S>::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->back && n->grad.size() != 0) n->back(*n);
  }
}

}  // namespace smamba::ad
