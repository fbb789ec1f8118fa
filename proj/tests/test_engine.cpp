#include "smamba/engine.hpp"

#include <doctest.h>

#include <functional>

using namespace smamba;
using ad::Var;

namespace {

// finite-difference check of d(loss)/d(x) for a scalar-valued graph builder
void fd_check(Mat<double> x0,
              const std::function<Var<double>(const Var<double>&)>& build,
              double tol = 1e-6) {
  Var<double> x = Var<double>::param(x0);
  Var<double> loss = build(x);
  ad::backward(loss);
  REQUIRE(x.has_grad());
  const Mat<double> ga = x.grad();

  const double h = 1e-6;
  for (Index i = 0; i < x0.rows(); ++i)
    for (Index j = 0; j < x0.cols(); ++j) {
      Mat<double> xp = x0, xm = x0;
      xp(i, j) += h;
      xm(i, j) -= h;
      ad::NoGradGuard ng;
      const double fp = build(Var<double>::constant(xp)).item();
      const double fm = build(Var<double>::constant(xm)).item();
      const double fd = (fp - fm) / (2 * h);
      CHECK(std::abs(ga(i, j) - fd) / std::max({std::abs(fd), std::abs(ga(i, j)), 1e-4}) <
            tol);
    }
}

}  // namespace

TEST_CASE("elementwise and broadcast gradients") {
  Rng rng(3);
  const Mat<double> a0 = rng.gaussian<double>(3, 4);
  const Mat<double> b0 = rng.gaussian<double>(3, 4);
  const Mat<double> row = rng.gaussian<double>(1, 4);
  const Mat<double> col = rng.gaussian<double>(3, 1);

  fd_check(a0, [&](const Var<double>& x) {
    return ad::sum(x * Var<double>::constant(b0) + x + x / Var<double>::constant(b0.array().abs().matrix() + Mat<double>::Constant(3,4,1.0)));
  });
  fd_check(row, [&](const Var<double>& x) {
    return ad::sum(Var<double>::constant(a0) * x - x);
  });
  fd_check(col, [&](const Var<double>& x) {
    return ad::sum(Var<double>::constant(a0) / (x * x + 2.0));
  });
  // scalar broadcast both ways
  fd_check(Mat<double>::Constant(1, 1, 0.7), [&](const Var<double>& x) {
    return ad::sum(Var<double>::constant(a0) * x + (x - 1.5));
  });
}

TEST_CASE("unary function gradients") {
  Rng rng(5);
  const Mat<double> x0 = rng.gaussian<double>(3, 3);
  fd_check(x0, [](const Var<double>& x) { return ad::sum(ad::exp(x)); });
  fd_check(x0, [](const Var<double>& x) { return ad::sum(ad::sigmoid(x)); });
  fd_check(x0, [](const Var<double>& x) { return ad::sum(ad::silu(x)); });
  fd_check(x0, [](const Var<double>& x) { return ad::sum(ad::gelu(x)); });
  fd_check(x0, [](const Var<double>& x) { return ad::sum(ad::softplus(x)); });
  fd_check(x0, [](const Var<double>& x) { return ad::sum(ad::log(x * x + 1.0)); });
  fd_check(x0, [](const Var<double>& x) { return ad::sum(ad::sqrt(x * x + 0.5)); });
}

TEST_CASE("matmul, transpose, solve gradients") {
  Rng rng(7);
  const Mat<double> a0 = rng.gaussian<double>(3, 4);
  const Mat<double> b0 = rng.gaussian<double>(4, 2);
  fd_check(a0, [&](const Var<double>& x) {
    return ad::sum(ad::matmul(x, Var<double>::constant(b0)));
  });
  fd_check(b0, [&](const Var<double>& x) {
    return ad::sum(ad::matmul(Var<double>::constant(a0), x) * 0.5);
  });
  fd_check(a0, [&](const Var<double>& x) {
    return ad::sum(ad::transpose(x) * Var<double>::constant(b0.topRows(4).leftCols(3)));
  });

  // solve: perturb both the matrix and the right-hand side
  Mat<double> m0 = rng.gaussian<double>(3, 3) + 4.0 * Mat<double>::Identity(3, 3);
  const Mat<double> rhs = rng.gaussian<double>(3, 2);
  fd_check(m0, [&](const Var<double>& x) {
    return ad::sum(ad::solve(x, Var<double>::constant(rhs)));
  }, 1e-5);
  fd_check(rhs, [&](const Var<double>& x) {
    return ad::sum(ad::solve(Var<double>::constant(m0), x));
  }, 1e-5);
}

TEST_CASE("reductions, cumsum, structure gradients") {
  Rng rng(9);
  const Mat<double> x0 = rng.gaussian<double>(4, 3);
  fd_check(x0, [](const Var<double>& x) {
    return ad::sum(ad::rowwise_sum(x * x));
  });
  fd_check(x0, [](const Var<double>& x) {
    return ad::sum(ad::colwise_sum(ad::exp(x)) * Var<double>::constant(Mat<double>::Constant(1, 3, 0.5)));
  });
  fd_check(x0, [](const Var<double>& x) {
    return ad::sum(ad::cumsum_down(x) * ad::cumsum_down(x));
  });
  fd_check(x0, [](const Var<double>& x) {
    Var<double> b = ad::block(x, 1, 1, 2, 2);
    return ad::sum(b * b) + ad::sum(ad::reshape(x, 3, 4));
  });
  fd_check(x0, [](const Var<double>& x) {
    return ad::sum(ad::vconcat(x, x * 2.0) * 1.5) + ad::sum(ad::hconcat(x, x));
  });
  fd_check(x0, [](const Var<double>& x) { return ad::mean_all(x * x * x); });
}

TEST_CASE("composite layers match finite differences") {
  Rng rng(11);
  const Mat<double> x0 = rng.gaussian<double>(5, 6);
  const Mat<double> g0 = rng.gaussian<double>(1, 6);
  const Mat<double> w0 = rng.gaussian<double>(4, 6);

  fd_check(x0, [&](const Var<double>& x) {
    return ad::sum(ad::layer_norm_rows(x, Var<double>::constant(g0),
                                       Var<double>::constant(Mat<double>::Zero(1, 6))));
  }, 1e-5);
  fd_check(g0, [&](const Var<double>& g) {
    return ad::sum(ad::rms_norm_rows(Var<double>::constant(x0), g));
  });
  fd_check(w0, [&](const Var<double>& w) {
    return ad::sum(ad::softmax_rows(ad::linear(Var<double>::constant(x0), w)) *
                   Var<double>::constant(rng.gaussian<double>(5, 4)));
  }, 1e-5);
}

TEST_CASE("softmax rows sum to one and clamp_min gates gradient") {
  Rng rng(13);
  const Mat<double> x0 = rng.gaussian<double>(6, 5, 3.0);
  ad::NoGradGuard ng;
  const Mat<double> p = ad::softmax_rows(Var<double>::constant(x0)).val();
  for (Index t = 0; t < 6; ++t) CHECK(p.row(t).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.minCoeff() > 0.0);

  Mat<double> lo(1, 2);
  lo << 0.5, -0.5;
  const Mat<double> c = ad::clamp_min(Var<double>::constant(lo), 0.0).val();
  CHECK(c(0, 0) == 0.5);
  CHECK(c(0, 1) == 0.0);
}

TEST_CASE("no-grad mode records nothing; unused params have empty grads") {
  Mat<double> x0 = Mat<double>::Ones(2, 2);
  ad::NoGradGuard ng;
  Var<double> x = Var<double>::param(x0);
  Var<double> y = ad::sum(x * x);
  CHECK(!y.needs());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("gradient accumulates across shared subexpressions") {
  Mat<double> x0 = Mat<double>::Constant(1, 1, 3.0);
  Var<double> x = Var<double>::param(x0);
  Var<double> y = x * x + x * x;  // d/dx = 4x
  ad::backward(ad::sum(y));
  CHECK(x.grad()(0, 0) == doctest::Approx(12.0).epsilon(1e-12));
}
