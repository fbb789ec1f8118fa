#include "smamba/matrixview.hpp"

#include <doctest.h>

using namespace smamba;

namespace {

struct Instance {
  Vec<double> x, abar;
  Mat<double> B, C;
  std::vector<Mat<double>> rots;
};

Instance random_instance(Rng& rng, Index T, Index N, Index chunk) {
  Instance ins;
  ins.x = rng.gaussian<double>(T, 1).col(0);
  ins.B = rng.gaussian<double>(T, N);
  ins.C = rng.gaussian<double>(T, N);
  ins.abar.resize(T);
  for (Index t = 0; t < T; ++t) ins.abar[t] = rng.uniform(0.2, 0.99);
  for (Index c = 0; c < T / chunk; ++c) ins.rots.push_back(random_orthogonal(N, rng));
  return ins;
}

}  // namespace

TEST_CASE("z_trail identities and composition order") {
  Rng rng(3);
  const Index N = 4;
  std::vector<Mat<double>> z;
  for (int c = 0; c < 3; ++c) z.push_back(random_orthogonal(N, rng));

  CHECK((z_trail(z, 1, 1) - Mat<double>::Identity(N, N)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((z_trail(z, 0, 2) - z[0] * z[1]).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(z_trail(z, 2, 1), ContractError);

  const Mat<double> full = z_trail(z, 0, 3);
  CHECK((full.transpose() * full - Mat<double>::Identity(N, N)).norm() < 1e-12);

  // non-commutativity witnessed for generic rotations
  CHECK((z[0] * z[1] - z[1] * z[0]).norm() > 1e-3);
}

TEST_CASE("transfer matrix: rotation-free reduction and single chunk") {
  Rng rng(5);
  const Index T = 16, N = 3, chunk = 4;
  auto ins = random_instance(rng, T, N, chunk);

  // all Z = I equals the vanilla SSD matrix L (x) C B^T
  std::vector<Mat<double>> eye(ins.rots.size(), Mat<double>::Identity(N, N));
  const auto m_eye = build_transfer_matrix(ins.B, ins.C, ins.abar, eye, chunk);
  Mat<double> want = Mat<double>::Zero(T, T);
  for (Index t = 0; t < T; ++t)
    for (Index s = 0; s <= t; ++s)
      want(t, s) = cumulative_decay<double>(ins.abar, t, s) * ins.B.row(s).dot(ins.C.row(t));
  CHECK((m_eye.dense - want).cwiseAbs().maxCoeff() < 1e-12);

  // single chunk: intra-chunk block only, no rotation factor enters
  const auto m_single = build_transfer_matrix(ins.B.topRows(chunk), ins.C.topRows(chunk),
                                              ins.abar.head(chunk),
                                              {ins.rots[0]}, chunk);
  CHECK((m_single.dense - want.topLeftCorner(chunk, chunk)).cwiseAbs().maxCoeff() < 1e-12);

  // causality: everything above the diagonal is exactly zero
  const auto m = build_transfer_matrix(ins.B, ins.C, ins.abar, ins.rots, chunk);
  for (Index t = 0; t < T; ++t)
    for (Index s = t + 1; s < T; ++s) CHECK(m.dense(t, s) == 0.0);

  CHECK_THROWS_AS(
      build_transfer_matrix(Mat<double>::Zero(2048, N), Mat<double>::Zero(2048, N),
                            Vec<double>::Ones(2048), ins.rots, 64),
      ContractError);
}

TEST_CASE("scan equals materialized transfer matrix; cross-chunk formula") {
  Rng rng(7);
  const Index T = 32, N = 4, chunk = 8;
  for (int seed = 0; seed < 25; ++seed) {
    auto ins = random_instance(rng, T, N, chunk);
    CHECK(verify_scan_vs_matrix(ins.x, ins.B, ins.C, ins.abar, ins.rots, chunk) < 1e-8);
  }

  // x supported on chunk 0, read at chunk 3: coefficient is
  // a(t:s) B_s^T Z0 Z1 Z2 C_t pointwise
  auto ins = random_instance(rng, T, N, chunk);
  Vec<double> x0 = Vec<double>::Zero(T);
  x0.head(chunk) = ins.x.head(chunk);
  const Vec<double> y =
      scan_with_regram(x0, ins.B, ins.C, ins.abar, ins.rots, chunk, Mat<double>::Zero(1, N));
  const Mat<double> trail = ins.rots[0] * ins.rots[1] * ins.rots[2];
  for (Index t = 3 * chunk; t < T; ++t) {
    double want = 0;
    for (Index s = 0; s < chunk; ++s)
      want += cumulative_decay<double>(ins.abar, t, s) * x0[s] *
              (ins.B.row(s) * trail * ins.C.row(t).transpose())(0, 0);
    CHECK(y[t] == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("off-diagonal rank bound and numerical rank") {
  Rng rng(9);
  const Index T = 32, N = 4, chunk = 16;
  auto ins = random_instance(rng, T, N, chunk);
  const auto m = build_transfer_matrix(ins.B, ins.C, ins.abar, ins.rots, chunk);
  const Mat<double> off = m.block_at(1, 0);
  CHECK(numerical_rank(off) <= N);

  Mat<double> lowrank = rng.gaussian<double>(8, 2) * rng.gaussian<double>(2, 8);
  CHECK(numerical_rank(lowrank) == 2);
  CHECK(numerical_rank(Mat<double>::Zero(4, 4)) == 0);
}

TEST_CASE("equivariance: joint rotation invariant, state-only rotation is not") {
  Rng rng(11);
  const Index T = 32, N = 4, chunk = 8;
  auto ins = random_instance(rng, T, N, chunk);
  const Mat<double> h0 = rng.gaussian<double>(1, N);
  const Mat<double> Q = random_orthogonal(N, rng);
  const auto m = build_transfer_matrix(ins.B, ins.C, ins.abar, {}, chunk);
  const auto rep = rank_and_equivariance_checks(m, ins.x, ins.B, ins.C, ins.abar, h0, Q);
  CHECK(rep.joint_rotation_diff < 1e-10);
  CHECK(rep.state_only_diff > 1e-3);
  CHECK(rep.rank_ok);

  // regrammed scan with rotations conjugated by Q is also invariant: the
  // equivariance break comes precisely from rotating the state alone
  std::vector<Mat<double>> conj;
  for (const auto& z : ins.rots) conj.push_back(Q.transpose() * z * Q);
  const Vec<double> y0 =
      scan_with_regram(ins.x, ins.B, ins.C, ins.abar, ins.rots, chunk, h0);
  const Vec<double> yq = scan_with_regram(ins.x, ins.B * Q, ins.C * Q, ins.abar, conj, chunk,
                                          h0 * Q);
  CHECK((y0 - yq).cwiseAbs().maxCoeff() < 1e-10);
}
