#include "smamba/regram.hpp"

#include <doctest.h>

using namespace smamba;

namespace {

PlaneMlpHead<double> random_mlp(Rng& rng, Index P, Index N, Index r, Index hid) {
  PlaneMlpHead<double> m;
  m.uv_w1 = rng.gaussian<double>(hid, P);
  m.uv_b1 = rng.gaussian<double>(1, hid);
  m.uv_w2 = rng.gaussian<double>(2 * N * r, hid, 0.2);
  m.uv_b2 = rng.gaussian<double>(1, 2 * N * r, 0.2);
  m.th_w1 = rng.gaussian<double>(hid, P);
  m.th_b1 = rng.gaussian<double>(1, hid);
  m.th_w2 = rng.gaussian<double>(r, hid, 0.2);
  m.th_b2 = rng.gaussian<double>(1, r, 0.2);
  return m;
}

}  // namespace

TEST_CASE("chunk summary: pooling and normalization") {
  const Index H = 2, P = 4;
  const Mat<double> gamma = Mat<double>::Ones(H, P), beta = Mat<double>::Zero(H, P);

  // constant-in-time chunk with identity affine -> zero descriptor
  Mat<double> y = Mat<double>::Ones(6, H * P);
  y.col(1).setConstant(3.0);
  const auto phi = chunk_summary<double>(y, H, P, gamma, beta);
  // LN of a constant row is zero only if the row itself is constant; build one
  Mat<double> yc(5, H * P);
  for (Index t = 0; t < 5; ++t) yc.row(t).setConstant(2.5);
  CHECK(chunk_summary<double>(yc, H, P, gamma, beta).phi.cwiseAbs().maxCoeff() < 1e-7);

  // single-frame chunk is the LN of that frame
  Rng rng(3);
  const Mat<double> one = rng.gaussian<double>(1, H * P);
  const auto p1 = chunk_summary<double>(one, H, P, gamma, beta);
  for (Index h = 0; h < H; ++h) {
    const Vec<double> want = layer_norm_vec<double>(one.row(0).segment(h * P, P).transpose(),
                                                    gamma.row(h).transpose(),
                                                    beta.row(h).transpose());
    CHECK((p1.phi.row(h).transpose() - want).cwiseAbs().maxCoeff() == 0.0);
  }

  // pooling is the arithmetic mean
  const Mat<double> yr = rng.gaussian<double>(7, H * P);
  const auto pr = chunk_summary<double>(yr, H, P, gamma, beta);
  const Vec<double> mean = yr.colwise().mean().transpose();
  for (Index h = 0; h < H; ++h) {
    const Vec<double> want = layer_norm_vec<double>(mean.segment(h * P, P),
                                                    gamma.row(h).transpose(),
                                                    beta.row(h).transpose());
    CHECK((pr.phi.row(h).transpose() - want).cwiseAbs().maxCoeff() < 1e-14);
  }

  CHECK_THROWS_AS(chunk_summary<double>(Mat<double>(0, H * P), H, P, gamma, beta),
                  ContractError);
  CHECK(phi.phi.allFinite());
}

TEST_CASE("predict_planes: unit columns, softplus angles, zero-input guard") {
  Rng rng(5);
  const Index P = 6, N = 8, r = 3, hid = 6;
  const auto mlp = random_mlp(rng, P, N, r, hid);
  for (int i = 0; i < 30; ++i) {
    const auto rot = predict_planes<double>(rng.gaussian<double>(P, 1), mlp, N, r);
    for (Index j = 0; j < r; ++j) {
      CHECK(std::abs(rot.U.col(j).norm() - 1.0) < 1e-6);
      CHECK(std::abs(rot.V.col(j).norm() - 1.0) < 1e-6);
      CHECK(rot.theta[j] >= 0.0);
    }
  }
  CHECK(softplus(-4.0) == doctest::Approx(0.01815).epsilon(1e-3));

  // zero-norm columns survive via the epsilon guard
  Mat<double> zero = Mat<double>::Zero(N, r);
  const Mat<double> nz = normalize_columns<double>(zero);
  CHECK(nz.allFinite());
}

TEST_CASE("cayley rotation: identity, 2x2 closed form, orthogonality") {
  const Index N = 8, r = 2;
  Rng rng(7);
  Mat<double> U = normalize_columns<double>(rng.gaussian<double>(N, r));
  Mat<double> V = normalize_columns<double>(rng.gaussian<double>(N, r));

  // theta = 0 -> S = 0 -> Z = I
  const Mat<double> Zi = cayley_rotation<double>(U, V, Vec<double>::Zero(r));
  CHECK((Zi - Mat<double>::Identity(N, N)).cwiseAbs().maxCoeff() == 0.0);

  // N=2, r=1, U=e1, V=e2, theta=2: planar rotation by 90 degrees
  Mat<double> u2(2, 1), v2(2, 1);
  u2 << 1, 0;
  v2 << 0, 1;
  Vec<double> th2(1);
  th2 << 2.0;
  const Mat<double> sk = skew_generator<double>(u2, v2, th2);
  CHECK(sk(0, 1) == 2.0);
  CHECK(sk(1, 0) == -2.0);
  const Mat<double> Z2 = cayley_rotation<double>(u2, v2, th2);
  Mat<double> want(2, 2);
  want << 0, 1, -1, 0;
  CHECK((Z2 - want).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(plane_angle_deg<double>(2.0) == doctest::Approx(90.0));

  // random draws: exact skewness, orthogonality, det +1
  for (int i = 0; i < 50; ++i) {
    U = normalize_columns<double>(rng.gaussian<double>(N, r));
    V = normalize_columns<double>(rng.gaussian<double>(N, r));
    Vec<double> th = rng.uniform_mat<double>(r, 1, 0.0, 4.0).col(0);
    const Mat<double> S = skew_generator<double>(U, V, th);
    CHECK((S + S.transpose()).cwiseAbs().maxCoeff() == 0.0);
    const Mat<double> Z = cayley_rotation<double>(U, V, th);
    CHECK((Z.transpose() * Z - Mat<double>::Identity(N, N)).norm() < 1e-12);
    CHECK(Z.determinant() == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("apply_regram: norm preservation, commutation with scalar decay") {
  Rng rng(9);
  const Index H = 2, P = 3, N = 6;
  SsmState<double> h(H, P, N);
  h.values = rng.gaussian<double>(H * P, N);

  RotationOp<double> op;
  for (Index k = 0; k < H; ++k) {
    HeadRotation<double> rot;
    rot.U = normalize_columns<double>(rng.gaussian<double>(N, 2));
    rot.V = normalize_columns<double>(rng.gaussian<double>(N, 2));
    rot.theta = rng.uniform_mat<double>(2, 1, 0.0, 3.0).col(0);
    rot.Z = cayley_rotation<double>(rot.U, rot.V, rot.theta);
    op.push_back(rot);
  }

  SsmState<double> identity_case = h;
  RotationOp<double> id_op = op;
  for (auto& r : id_op) r.Z = Mat<double>::Identity(N, N);
  apply_regram<double>(identity_case, id_op);
  CHECK((identity_case.values - h.values).cwiseAbs().maxCoeff() == 0.0);

  // norm preserved per head across many composed rotations
  SsmState<double> rotated = h;
  for (int reps = 0; reps < 32; ++reps) apply_regram<double>(rotated, op);
  for (Index k = 0; k < H; ++k)
    CHECK(std::abs(rotated.head(k).norm() - h.head(k).norm()) / h.head(k).norm() < 1e-12);

  // (abar h) Z == abar (h Z) exactly
  const double abar = 0.73;
  SsmState<double> a = h, b = h;
  a.values *= abar;
  apply_regram<double>(a, op);
  apply_regram<double>(b, op);
  b.values *= abar;
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() == 0.0);

  RotationOp<double> wrong = op;
  wrong.pop_back();
  CHECK_THROWS_AS(apply_regram<double>(h, wrong), ContractError);
}

TEST_CASE("rotation analytics: self-similarity, orthogonal planes, angles") {
  Rng rng(11);
  const Index N = 8;
  auto make_op = [&](const Mat<double>& U, const Mat<double>& V, double theta) {
    RotationOp<double> op(1);
    op[0].U = U;
    op[0].V = V;
    op[0].theta = Vec<double>::Constant(U.cols(), theta);
    op[0].Z = cayley_rotation<double>(U, V, op[0].theta);
    return op;
  };

  Mat<double> U = normalize_columns<double>(rng.gaussian<double>(N, 2));
  Mat<double> V = normalize_columns<double>(rng.gaussian<double>(N, 2));
  const auto op = make_op(U, V, 1.0);
  const auto self = rotation_analytics<double>(op, op);
  CHECK(self.plane_cosine == doctest::Approx(1.0).epsilon(1e-12));

  // disjoint coordinate planes -> cosine 0
  Mat<double> U1 = Mat<double>::Zero(N, 1), V1 = Mat<double>::Zero(N, 1);
  Mat<double> U2 = Mat<double>::Zero(N, 1), V2 = Mat<double>::Zero(N, 1);
  U1(0, 0) = 1;
  V1(1, 0) = 1;
  U2(2, 0) = 1;
  V2(3, 0) = 1;
  const auto ortho =
      rotation_analytics<double>(make_op(U1, V1, 1.0), make_op(U2, V2, 1.0));
  CHECK(std::abs(ortho.plane_cosine) < 1e-14);

  const auto ninety = make_op(U1, V1, 2.0);
  const auto an = rotation_analytics<double>(ninety, ninety);
  CHECK(an.angles[0].min == doctest::Approx(90.0));
  CHECK(an.angles[0].max == doctest::Approx(90.0));
  CHECK(an.angles[0].mean == doctest::Approx(90.0));
}
