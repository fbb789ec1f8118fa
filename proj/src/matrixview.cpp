#include "smamba/matrixview.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

namespace smamba {

Mat<double> z_trail(const std::vector<Mat<double>>& rotations, Index c_from, Index c_to) {
  require(c_from <= c_to, "z_trail: need c_from <= c_to");
  require(c_to == c_from || Index(rotations.size()) >= c_to, "z_trail: rotation list too short");
  if (c_from == c_to) {
    const Index n = rotations.empty() ? 0 : rotations[0].rows();
    return Mat<double>::Identity(n, n);
  }
  Mat<double> z = rotations[c_from];
  for (Index c = c_from + 1; c < c_to; ++c) z = z * rotations[c];
  return z;
}

TransferMatrix build_transfer_matrix(const Mat<double>& B, const Mat<double>& C,
                                     const Vec<double>& a_bars,
                                     const std::vector<Mat<double>>& rotations,
                                     Index chunk_size) {
  const Index T = B.rows();
  require(T <= kDenseCap, "build_transfer_matrix: dense materialization capped at T <= 1024");
  require(C.rows() == T && a_bars.size() == T, "build_transfer_matrix: length mismatch");
  require(chunk_size >= 1 && T % chunk_size == 0,
          "build_transfer_matrix: T must be a multiple of chunk_size");

  TransferMatrix m;
  m.chunk = chunk_size;
  m.state_dim = B.cols();
  m.n_chunks = T / chunk_size;
  m.dense = Mat<double>::Zero(T, T);

  // cumulative decays a(t:s) by the recurrence a(t:s) = abar_t * a(t-1:s)
  Mat<double> a = Mat<double>::Zero(T, T);
  for (Index s = 0; s < T; ++s) {
    a(s, s) = 1.0;
    for (Index t = s + 1; t < T; ++t) a(t, s) = a_bars[t] * a(t - 1, s);
  }

  for (Index c = 0; c < m.n_chunks; ++c) {
    for (Index cp = 0; cp <= c; ++cp) {
      // an empty rotation list is the vanilla SSD case (all trails identity)
      const Mat<double> zt = (c == cp || rotations.empty())
                                 ? Mat<double>::Identity(m.state_dim, m.state_dim)
                                 : z_trail(rotations, cp, c);
      for (Index t = c * chunk_size; t < (c + 1) * chunk_size; ++t) {
        for (Index s = cp * chunk_size; s < (cp + 1) * chunk_size && s <= t; ++s) {
          m.dense(t, s) = a(t, s) * (B.row(s) * zt * C.row(t).transpose())(0, 0);
        }
      }
    }
  }
  return m;
}

Vec<double> scan_with_regram(const Vec<double>& x, const Mat<double>& B, const Mat<double>& C,
                             const Vec<double>& a_bars,
                             const std::vector<Mat<double>>& rotations, Index chunk_size,
                             const Mat<double>& h0) {
  const Index T = x.size(), N = B.cols();
  Mat<double> xm(T, 1);
  xm.col(0) = x;
  Mat<double> abar(T, 1);
  abar.col(0) = a_bars;

  SsmState<double> state(1, 1, N);
  state.values = h0;
  Vec<double> y(T);
  Index c = 0;
  for (Index t0 = 0; t0 < T; t0 += chunk_size, ++c) {
    const Index Lc = std::min(chunk_size, T - t0);
    auto res = chunked_scan_abar<double>(xm.middleRows(t0, Lc), abar.middleRows(t0, Lc),
                                         B.middleRows(t0, Lc), C.middleRows(t0, Lc), state,
                                         Lc);
    y.segment(t0, Lc) = res.y.col(0);
    state = res.chunk_states.back();
    if (Index(rotations.size()) > c && Lc == chunk_size)
      state.values = state.values * rotations[c];
  }
  return y;
}

double verify_scan_vs_matrix(const Vec<double>& x, const Mat<double>& B, const Mat<double>& C,
                             const Vec<double>& a_bars,
                             const std::vector<Mat<double>>& rotations, Index chunk_size) {
  const Mat<double> h0 = Mat<double>::Zero(1, B.cols());
  const Vec<double> y_scan = scan_with_regram(x, B, C, a_bars, rotations, chunk_size, h0);
  const TransferMatrix m = build_transfer_matrix(B, C, a_bars, rotations, chunk_size);
  return (y_scan - m.dense * x).cwiseAbs().maxCoeff();
}

Index numerical_rank(const Mat<double>& m, double eps) {
  Eigen::JacobiSVD<Mat<double>> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv[0] == 0.0) return 0;
  Index r = 0;
  for (Index i = 0; i < sv.size(); ++i) r += sv[i] > eps * sv[0] ? 1 : 0;
  return r;
}

Mat<double> random_orthogonal(Index n, Rng& rng) {
  const Mat<double> g = rng.gaussian<double>(n, n);
  Eigen::HouseholderQR<Mat<double>> qr(g);
  Mat<double> q = qr.householderQ();
  const Mat<double> r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index i = 0; i < n; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  return q;
}

RankEquivReport rank_and_equivariance_checks(const TransferMatrix& m, const Vec<double>& x,
                                             const Mat<double>& B, const Mat<double>& C,
                                             const Vec<double>& a_bars, const Mat<double>& h0,
                                             const Mat<double>& Q) {
  RankEquivReport rep;
  rep.rank_ok = true;
  for (Index c = 0; c < m.n_chunks; ++c)
    for (Index cp = 0; cp < c; ++cp) {
      const Index r = numerical_rank(m.block_at(c, cp));
      rep.max_offdiag_rank = std::max(rep.max_offdiag_rank, r);
      if (r > m.state_dim) rep.rank_ok = false;
    }

  const std::vector<Mat<double>> no_rot;
  const Vec<double> y0 = scan_with_regram(x, B, C, a_bars, no_rot, m.chunk, h0);
  const Vec<double> y_joint =
      scan_with_regram(x, B * Q, C * Q, a_bars, no_rot, m.chunk, h0 * Q);
  const Vec<double> y_state = scan_with_regram(x, B, C, a_bars, no_rot, m.chunk, h0 * Q);
  rep.joint_rotation_diff = (y_joint - y0).cwiseAbs().maxCoeff();
  rep.state_only_diff = (y_state - y0).cwiseAbs().maxCoeff();
  return rep;
}

}  // namespace smamba
