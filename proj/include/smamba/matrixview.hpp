#pragma once

// Matrix view of the regrammed scan: materialize the block lower-triangular
// transfer matrix M with accumulated boundary rotations and check it against
// the scan, the off-diagonal rank bound, and the equivariance pair. Single
// head, P = 1 (the general case stacks); double precision throughout.

#include "smamba/common.hpp"
#include "smamba/ssm.hpp"

#include <vector>

namespace smamba {

inline constexpr Index kDenseCap = 1024;

struct TransferMatrix {
  Mat<double> dense;  // T x T, strictly block lower-triangular
  Index chunk = 0;
  Index state_dim = 0;
  Index n_chunks = 0;

  Mat<double> block_at(Index c, Index cp) const {
    return dense.block(c * chunk, cp * chunk, chunk, chunk);
  }
};

/// Accumulated rotation Z^(c_from) Z^(c_from+1) ... Z^(c_to - 1); identity
/// when c_from == c_to.
Mat<double> z_trail(const std::vector<Mat<double>>& rotations, Index c_from, Index c_to);

/// M[t,s] = a(t:s) * B_s^T * Ztrail(c(s), c(t)) * C_t on and below the
/// diagonal, zero above. B and C are T x N with rows B_t^T / C_t^T.
TransferMatrix build_transfer_matrix(const Mat<double>& B, const Mat<double>& C,
                                     const Vec<double>& a_bars,
                                     const std::vector<Mat<double>>& rotations, Index chunk_size);

/// Chunked scan with the given fixed rotation applied at the end of every
/// chunk; x is the scalar input sequence (P = 1), h0 a 1 x N row state.
Vec<double> scan_with_regram(const Vec<double>& x, const Mat<double>& B, const Mat<double>& C,
                             const Vec<double>& a_bars,
                             const std::vector<Mat<double>>& rotations, Index chunk_size,
                             const Mat<double>& h0);

/// max_t | y_scan(t) - (M x)(t) |.
double verify_scan_vs_matrix(const Vec<double>& x, const Mat<double>& B, const Mat<double>& C,
                             const Vec<double>& a_bars,
                             const std::vector<Mat<double>>& rotations, Index chunk_size);

struct RankEquivReport {
  Index max_offdiag_rank = 0;  // numerical rank over all strictly-lower blocks
  bool rank_ok = false;        // every block rank <= N
  double joint_rotation_diff = 0;  // scan(h0 Q, BQ, CQ) vs scan(h0, B, C)
  double state_only_diff = 0;      // scan(h0 Q, B, C) vs scan(h0, B, C)
};

/// Rank bound on M's off-diagonal blocks plus the equivariance pair on the
/// rotation-free scan: a joint state/B/C rotation by orthogonal Q preserves
/// the output; rotating the state alone changes it.
RankEquivReport rank_and_equivariance_checks(const TransferMatrix& m, const Vec<double>& x,
                                             const Mat<double>& B, const Mat<double>& C,
                                             const Vec<double>& a_bars, const Mat<double>& h0,
                                             const Mat<double>& Q);

/// Numerical rank: singular values above eps * sigma_max.
Index numerical_rank(const Mat<double>& m, double eps = 1e-10);

/// Random orthogonal matrix (QR of a Gaussian draw, sign-fixed).
Mat<double> random_orthogonal(Index n, Rng& rng);

}  // namespace smamba
