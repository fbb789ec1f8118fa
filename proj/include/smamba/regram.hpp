#pragma once

// Per-chunk state regramming: summarize the chunk, predict low-rank rotation
// planes and angles, build an exactly skew-symmetric generator, map it to an
// orthogonal matrix with the Cayley transform, and rotate the carried state.

#include "smamba/common.hpp"
#include "smamba/ssm.hpp"

#include <vector>

namespace smamba {

inline constexpr double kColumnNormEps = 1e-8;

/// Per-head mean-pooled, layer-normalized chunk descriptor (H x P).
template <class S>
struct ChunkSummary {
  Mat<S> phi;
};

/// LayerNorm over the last axis of a row vector with affine parameters.
template <class S>
Vec<S> layer_norm_vec(const Vec<S>& x, const Vec<S>& gamma, const Vec<S>& beta, S eps = S(1e-5)) {
  const S mean = x.mean();
  const Vec<S> d = x.array() - mean;
  const S var = d.squaredNorm() / S(x.size());
  const S inv = S(1) / std::sqrt(var + eps);
  return (d.array() * inv * gamma.array() + beta.array()).matrix();
}

/// y_chunk is C_chunk x (heads*head_dim); ln_gamma/ln_beta are heads x head_dim.
template <class S>
ChunkSummary<S> chunk_summary(const Mat<S>& y_chunk, Index heads, Index head_dim,
                              const Mat<S>& ln_gamma, const Mat<S>& ln_beta) {
  require(y_chunk.rows() >= 1, "chunk_summary: empty chunk");
  require(y_chunk.cols() == heads * head_dim, "chunk_summary: width != heads*head_dim");
  ChunkSummary<S> out;
  out.phi.resize(heads, head_dim);
  const Vec<S> pooled = y_chunk.colwise().mean().transpose();
  for (Index h = 0; h < heads; ++h) {
    Vec<S> ph = pooled.segment(h * head_dim, head_dim);
    out.phi.row(h) =
        layer_norm_vec<S>(ph, ln_gamma.row(h).transpose(), ln_beta.row(h).transpose())
            .transpose();
  }
  return out;
}

/// One head's plane/angle MLPs (two layers, SiLU hidden).
/// The UV head emits 2*N*r values: first N*r are U, then V, each read
/// column-major into an N x r matrix.
template <class S>
struct PlaneMlpHead {
  Mat<S> uv_w1, uv_b1, uv_w2, uv_b2;  // biases stored as 1 x n rows
  Mat<S> th_w1, th_b1, th_w2, th_b2;
};

template <class S>
struct HeadRotation {
  Mat<S> U;      // N x r, unit columns
  Mat<S> V;      // N x r, unit columns
  Vec<S> theta;  // r, non-negative
  Mat<S> Z;      // N x N orthogonal
};

/// The regramming operator for all heads of one path at one chunk boundary.
template <class S>
using RotationOp = std::vector<HeadRotation<S>>;

template <class S>
Mat<S> normalize_columns(Mat<S> m, S eps = S(kColumnNormEps)) {
  for (Index j = 0; j < m.cols(); ++j) {
    const S n = std::sqrt(m.col(j).squaredNorm() + eps * eps);
    m.col(j) /= n;
  }
  return m;
}

/// Predict (U, V, theta) for one head from its summary row.
template <class S>
HeadRotation<S> predict_planes(const Vec<S>& phi_head, const PlaneMlpHead<S>& mlp,
                               Index state_dim, Index rank) {
  require(phi_head.allFinite(), "predict_planes: non-finite summary");
  const Vec<S> hid_uv =
      (mlp.uv_w1 * phi_head + mlp.uv_b1.transpose()).unaryExpr([](S v) { return silu(v); });
  const Vec<S> uv = mlp.uv_w2 * hid_uv + mlp.uv_b2.transpose();
  require(uv.size() == 2 * state_dim * rank, "predict_planes: UV head width mismatch");

  HeadRotation<S> out;
  out.U = normalize_columns<S>(
      Eigen::Map<const Mat<S>>(uv.data(), state_dim, rank));
  out.V = normalize_columns<S>(
      Eigen::Map<const Mat<S>>(uv.data() + state_dim * rank, state_dim, rank));

  const Vec<S> hid_th =
      (mlp.th_w1 * phi_head + mlp.th_b1.transpose()).unaryExpr([](S v) { return silu(v); });
  Vec<S> th = mlp.th_w2 * hid_th + mlp.th_b2.transpose();
  out.theta = th.unaryExpr([](S v) { return softplus(v); });
  return out;
}

/// Exactly skew-symmetric generator S = U diag(theta) V^T - V diag(theta) U^T.
template <class S>
Mat<S> skew_generator(const Mat<S>& U, const Mat<S>& V, const Vec<S>& theta) {
  const Mat<S> ut = U * theta.asDiagonal() * V.transpose();
  return ut - ut.transpose();
}

/// Cayley map Z = (I - S/2)^{-1} (I + S/2), computed by a linear solve.
/// Always well-posed: I - S/2 is invertible for any real skew S.
template <class S>
Mat<S> cayley_rotation(const Mat<S>& U, const Mat<S>& V, const Vec<S>& theta) {
  require(U.allFinite() && V.allFinite() && theta.allFinite(),
          "cayley_rotation: non-finite inputs");
  const Index N = U.rows();
  const Mat<S> sk = skew_generator<S>(U, V, theta);
  const Mat<S> I = Mat<S>::Identity(N, N);
  return (I - S(0.5) * sk).partialPivLu().solve(I + S(0.5) * sk);
}

/// h' = h Z per head; preserves the Frobenius norm of each head's state.
template <class S>
void apply_regram(SsmState<S>& state, const RotationOp<S>& op) {
  require(Index(op.size()) == state.heads, "apply_regram: rotation count != heads");
  for (Index h = 0; h < state.heads; ++h) {
    require(op[h].Z.rows() == state.state_dim && op[h].Z.cols() == state.state_dim,
            "apply_regram: rotation size != state dim");
    state.head(h) = state.head(h) * op[h].Z;
  }
}

/// Rotation magnitude of one Cayley plane, in degrees: 2 atan(theta / 2).
template <class S>
S plane_angle_deg(S theta) {
  return S(2) * std::atan(theta / S(2)) * S(180.0 / M_PI);
}

template <class S>
struct AngleStats {
  S min, mean, max;
};

template <class S>
struct RotationAnalytics {
  S plane_cosine;                      // in [-1, 1]
  std::vector<AngleStats<S>> angles;   // per head, degrees, over the r planes of op_a
};

namespace detail {

/// Orthogonal projector onto span([U V]).
template <class S>
Mat<S> plane_projector(const Mat<S>& U, const Mat<S>& V) {
  Mat<S> W(U.rows(), U.cols() + V.cols());
  W << U, V;
  Eigen::ColPivHouseholderQR<Mat<S>> qr(W);
  const Index rk = qr.rank();
  Mat<S> Q = qr.householderQ() * Mat<S>::Identity(W.rows(), rk);
  return Q * Q.transpose();
}

}  // namespace detail

/// Basis-sign- and ordering-invariant similarity of two boundary operators:
/// cosine between the block-diagonal projectors onto each chunk's rotation
/// planes, plus per-head angle statistics for op_a.
template <class S>
RotationAnalytics<S> rotation_analytics(const RotationOp<S>& op_a, const RotationOp<S>& op_b) {
  require(op_a.size() == op_b.size(), "rotation_analytics: head count mismatch");
  S dot = S(0), na = S(0), nb = S(0);
  RotationAnalytics<S> out;
  for (size_t h = 0; h < op_a.size(); ++h) {
    require(op_a[h].U.rows() == op_b[h].U.rows(), "rotation_analytics: state dim mismatch");
    const Mat<S> Pa = detail::plane_projector<S>(op_a[h].U, op_a[h].V);
    const Mat<S> Pb = detail::plane_projector<S>(op_b[h].U, op_b[h].V);
    dot += (Pa.array() * Pb.array()).sum();
    na += Pa.squaredNorm();
    nb += Pb.squaredNorm();

    AngleStats<S> st{std::numeric_limits<S>::max(), S(0), std::numeric_limits<S>::lowest()};
    for (Index j = 0; j < op_a[h].theta.size(); ++j) {
      const S a = plane_angle_deg(op_a[h].theta[j]);
      st.min = std::min(st.min, a);
      st.max = std::max(st.max, a);
      st.mean += a;
    }
    st.mean /= S(op_a[h].theta.size());
    out.angles.push_back(st);
  }
  const S denom = std::sqrt(na) * std::sqrt(nb);
  out.plane_cosine = denom > S(0) ? dot / denom : S(0);
  return out;
}

}  // namespace smamba
