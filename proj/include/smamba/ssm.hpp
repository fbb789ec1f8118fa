#pragma once

// Scalar-decay selective state-space core: ZOH discretization, the exact
// per-frame recurrence, the chunked block-matmul scan with chunk-granular
// state transfer, and the carried depthwise causal convolution.
//
// Conventions (row-vector state): per head the state is a head_dim x
// state_dim matrix and evolves as
//     h_t = abar_t * h_{t-1} + outer(x_t, B_t),    y_t = h_t * C_t,
// with abar_t = exp(delta_t * A_head). Write vectors B are used as given;
// callers that want the ZOH first-order write scale fold delta into B.

#include "smamba/common.hpp"

#include <vector>

namespace smamba {

template <class S>
struct DiscretizationParams {
  S a;        // continuous decay rate, strictly negative
  S delta;    // step, strictly positive
  S a_bar;    // exp(delta * a), in (0,1)
  S b_scale;  // first-order input scale, equals delta
};

template <class S>
DiscretizationParams<S> discretize(S a, S delta) {
  if (!(a < S(0))) throw DomainError("discretize: decay rate must be negative");
  if (!(delta > S(0))) throw DomainError("discretize: step must be positive");
  return {a, delta, std::exp(delta * a), delta};
}

/// Per-head selective scan state. Head h occupies rows
/// [h*head_dim, (h+1)*head_dim) of `values`.
template <class S>
struct SsmState {
  Index heads = 0, head_dim = 0, state_dim = 0;
  Mat<S> values;

  SsmState() = default;
  SsmState(Index h, Index p, Index n)
      : heads(h), head_dim(p), state_dim(n), values(Mat<S>::Zero(h * p, n)) {}

  auto head(Index h) { return values.middleRows(h * head_dim, head_dim); }
  auto head(Index h) const { return values.middleRows(h * head_dim, head_dim); }

  bool same_shape(const SsmState& o) const {
    return heads == o.heads && head_dim == o.head_dim && state_dim == o.state_dim;
  }
};

/// Input-dependent scan parameters for one sequence. `delta` is shared
/// across heads; per-head decay enters through the per-head rate A.
template <class S>
struct SelectiveParams {
  Vec<S> delta;  // T
  Mat<S> B;      // T x N
  Mat<S> C;      // T x N
};

/// Per-frame discrete decays, one column per head: abar(t,h) = exp(delta_t * A_h).
template <class S>
Mat<S> decay_matrix(const Vec<S>& delta, const Vec<S>& A) {
  Mat<S> abar(delta.size(), A.size());
  for (Index h = 0; h < A.size(); ++h) {
    if (!(A[h] < S(0))) throw DomainError("decay_matrix: A must be negative");
    for (Index t = 0; t < delta.size(); ++t) {
      if (!(delta[t] > S(0))) throw DomainError("decay_matrix: delta must be positive");
      abar(t, h) = std::exp(delta[t] * A[h]);
    }
  }
  return abar;
}

/// Product of abar_n over n in (s, t]; a(t:t) = 1.
template <class S>
S cumulative_decay(const Vec<S>& a_bars, Index t, Index s) {
  require(s >= 0 && t < a_bars.size() && s <= t, "cumulative_decay: need 0 <= s <= t < T");
  S p = S(1);
  for (Index n = s + 1; n <= t; ++n) p *= a_bars[n];
  return p;
}

/// One recurrence step in place: h <- abar h + outer(x, B); returns y = h C.
template <class S>
Vec<S> ssm_step(SsmState<S>& state, const Vec<S>& abar_heads, const Vec<S>& x_frame,
                const Vec<S>& B, const Vec<S>& C) {
  const Index H = state.heads, P = state.head_dim;
  Vec<S> y(H * P);
  for (Index h = 0; h < H; ++h) {
    auto hs = state.head(h);
    hs *= abar_heads[h];
    hs.noalias() += x_frame.segment(h * P, P) * B.transpose();
    y.segment(h * P, P).noalias() = hs * C;
  }
  return y;
}

/// Frame-by-frame reference scan. x is T x (heads*head_dim).
template <class S>
std::pair<Mat<S>, SsmState<S>> recurrent_scan_abar(const Mat<S>& x, const Mat<S>& abar,
                                                   const Mat<S>& B, const Mat<S>& C,
                                                   SsmState<S> h0) {
  const Index T = x.rows();
  require(abar.rows() == T && B.rows() == T && C.rows() == T,
          "recurrent_scan: time dimensions disagree");
  require(x.cols() == h0.heads * h0.head_dim, "recurrent_scan: input width != heads*head_dim");
  require(B.cols() == h0.state_dim && C.cols() == h0.state_dim,
          "recurrent_scan: state dimension mismatch");
  require(abar.cols() == h0.heads, "recurrent_scan: decay columns != heads");

  Mat<S> y(T, x.cols());
  for (Index t = 0; t < T; ++t) {
    Vec<S> ab = abar.row(t).transpose();
    y.row(t) = ssm_step<S>(h0, ab, x.row(t).transpose(), B.row(t).transpose(),
                           C.row(t).transpose())
                   .transpose();
  }
  return {std::move(y), std::move(h0)};
}

template <class S>
std::pair<Mat<S>, SsmState<S>> recurrent_scan(const Mat<S>& x, const SelectiveParams<S>& sel,
                                              const Vec<S>& A, const SsmState<S>& h0) {
  return recurrent_scan_abar<S>(x, decay_matrix<S>(sel.delta, A), sel.B, sel.C, h0);
}

namespace detail {

/// Lower-triangular within-chunk decay kernel: L(i,j) = a(t0+i : t0+j) for
/// i >= j, built by the same multiply order as the recurrence.
template <class S>
Mat<S> decay_kernel(const Eigen::Ref<const Vec<S>>& abar_chunk) {
  const Index L = abar_chunk.size();
  Mat<S> K = Mat<S>::Zero(L, L);
  for (Index j = 0; j < L; ++j) {
    K(j, j) = S(1);
    for (Index i = j + 1; i < L; ++i) K(i, j) = abar_chunk[i] * K(i - 1, j);
  }
  return K;
}

}  // namespace detail

template <class S>
struct ChunkedScanResult {
  Mat<S> y;
  std::vector<SsmState<S>> chunk_states;  // state at each chunk's final frame
};

/// Block-matmul scan, one chunk at a time; transfers only the H x P x N state
/// between chunks. A trailing partial chunk is processed at natural length.
template <class S>
ChunkedScanResult<S> chunked_scan_abar(const Mat<S>& x, const Mat<S>& abar, const Mat<S>& B,
                                       const Mat<S>& C, SsmState<S> state, Index chunk_size) {
  require(chunk_size >= 1, "chunked_scan: chunk_size must be >= 1");
  const Index T = x.rows(), H = state.heads, P = state.head_dim;
  require(abar.rows() == T && B.rows() == T && C.rows() == T,
          "chunked_scan: time dimensions disagree");
  require(x.cols() == H * P, "chunked_scan: input width != heads*head_dim");

  ChunkedScanResult<S> out;
  out.y.resize(T, x.cols());
  for (Index t0 = 0; t0 < T; t0 += chunk_size) {
    const Index Lc = std::min(chunk_size, T - t0);
    const auto Bc = B.middleRows(t0, Lc);
    const auto Cc = C.middleRows(t0, Lc);
    const Mat<S> G = Cc * Bc.transpose();  // (B_s . C_t), shared across heads

    for (Index h = 0; h < H; ++h) {
      const Vec<S> ab = abar.col(h).segment(t0, Lc);
      // decay from chunk entry (inclusive) and to chunk end (exclusive)
      Vec<S> r(Lc), s(Lc);
      r[0] = ab[0];
      for (Index i = 1; i < Lc; ++i) r[i] = r[i - 1] * ab[i];
      s[Lc - 1] = S(1);
      for (Index i = Lc - 2; i >= 0; --i) s[i] = s[i + 1] * ab[i + 1];

      const Mat<S> M = detail::decay_kernel<S>(ab).cwiseProduct(G);
      const auto Xh = x.block(t0, h * P, Lc, P);
      auto hs = state.head(h);

      Mat<S> Yh = M * Xh;                                   // intra-chunk
      Yh.noalias() += r.asDiagonal() * (Cc * hs.transpose());  // carried state read
      out.y.block(t0, h * P, Lc, P) = Yh;

      Mat<S> hnew = r[Lc - 1] * hs;
      hnew.noalias() += Xh.transpose() * (s.asDiagonal() * Bc);
      hs = hnew;
    }
    out.chunk_states.push_back(state);
  }
  return out;
}

template <class S>
ChunkedScanResult<S> chunked_scan(const Mat<S>& x, const SelectiveParams<S>& sel,
                                  const Vec<S>& A, const SsmState<S>& h0, Index chunk_size) {
  return chunked_scan_abar<S>(x, decay_matrix<S>(sel.delta, A), sel.B, sel.C, h0, chunk_size);
}

/// Streaming buffer for the depthwise causal convolution: the last
/// d_conv - 1 frames seen so far, zero at stream start.
template <class S>
struct ConvCarry {
  Mat<S> tail;  // (d_conv - 1) x channels

  ConvCarry() = default;
  ConvCarry(Index d_conv, Index channels) : tail(Mat<S>::Zero(d_conv - 1, channels)) {}
};

/// Depthwise causal conv + SiLU with carried left context. kernel is
/// d_conv x channels (tap 0 oldest), bias one row.
template <class S>
std::pair<Mat<S>, ConvCarry<S>> causal_conv(const Mat<S>& x, const Mat<S>& kernel,
                                            const Mat<S>& bias, ConvCarry<S> carry) {
  const Index T = x.rows(), ch = x.cols(), K = kernel.rows();
  require(kernel.cols() == ch, "causal_conv: kernel/input channel mismatch");
  require(carry.tail.rows() == K - 1, "causal_conv: carry must hold d_conv-1 rows");
  require(carry.tail.cols() == ch, "causal_conv: carry channel mismatch");
  require(bias.rows() == 1 && bias.cols() == ch, "causal_conv: bias must be 1 x channels");

  Mat<S> ext(K - 1 + T, ch);
  ext.topRows(K - 1) = carry.tail;
  ext.bottomRows(T) = x;

  Mat<S> y(T, ch);
  for (Index t = 0; t < T; ++t) {
    y.row(t) = bias.row(0);
    for (Index j = 0; j < K; ++j)
      y.row(t).array() += kernel.row(j).array() * ext.row(t + j).array();
  }
  y = y.unaryExpr([](S v) { return silu(v); });

  carry.tail = ext.bottomRows(K - 1);
  return {std::move(y), std::move(carry)};
}

template <class S>
std::pair<Mat<S>, ConvCarry<S>> causal_conv(const Mat<S>& x, const Mat<S>& kernel,
                                            ConvCarry<S> carry) {
  return causal_conv<S>(x, kernel, Mat<S>::Zero(1, x.cols()), std::move(carry));
}

/// One conv output row for streaming: frame plus the carried tail.
template <class S>
Vec<S> causal_conv_step(const Vec<S>& frame, const Mat<S>& kernel, const Mat<S>& bias,
                        ConvCarry<S>& carry) {
  const Index ch = frame.size(), K = kernel.rows();
  require(carry.tail.rows() == K - 1 && carry.tail.cols() == ch,
          "causal_conv_step: carry shape mismatch");
  Vec<S> y = bias.row(0).transpose();
  for (Index j = 0; j + 1 < K; ++j)
    y.array() += kernel.row(j).transpose().array() * carry.tail.row(j).transpose().array();
  y.array() += kernel.row(K - 1).transpose().array() * frame.array();
  for (Index j = 0; j + 2 < K; ++j) carry.tail.row(j) = carry.tail.row(j + 1);
  if (K > 1) carry.tail.row(K - 2) = frame.transpose();
  return y.unaryExpr([](S v) { return silu(v); });
}

}  // namespace smamba
