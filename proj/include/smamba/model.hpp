#pragma once

// The dual-path temporal model: K stacked blocks, each with a cross-clip
// slow scan (intensity-warped step, per-chunk regramming) and a clip-local
// fast scan conditioned on the slow output, followed by an SSD-augmented
// classification head. Clip-mode forward is built on the autodiff engine;
// the per-frame streaming evaluator lives in stream.hpp.

#include "smamba/common.hpp"
#include "smamba/engine.hpp"
#include "smamba/regram.hpp"
#include "smamba/ssm.hpp"

#include <map>
#include <string>
#include <vector>

namespace smamba {

struct ModelConfig {
  int d_feat = 256;   // input feature width
  int d_model = 256;  // D
  int d_inner = 512;  // H * P
  int n_heads = 8;    // H
  int d_state = 64;   // N
  int d_conv = 4;
  int chunk = 64;   // C_chunk
  int rank = 16;    // r, regramming planes per head
  int n_blocks = 4; // K
  int n_classes = 7;
  int clip_len = 256;  // L; fast path and head reset every clip
  int ffn_mult = 4;
  bool use_dskip = true;
  bool use_intensity = true;
  bool use_regram = true;

  // Reduction toggles: keep the full code path but pin lambda / theta to 0.
  bool force_lambda_zero = false;
  bool force_theta_zero = false;

  int head_dim() const { return d_inner / n_heads; }
  int intensity_hidden() const { return std::max(1, d_inner / 4); }
  int regram_hidden() const { return head_dim(); }
  void validate() const;
};

/// Named weight tensors. Canonical names (shapes in row x col):
///   proj.w (D x d_feat), proj.b (1 x D), proj.ln.g, proj.ln.b (1 x D)
///   blocks.<k>.norm1.g/.b (1 x D)
///   blocks.<k>.slow.w_in (d_inner x D)
///   blocks.<k>.slow.conv.w (d_conv x d_inner), .conv.b (1 x d_inner)
///   blocks.<k>.slow.w_x ((1+2N) x d_inner)     [rows: draw | B | C]
///   blocks.<k>.slow.w_dt, .b_dt (1 x 1), .a_raw (1 x H), .d_skip (1 x d_inner)
///   blocks.<k>.slow.intensity.w1 (hid x d_inner), .b1, .w2 (1 x hid), .b2
///   blocks.<k>.slow.regram.ln.g/.b (H x P)
///   blocks.<k>.slow.regram.uv.w1 ((H*rh) x P), .uv.b1 (H x rh),
///                          .uv.w2 ((H*2NR) x rh), .uv.b2 (H x 2NR)
///   blocks.<k>.slow.regram.th.w1 ((H*rh) x P), .th.b1 (H x rh),
///                          .th.w2 ((H*r) x rh), .th.b2 (H x r)
///   blocks.<k>.fast.*  (as slow, but w_in is (2*d_inner x D), w_x is
///                       ((1+2N) x 2*d_inner), and there is no intensity net)
///   blocks.<k>.w_out (D x d_inner), blocks.<k>.rms.g (1 x d_inner)
///   blocks.<k>.norm2.g/.b (1 x D)
///   blocks.<k>.ffn.w1 ((m*D) x D), .b1, .w2 (D x (m*D)), .b2
///   head.ln.g/.b, head.w_in (2*d_inner x D), head.conv.w/.b,
///   head.w_x ((1+2N) x d_inner), head.w_dt/.b_dt/.a_raw/.d_skip,
///   head.regram.*, head.w_cls (C x d_inner), head.b_cls (1 x C)
template <class S>
struct Weights {
  ModelConfig cfg;
  std::map<std::string, Mat<S>> tensors;

  Mat<S>& at(const std::string& name);
  const Mat<S>& at(const std::string& name) const;
  Index param_count() const;
  void validate_shapes() const;

  template <class T>
  Weights<T> cast() const {
    Weights<T> out;
    out.cfg = cfg;
    for (const auto& [k, v] : tensors) out.tensors[k] = v.template cast<T>();
    return out;
  }
};

template <class S>
Weights<S> init_weights(const ModelConfig& cfg, std::uint64_t seed);

/// Parameter tensors lifted into the autodiff graph (one Var per tensor;
/// lift under NoGradGuard for pure evaluation).
template <class S>
struct Params {
  const ModelConfig* cfg = nullptr;
  std::map<std::string, ad::Var<S>> vars;
  const ad::Var<S>& at(const std::string& name) const;
};

template <class S>
Params<S> lift(const Weights<S>& w);

/// Slow-path cross-clip baggage for one block: final SSM state plus the
/// causal-conv tail. Reset to zeros only at video start.
template <class S>
struct CarryState {
  Mat<S> h;     // (H*P) x N
  Mat<S> conv;  // (d_conv-1) x d_inner
};

template <class S>
using Carries = std::vector<CarryState<S>>;

template <class S>
Carries<S> zero_carries(const ModelConfig& cfg);

template <class S>
struct CarryVar {
  ad::Var<S> h;
  ad::Var<S> conv;
};

template <class S>
std::vector<CarryVar<S>> lift_carries(const Carries<S>& c);

/// Clip-mode forward outputs. Lambda traces are per block, T x 1, in [0,1].
template <class S>
struct ClipForward {
  ad::Var<S> logits;  // T x C
  ad::Var<S> probs;   // T x C
  std::vector<ad::Var<S>> lambdas;
  std::vector<CarryVar<S>> carry_out;

  // Diagnostics (plain values), populated when requested.
  std::vector<Mat<S>> y_slow;                       // per block, T x d_inner
  std::vector<Mat<S>> log_decay;                    // per block, T x H (slow path)
  std::vector<std::vector<RotationOp<S>>> slow_ops; // per block, per chunk boundary
};

template <class S>
ClipForward<S> clip_forward(const Params<S>& params, const Mat<S>& features,
                            const std::vector<CarryVar<S>>& carries, bool want_diag = false);

/// Convenience: evaluate one clip without building gradient history.
template <class S>
ClipForward<S> clip_eval(const Weights<S>& w, const Mat<S>& features, Carries<S>& carries,
                         bool want_diag = false);

extern template struct Weights<float>;
extern template struct Weights<double>;

}  // namespace smamba
