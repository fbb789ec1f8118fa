#pragma once

// Intensity-modulated stepping: a bottleneck MLP emits a per-frame scalar
// lambda in [0,1]; the slow path's discretization step is scaled by
// alpha = 1 + lambda in [1,2].

#include "smamba/common.hpp"

namespace smamba {

/// Two-layer bottleneck MLP with SiLU hidden activation and sigmoid output.
template <class S>
struct IntensityNet {
  Mat<S> w1;  // hidden x in
  Mat<S> b1;  // 1 x hidden
  Mat<S> w2;  // 1 x hidden
  Mat<S> b2;  // 1 x 1

  S operator()(const Vec<S>& x) const {
    Vec<S> h = (w1 * x + b1.transpose()).unaryExpr([](S v) { return silu(v); });
    return sigmoid((w2 * h)(0, 0) + b2(0, 0));
  }
};

template <class S>
S warped_step(S delta_raw, S lambda, S w_delta, S b_delta) {
  if (!(lambda >= S(0) && lambda <= S(1)))
    throw ContractError("warped_step: lambda must lie in [0,1]");
  return (S(1) + lambda) * softplus(w_delta * delta_raw + b_delta);
}

template <class S>
struct EffectiveDecay {
  S a_bar;             // exp(alpha * delta * A)
  S dA;                // log-decay alpha * delta * A
  S d_abar_d_lambda;   // delta * A * exp(alpha * delta * A), strictly negative
};

template <class S>
EffectiveDecay<S> effective_decay_and_grad(S A, S delta, S lambda) {
  if (!(A < S(0))) throw DomainError("effective_decay: A must be negative");
  if (!(delta > S(0))) throw DomainError("effective_decay: delta must be positive");
  const S alpha = S(1) + lambda;
  const S dA = alpha * delta * A;
  const S abar = std::exp(dA);
  return {abar, dA, delta * A * abar};
}

}  // namespace smamba
