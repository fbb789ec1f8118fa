#pragma once

// Training objectives: masked smoothed cross-entropy, confidence-weighted
// adjacent-pair KL smoothness, the asymmetric Gaussian transition target, and
// the per-layer intensity BCE. Everything is evaluated only at mask=1 frames.

#include "smamba/common.hpp"

#include <optional>
#include <vector>

namespace smamba {

inline constexpr double kProbFloor = 1e-8;

struct PhaseTargets {
  Eigen::VectorXi labels;  // T
  Eigen::VectorXi mask;    // T, {0,1}
  Vec<double> g;           // T, transition target in [0,1]
};

template <class S>
struct LossBreakdown {
  S ce = S(0), smooth = S(0), trans = S(0), total = S(0);
  S w_sm = S(0), w_trans = S(0);
  bool empty_mask = false;
};

/// Mean over mask=1 frames of label-smoothed cross-entropy on probabilities.
template <class S>
S ce_masked(const Mat<S>& probs, const Eigen::VectorXi& labels, const Eigen::VectorXi& mask,
            S smoothing, bool* empty_mask = nullptr) {
  const Index T = probs.rows(), C = probs.cols();
  require(labels.size() == T && mask.size() == T, "ce_masked: target length mismatch");
  S acc = S(0);
  Index n = 0;
  for (Index t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    require(labels[t] >= 0 && labels[t] < C, "ce_masked: label out of range");
    S ce = S(0);
    for (Index c = 0; c < C; ++c) {
      const S q = (c == labels[t] ? S(1) - smoothing : S(0)) + smoothing / S(C);
      ce -= q * std::log(std::max(probs(t, c), S(kProbFloor)));
    }
    acc += ce;
    ++n;
  }
  if (empty_mask) *empty_mask = (n == 0);
  return n ? acc / S(n) : S(0);
}

template <class S>
S entropy_row(const Eigen::Ref<const Vec<S>>& p) {
  S h = S(0);
  for (Index c = 0; c < p.size(); ++c) h -= p[c] * std::log(std::max(p[c], S(kProbFloor)));
  return h;
}

template <class S>
S kl_row(const Eigen::Ref<const Vec<S>>& p, const Eigen::Ref<const Vec<S>>& q) {
  S kl = S(0);
  for (Index c = 0; c < p.size(); ++c)
    kl += p[c] * (std::log(std::max(p[c], S(kProbFloor))) -
                  std::log(std::max(q[c], S(kProbFloor))));
  return kl;
}

/// Mean over valid adjacent pairs of c_t c_{t+1} KL(p_t || p_{t+1}) with
/// confidence c_t = 1 - H(p_t)/log C.
template <class S>
S smooth_loss(const Mat<S>& probs, const Eigen::VectorXi& mask) {
  const Index T = probs.rows(), C = probs.cols();
  require(mask.size() == T, "smooth_loss: mask length mismatch");
  const S logC = std::log(S(C));
  S acc = S(0);
  Index n = 0;
  for (Index t = 0; t + 1 < T; ++t) {
    if (!mask[t] || !mask[t + 1]) continue;
    const Vec<S> p0 = probs.row(t).transpose();
    const Vec<S> p1 = probs.row(t + 1).transpose();
    const S c0 = S(1) - entropy_row<S>(p0) / logC;
    const S c1 = S(1) - entropy_row<S>(p1) / logC;
    acc += c0 * c1 * kl_row<S>(p0, p1);
    ++n;
  }
  return n ? acc / S(n) : S(0);
}

/// Asymmetric Gaussian bump per transition (sigma_l before, sigma_r after),
/// peaking at 1, combined across transitions by pointwise max. A transition
/// at position 0 is detected against `prev_label` when provided.
template <class S>
Vec<S> transition_target(const Eigen::VectorXi& labels, S sigma_l, S sigma_r,
                         std::optional<int> prev_label = std::nullopt) {
  require(sigma_l > S(0) && sigma_r > S(0), "transition_target: sigmas must be positive");
  const Index T = labels.size();
  Vec<S> g = Vec<S>::Zero(T);
  std::vector<Index> stars;
  if (prev_label && T > 0 && labels[0] != *prev_label) stars.push_back(0);
  for (Index t = 1; t < T; ++t)
    if (labels[t] != labels[t - 1]) stars.push_back(t);
  for (Index star : stars) {
    for (Index t = 0; t < T; ++t) {
      const S d = S(t - star);
      const S sig = t < star ? sigma_l : sigma_r;
      g[t] = std::max(g[t], std::exp(-d * d / (S(2) * sig * sig)));
    }
  }
  return g;
}

/// Mean over mask=1 frames of binary cross-entropy of lambda against g.
template <class S>
S bce_masked(const Vec<S>& lambda, const Vec<S>& g, const Eigen::VectorXi& mask) {
  require(lambda.size() == g.size() && lambda.size() == mask.size(),
          "bce_masked: length mismatch");
  S acc = S(0);
  Index n = 0;
  for (Index t = 0; t < lambda.size(); ++t) {
    if (!mask[t]) continue;
    acc -= g[t] * std::log(std::max(lambda[t], S(kProbFloor))) +
           (S(1) - g[t]) * std::log(std::max(S(1) - lambda[t], S(kProbFloor)));
    ++n;
  }
  return n ? acc / S(n) : S(0);
}

/// Full objective: ce + w_sm * smooth + w_trans * mean-over-layers BCE(lambda, g).
template <class S>
LossBreakdown<S> total_loss(const Mat<S>& probs, const std::vector<Vec<S>>& lambda_traces,
                            const Eigen::VectorXi& labels, const Eigen::VectorXi& mask,
                            const Vec<S>& g, S w_sm, S w_trans, S smoothing = S(0.1)) {
  LossBreakdown<S> out;
  out.w_sm = w_sm;
  out.w_trans = w_trans;
  out.ce = ce_masked<S>(probs, labels, mask, smoothing, &out.empty_mask);
  out.smooth = smooth_loss<S>(probs, mask);
  if (!lambda_traces.empty()) {
    for (const auto& lam : lambda_traces) out.trans += bce_masked<S>(lam, g, mask);
    out.trans /= S(lambda_traces.size());
  }
  out.total = out.ce + w_sm * out.smooth + w_trans * out.trans;
  return out;
}

}  // namespace smamba
