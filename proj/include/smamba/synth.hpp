#pragma once

// Synthetic phase-labeled feature streams: each video is a left-to-right
// phase sequence (monotone phase index, optional skips) with per-phase
// Gaussian emissions and linear blending across a transition-blur window.
// Fully determined by the config seed.

#include "smamba/common.hpp"

#include <vector>

namespace smamba {

struct SyntheticConfig {
  int num_videos = 20;
  int t_min = 1800;
  int t_max = 2200;
  int d_feat = 256;
  int n_classes = 7;
  double min_phase_frames = 30;
  double duration_spread = 0.6;  // lognormal sigma of relative phase weights
  double skip_prob = 0.15;
  double separation = 1.0;  // scale of the unit-sphere phase means
  double noise = 1.0;       // isotropic emission sigma
  int blur = 6;             // half-width of the linear blending window
  std::uint64_t seed = 0;

  void validate() const {
    require(n_classes >= 2, "synthetic: need at least 2 classes");
    require(t_min >= 2 && t_max >= t_min, "synthetic: bad length range");
    require(min_phase_frames >= 1, "synthetic: phase durations must be >= 1");
  }
};

struct SyntheticVideo {
  Mat<float> features;            // T x D
  Eigen::VectorXi labels;         // T
  std::vector<Index> transitions; // first frame of each new phase
};

std::vector<SyntheticVideo> gen_synthetic(const SyntheticConfig& cfg);

}  // namespace smamba
