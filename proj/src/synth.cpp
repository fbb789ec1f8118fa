#include "smamba/synth.hpp"

#include <algorithm>
#include <numeric>

namespace smamba {

std::vector<SyntheticVideo> gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  // Phase emission means on the unit sphere, shared across the dataset.
  Mat<double> means(cfg.n_classes, cfg.d_feat);
  for (int c = 0; c < cfg.n_classes; ++c) {
    Vec<double> m = rng.gaussian<double>(cfg.d_feat, 1);
    means.row(c) = (cfg.separation / std::max(m.norm(), 1e-12)) * m.transpose();
  }

  std::vector<SyntheticVideo> videos;
  for (int v = 0; v < cfg.num_videos; ++v) {
    const Index T = Index(cfg.t_min + (cfg.t_max > cfg.t_min
                                           ? Index(rng.below(cfg.t_max - cfg.t_min + 1))
                                           : 0));

    // Monotone phase subset: phase 0 always present, later phases may skip.
    std::vector<int> phases{0};
    for (int c = 1; c < cfg.n_classes; ++c)
      if (rng.uniform() >= cfg.skip_prob) phases.push_back(c);
    while (phases.size() < 2) phases.push_back(cfg.n_classes - 1);

    std::vector<double> w(phases.size());
    for (auto& x : w) x = std::exp(cfg.duration_spread * rng.normal());
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    std::vector<Index> len(phases.size());
    Index used = 0;
    for (size_t i = 0; i < phases.size(); ++i) {
      len[i] = std::max<Index>(Index(cfg.min_phase_frames),
                               Index(std::llround(double(T) * w[i] / wsum)));
      used += len[i];
    }
    // Re-fit to exactly T frames by adjusting the longest phase.
    const auto longest = std::max_element(len.begin(), len.end()) - len.begin();
    len[longest] = std::max<Index>(Index(cfg.min_phase_frames), len[longest] + (T - used));
    used = std::accumulate(len.begin(), len.end(), Index(0));
    len.back() += T - used;
    if (len.back() < 1) {
      len.back() = 1;
      len[longest] -= 1 - (T - used);
    }

    SyntheticVideo video;
    video.labels.resize(T);
    video.features.resize(T, cfg.d_feat);
    std::vector<Index> starts(phases.size());
    Index pos = 0;
    for (size_t i = 0; i < phases.size(); ++i) {
      starts[i] = pos;
      for (Index t = pos; t < pos + len[i] && t < T; ++t) video.labels[t] = phases[i];
      pos += len[i];
    }
    for (size_t i = 1; i < phases.size(); ++i)
      if (starts[i] < T) video.transitions.push_back(starts[i]);

    for (Index t = 0; t < T; ++t) {
      Vec<double> mean = means.row(video.labels[t]).transpose();
      if (cfg.blur > 0) {
        for (size_t i = 1; i < phases.size(); ++i) {
          const Index star = starts[i];
          if (star >= T || std::abs(t - star) >= cfg.blur) continue;
          const double mix = double(t - (star - cfg.blur)) / double(2 * cfg.blur);
          mean = (1.0 - mix) * means.row(phases[i - 1]).transpose() +
                 mix * means.row(phases[i]).transpose();
          break;
        }
      }
      for (Index d = 0; d < cfg.d_feat; ++d)
        video.features(t, d) = float(mean[d] + cfg.noise * rng.normal());
    }
    videos.push_back(std::move(video));
  }
  return videos;
}

}  // namespace smamba
