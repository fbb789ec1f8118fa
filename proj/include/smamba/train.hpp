#pragma once

// Training: clip slicing with validity masks, TBPTT windows with carry
// chaining and gradient severing at the window edge, AdamW with warmup+cosine
// schedule and global-norm clipping, evaluation metrics, and the
// finite-difference gradient check. Training runs in double precision.

#include "smamba/losses.hpp"
#include "smamba/model.hpp"
#include "smamba/synth.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace smamba {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int epochs = 50;
  int warmup_epochs = 10;
  double min_lr_frac = 0.01;
  int clip_len = 128;     // L
  int tbptt_window = 6;   // k
  double w_sm = 1.0;
  double w_trans = 1.0;
  double label_smoothing = 0.1;
  double sigma_l = 2.0;
  double sigma_r = 12.0;
  int batch_videos = 2;
  int eval_every = 5;
  std::uint64_t seed = 0;

  void validate() const {
    require(tbptt_window >= 1, "train: tbptt_window must be >= 1");
    require(clip_len >= 1 && epochs >= 1, "train: bad config");
  }
};

/// Warmup then cosine; progress in [0,1] across all epochs.
double lr_at(const TrainConfig& c, double progress);

struct Clip {
  Mat<double> features;    // clip_len x D, zero-padded past the video end
  Eigen::VectorXi labels;  // clip_len
  Eigen::VectorXi mask;    // clip_len, 0 on padded frames
  int video_id = -1;
  int prev_label = -1;     // label of the frame before the clip; -1 at video start
};

std::vector<Clip> make_clips(const SyntheticVideo& v, int clip_len, int video_id);

struct Metrics {
  double acc = 0, precision = 0, recall = 0, jaccard = 0;
};

/// Video-wise accuracy mean; phase-then-video-averaged Pr/Re/Jac. A phase
/// term enters a video's average only when its denominator is positive.
Metrics compute_metrics(const std::vector<Eigen::VectorXi>& labels,
                        const std::vector<Eigen::VectorXi>& preds, int n_classes);

class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  /// Decoupled weight decay, applied to 2-D weight matrices only.
  void step(Weights<double>& w, const std::map<std::string, Mat<double>>& grads, double lr,
            double weight_decay);

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Mat<double>> m_, v_;
};

double global_grad_norm(const std::map<std::string, Mat<double>>& grads);
void clip_global_norm(std::map<std::string, Mat<double>>& grads, double max_norm);

struct WindowResult {
  LossBreakdown<double> loss;
  Carries<double> carries_out;
  std::map<std::string, Mat<double>> grads;
};

/// Forward (and backward when requested) over clips [first, first+count) of
/// one video, chaining carries inside the window; the carry entering the
/// window is a constant.
WindowResult window_pass(const Weights<double>& w, const std::vector<Clip>& clips, size_t first,
                         size_t count, const Carries<double>& carries_in, const TrainConfig& tc,
                         bool with_grad);

/// One TBPTT window, one optimizer update; returns the window loss and
/// advances `carries` past the window.
LossBreakdown<double> tbptt_step(Weights<double>& w, AdamW& opt, const std::vector<Clip>& clips,
                                 size_t first, size_t count, Carries<double>& carries,
                                 const TrainConfig& tc, double lr);

struct EpochRow {
  int epoch = 0;
  double lr = 0;
  LossBreakdown<double> train_loss;
  Metrics test;
  bool evaluated = false;
};

struct TrainResult {
  Weights<double> weights;
  std::vector<EpochRow> history;
  Metrics final_metrics;
};

struct TrainDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Metrics evaluate(const Weights<double>& w, const std::vector<SyntheticVideo>& videos,
                 int clip_len);

TrainResult train(const ModelConfig& mc, const TrainConfig& tc,
                  const std::vector<SyntheticVideo>& train_videos,
                  const std::vector<SyntheticVideo>& test_videos, std::ostream* log = nullptr);

struct GradCheckReport {
  double max_rel_error = 0;
  std::map<std::string, double> group_error;  // core / intensity / regram
  std::string worst_tensor;
};

/// Central finite differences (step 1e-5) against the analytic gradients of
/// the window loss on a tiny model, every parameter entry individually.
GradCheckReport grad_check(std::uint64_t seed = 0);

}  // namespace smamba
