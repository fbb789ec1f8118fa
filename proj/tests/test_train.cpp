#include "smamba/train.hpp"

#include <doctest.h>

using namespace smamba;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_feat = 10;
  c.d_model = 12;
  c.d_inner = 8;
  c.n_heads = 2;
  c.d_state = 6;
  c.d_conv = 3;
  c.chunk = 8;
  c.rank = 2;
  c.n_blocks = 1;
  c.n_classes = 3;
  c.clip_len = 16;
  c.ffn_mult = 2;
  return c;
}

SyntheticConfig tiny_synth(int classes, int d_feat) {
  SyntheticConfig s;
  s.num_videos = 2;
  s.t_min = 40;
  s.t_max = 50;
  s.d_feat = d_feat;
  s.n_classes = classes;
  s.min_phase_frames = 6;
  s.skip_prob = 0.0;
  s.blur = 2;
  s.seed = 42;
  return s;
}

}  // namespace

TEST_CASE("synthetic generation: determinism, monotone labels, blur=0 steps") {
  SyntheticConfig s = tiny_synth(4, 6);
  const auto a = gen_synthetic(s);
  const auto b = gen_synthetic(s);
  REQUIRE(a.size() == b.size());
  for (size_t v = 0; v < a.size(); ++v) {
    CHECK((a[v].features - b[v].features).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((a[v].labels - b[v].labels).cwiseAbs().maxCoeff() == 0);
    // monotone phase index
    for (Index t = 1; t < a[v].labels.size(); ++t)
      CHECK(a[v].labels[t] >= a[v].labels[t - 1]);
    // recorded transitions match label changes
    std::vector<Index> changes;
    for (Index t = 1; t < a[v].labels.size(); ++t)
      if (a[v].labels[t] != a[v].labels[t - 1]) changes.push_back(t);
    CHECK(changes == a[v].transitions);
  }

  s.seed = 43;
  const auto c = gen_synthetic(s);
  CHECK((a[0].features - c[0].features).cwiseAbs().maxCoeff() > 0.0f);

  // blur 0: features piecewise stationary in the mean (two frames of the same
  // phase differ only by noise, which has zero mean; check means via labels)
  s.blur = 0;
  s.noise = 0.0;
  const auto d = gen_synthetic(s);
  for (Index t = 1; t < d[0].labels.size(); ++t)
    if (d[0].labels[t] == d[0].labels[t - 1])
      CHECK((d[0].features.row(t) - d[0].features.row(t - 1)).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("clip slicing: padding, masks, prev labels") {
  SyntheticConfig s = tiny_synth(3, 5);
  s.t_min = s.t_max = 37;
  const auto v = gen_synthetic(s)[0];
  const auto clips = make_clips(v, 16, 0);
  REQUIRE(clips.size() == 3);
  CHECK(clips[0].prev_label == -1);
  CHECK(clips[1].prev_label == v.labels[15]);
  CHECK(clips[2].prev_label == v.labels[31]);
  CHECK(clips[2].mask.sum() == 5);
  CHECK(clips[2].mask[4] == 1);
  CHECK(clips[2].mask[5] == 0);
  CHECK(clips[2].features.bottomRows(11).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("metrics: perfect predictor, Jaccard formula, absent phases") {
  // perfect predictions give 100 everywhere
  std::vector<Eigen::VectorXi> labels{Eigen::VectorXi(6)}, preds;
  labels[0] << 0, 0, 1, 1, 2, 2;
  preds = labels;
  const auto perfect = compute_metrics(labels, preds, 4);
  CHECK(perfect.acc == doctest::Approx(100.0));
  CHECK(perfect.precision == doctest::Approx(100.0));
  CHECK(perfect.recall == doctest::Approx(100.0));
  CHECK(perfect.jaccard == doctest::Approx(100.0));

  // hand-built 2-phase confusion: TP/(TP+FP+FN) per phase
  std::vector<Eigen::VectorXi> y{Eigen::VectorXi(6)}, p{Eigen::VectorXi(6)};
  y[0] << 0, 0, 0, 1, 1, 1;
  p[0] << 0, 1, 0, 1, 1, 0;
  // phase 0: TP=2 FP=1 FN=1 -> 2/4; phase 1: TP=2 FP=1 FN=1 -> 2/4
  const auto m = compute_metrics(y, p, 2);
  CHECK(m.jaccard == doctest::Approx(100.0 * 0.5));
  CHECK(m.acc == doctest::Approx(100.0 * 4.0 / 6.0));

  // a phase absent from both labels and predictions is excluded
  const auto m4 = compute_metrics(y, p, 4);
  CHECK(m4.jaccard == doctest::Approx(100.0 * 0.5));

  // brute-force oracle on random label/prediction pairs
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int C = 5;
    std::vector<Eigen::VectorXi> yy(2), pp(2);
    for (int v = 0; v < 2; ++v) {
      yy[v].resize(30);
      pp[v].resize(30);
      for (Index t = 0; t < 30; ++t) {
        yy[v][t] = int(rng.below(C));
        pp[v][t] = int(rng.below(C));
      }
    }
    const auto got = compute_metrics(yy, pp, C);
    double jac = 0;
    for (int v = 0; v < 2; ++v) {
      double s = 0;
      int n = 0;
      for (int c = 0; c < C; ++c) {
        int tp = 0, fp = 0, fn = 0;
        for (Index t = 0; t < 30; ++t) {
          tp += (yy[v][t] == c && pp[v][t] == c);
          fp += (yy[v][t] != c && pp[v][t] == c);
          fn += (yy[v][t] == c && pp[v][t] != c);
        }
        if (tp + fp + fn > 0) {
          s += double(tp) / double(tp + fp + fn);
          ++n;
        }
      }
      jac += 100.0 * s / n / 2.0;
    }
    CHECK(got.jaccard == doctest::Approx(jac).epsilon(1e-12));
  }
}

TEST_CASE("learning-rate schedule: warmup then cosine") {
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.epochs = 50;
  tc.warmup_epochs = 10;
  tc.min_lr_frac = 0.01;
  CHECK(lr_at(tc, 0.0) == 0.0);
  CHECK(lr_at(tc, 0.1) == doctest::Approx(0.5e-3));
  CHECK(lr_at(tc, 0.2) == doctest::Approx(1e-3));  // warmup ends at the peak
  CHECK(lr_at(tc, 0.6) < lr_at(tc, 0.3));          // cosine decays
  CHECK(lr_at(tc, 1.0) == doctest::Approx(0.01e-3));
}

TEST_CASE("TBPTT: k=1 equals single-clip gradients; k=2 sees the carry path") {
  const ModelConfig mc = tiny_config();
  TrainConfig tc;
  tc.clip_len = mc.clip_len;
  tc.tbptt_window = 1;

  SyntheticConfig s = tiny_synth(mc.n_classes, mc.d_feat);
  s.t_min = s.t_max = 2 * mc.clip_len;
  const auto video = gen_synthetic(s)[0];
  const auto clips = make_clips(video, mc.clip_len, 0);
  const Weights<double> w = init_weights<double>(mc, 3);
  const Carries<double> zero = zero_carries<double>(mc);

  // k=1 window over clip 0 == direct single-clip pass
  const auto w1 = window_pass(w, clips, 0, 1, zero, tc, true);
  const auto direct = window_pass(w, clips, 0, 1, zero, tc, true);
  for (const auto& [name, g] : w1.grads)
    CHECK((g - direct.grads.at(name)).cwiseAbs().maxCoeff() == 0.0);

  // k=2: gradient w.r.t. a parameter includes the path through clip 2's loss
  // via the carry; checked against finite differences of the window loss
  const auto w2 = window_pass(w, clips, 0, 2, zero, tc, true);
  Weights<double> wp = w;
  const std::string probe = "blocks.0.slow.a_raw";
  const double h = 1e-5;
  wp.at(probe)(0, 0) += h;
  const double lp = window_pass(wp, clips, 0, 2, zero, tc, false).loss.total;
  wp.at(probe)(0, 0) -= 2 * h;
  const double lm = window_pass(wp, clips, 0, 2, zero, tc, false).loss.total;
  const double fd = (lp - lm) / (2 * h);
  CHECK(w2.grads.at(probe)(0, 0) == doctest::Approx(fd).epsilon(1e-4));

  // and the k=2 gradient differs from the detached sum of per-clip k=1
  // gradients: the difference is exactly the carry-through path
  const auto clip1_detached = window_pass(w, clips, 1, 1, w1.carries_out, tc, true);
  const double detached_sum =
      0.5 * (w1.grads.at(probe)(0, 0) + clip1_detached.grads.at(probe)(0, 0));
  CHECK(std::abs(w2.grads.at(probe)(0, 0) - detached_sum) > 1e-9);

  // whole-video forward equals clip-by-clip forward regardless of k
  Carries<double> ca = zero, cb = zero;
  const auto all = window_pass(w, clips, 0, clips.size(), ca, tc, false);
  Carries<double> cc = zero;
  for (size_t i = 0; i < clips.size(); ++i) {
    const auto one = window_pass(w, clips, i, 1, cc, tc, false);
    cc = one.carries_out;
  }
  for (size_t k = 0; k < cc.size(); ++k)
    CHECK((all.carries_out[k].h - cc[k].h).cwiseAbs().maxCoeff() < 1e-12);

  // clips from different videos in one window are rejected
  auto mixed = clips;
  mixed[1].video_id = 7;
  CHECK_THROWS_AS(window_pass(w, mixed, 0, 2, zero, tc, true), ContractError);
}

TEST_CASE("optimizer: AdamW decoupled decay and gradient clipping") {
  std::map<std::string, Mat<double>> grads;
  grads["a"] = Mat<double>::Constant(2, 2, 3.0);
  grads["b"] = Mat<double>::Constant(1, 2, 4.0);
  CHECK(global_grad_norm(grads) == doctest::Approx(std::sqrt(4 * 9.0 + 2 * 16.0)));
  clip_global_norm(grads, 1.0);
  CHECK(global_grad_norm(grads) == doctest::Approx(1.0));

  // weight decay touches matrices, not vectors
  ModelConfig mc = tiny_config();
  Weights<double> w = init_weights<double>(mc, 5);
  Weights<double> w0 = w;
  std::map<std::string, Mat<double>> zero_grads;
  for (const auto& [k, v] : w.tensors) zero_grads[k] = Mat<double>::Zero(v.rows(), v.cols());
  AdamW opt;
  opt.step(w, zero_grads, 0.1, 0.5);
  CHECK(w.at("blocks.0.slow.w_in")(0, 0) ==
        doctest::Approx(w0.at("blocks.0.slow.w_in")(0, 0) * 0.95));
  CHECK(w.at("blocks.0.rms.g")(0, 0) == w0.at("blocks.0.rms.g")(0, 0));
}

TEST_CASE("reproducibility: same seed gives identical loss trajectories") {
  const ModelConfig mc = tiny_config();
  TrainConfig tc;
  tc.clip_len = mc.clip_len;
  tc.tbptt_window = 2;
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.eval_every = 2;
  tc.batch_videos = 2;
  tc.lr = 1e-3;
  tc.seed = 11;

  SyntheticConfig s = tiny_synth(mc.n_classes, mc.d_feat);
  const auto videos = gen_synthetic(s);
  const std::vector<SyntheticVideo> tr(videos.begin(), videos.begin() + 1);
  const std::vector<SyntheticVideo> te(videos.begin() + 1, videos.end());

  const auto r1 = train(mc, tc, tr, te);
  const auto r2 = train(mc, tc, tr, te);
  REQUIRE(r1.history.size() == r2.history.size());
  for (size_t e = 0; e < r1.history.size(); ++e)
    CHECK(r1.history[e].train_loss.total == r2.history[e].train_loss.total);
  for (const auto& [name, m] : r1.weights.tensors)
    CHECK((m - r2.weights.tensors.at(name)).cwiseAbs().maxCoeff() == 0.0);
}
