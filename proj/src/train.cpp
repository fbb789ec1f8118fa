#include "smamba/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <thread>

namespace smamba {

using ad::Var;

double lr_at(const TrainConfig& c, double progress) {
  progress = std::clamp(progress, 0.0, 1.0);
  const double warm = double(c.warmup_epochs) / double(c.epochs);
  if (warm > 0 && progress < warm) return c.lr * progress / warm;
  const double u = warm < 1.0 ? (progress - warm) / (1.0 - warm) : 1.0;
  const double lo = c.min_lr_frac * c.lr;
  return lo + 0.5 * (c.lr - lo) * (1.0 + std::cos(M_PI * u));
}

std::vector<Clip> make_clips(const SyntheticVideo& v, int clip_len, int video_id) {
  const Index T = v.features.rows(), D = v.features.cols();
  std::vector<Clip> clips;
  for (Index t0 = 0; t0 < T; t0 += clip_len) {
    Clip c;
    c.video_id = video_id;
    c.prev_label = t0 > 0 ? v.labels[t0 - 1] : -1;
    c.features = Mat<double>::Zero(clip_len, D);
    c.labels = Eigen::VectorXi::Zero(clip_len);
    c.mask = Eigen::VectorXi::Zero(clip_len);
    const Index n = std::min<Index>(clip_len, T - t0);
    c.features.topRows(n) = v.features.middleRows(t0, n).cast<double>();
    c.labels.head(n) = v.labels.segment(t0, n);
    c.mask.head(n).setOnes();
    clips.push_back(std::move(c));
  }
  return clips;
}

Metrics compute_metrics(const std::vector<Eigen::VectorXi>& labels,
                        const std::vector<Eigen::VectorXi>& preds, int n_classes) {
  require(labels.size() == preds.size(), "metrics: video count mismatch");
  Metrics m;
  const double V = double(labels.size());
  for (size_t v = 0; v < labels.size(); ++v) {
    const auto& y = labels[v];
    const auto& p = preds[v];
    require(y.size() == p.size(), "metrics: length mismatch");
    Index correct = 0;
    std::vector<Index> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
    for (Index t = 0; t < y.size(); ++t) {
      if (y[t] == p[t]) {
        ++correct;
        ++tp[y[t]];
      } else {
        ++fp[p[t]];
        ++fn[y[t]];
      }
    }
    m.acc += 100.0 * double(correct) / double(y.size()) / V;
    double pr = 0, re = 0, ja = 0;
    Index npr = 0, nre = 0, nja = 0;
    for (int c = 0; c < n_classes; ++c) {
      if (tp[c] + fp[c] > 0) {
        pr += double(tp[c]) / double(tp[c] + fp[c]);
        ++npr;
      }
      if (tp[c] + fn[c] > 0) {
        re += double(tp[c]) / double(tp[c] + fn[c]);
        ++nre;
      }
      if (tp[c] + fp[c] + fn[c] > 0) {
        ja += double(tp[c]) / double(tp[c] + fp[c] + fn[c]);
        ++nja;
      }
    }
    m.precision += 100.0 * (npr ? pr / double(npr) : 0.0) / V;
    m.recall += 100.0 * (nre ? re / double(nre) : 0.0) / V;
    m.jaccard += 100.0 * (nja ? ja / double(nja) : 0.0) / V;
  }
  return m;
}

void AdamW::step(Weights<double>& w, const std::map<std::string, Mat<double>>& grads, double lr,
                 double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (auto& [name, g] : grads) {
    Mat<double>& p = w.at(name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() == 0) {
      m = Mat<double>::Zero(p.rows(), p.cols());
      v = Mat<double>::Zero(p.rows(), p.cols());
    }
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    const Mat<double> mh = m / bc1;
    const Mat<double> vh = v / bc2;
    if (weight_decay > 0 && p.rows() > 1 && p.cols() > 1) p -= lr * weight_decay * p;
    p -= lr * (mh.array() / (vh.array().sqrt() + eps_)).matrix();
  }
}

double global_grad_norm(const std::map<std::string, Mat<double>>& grads) {
  double sq = 0;
  for (const auto& [k, g] : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

void clip_global_norm(std::map<std::string, Mat<double>>& grads, double max_norm) {
  const double n = global_grad_norm(grads);
  if (n > max_norm && n > 0) {
    const double s = max_norm / n;
    for (auto& [k, g] : grads) g *= s;
  }
}

namespace {

Index mask_count(const Eigen::VectorXi& mask) {
  Index n = 0;
  for (Index t = 0; t < mask.size(); ++t) n += mask[t] ? 1 : 0;
  return n;
}

/// Label-smoothed CE over mask=1 rows, on probabilities.
Var<double> tape_ce(const Var<double>& probs, const Clip& clip, double smoothing) {
  const Index T = probs.rows(), C = probs.cols();
  const Index n = mask_count(clip.mask);
  if (n == 0) return Var<double>::scalar(0.0);
  Mat<double> q = Mat<double>::Zero(T, C);
  for (Index t = 0; t < T; ++t) {
    if (!clip.mask[t]) continue;
    for (Index c = 0; c < C; ++c)
      q(t, c) = (c == clip.labels[t] ? 1.0 - smoothing : 0.0) + smoothing / double(C);
  }
  Var<double> logp = ad::log(ad::clamp_min(probs, kProbFloor));
  return ad::sum(Var<double>::constant(q) * logp) * (-1.0 / double(n));
}

Var<double> tape_smooth(const Var<double>& probs, const Clip& clip) {
  const Index T = probs.rows(), C = probs.cols();
  Index pairs = 0;
  Mat<double> pm = Mat<double>::Zero(T - 1, 1);
  for (Index t = 0; t + 1 < T; ++t)
    if (clip.mask[t] && clip.mask[t + 1]) {
      pm(t, 0) = 1.0;
      ++pairs;
    }
  if (pairs == 0) return Var<double>::scalar(0.0);
  Var<double> logp = ad::log(ad::clamp_min(probs, kProbFloor));
  Var<double> ent = ad::rowwise_sum(probs * logp) * (-1.0);       // T x 1
  Var<double> conf = ent * (-1.0 / std::log(double(C))) + 1.0;    // 1 - H/logC
  Var<double> p0 = ad::block(probs, 0, 0, T - 1, C);
  Var<double> lg0 = ad::block(logp, 0, 0, T - 1, C);
  Var<double> lg1 = ad::block(logp, 1, 0, T - 1, C);
  Var<double> kl = ad::rowwise_sum(p0 * (lg0 - lg1));
  Var<double> c0 = ad::block(conf, 0, 0, T - 1, 1);
  Var<double> c1 = ad::block(conf, 1, 0, T - 1, 1);
  return ad::sum(c0 * c1 * kl * Var<double>::constant(pm)) * (1.0 / double(pairs));
}

Var<double> tape_trans(const std::vector<Var<double>>& lambdas, const Vec<double>& g,
                       const Clip& clip) {
  const Index n = mask_count(clip.mask);
  if (n == 0 || lambdas.empty()) return Var<double>::scalar(0.0);
  Mat<double> mask = clip.mask.cast<double>();
  Var<double> gm = Var<double>::constant(g);
  Var<double> mk = Var<double>::constant(mask);
  Var<double> acc;
  for (const auto& lam : lambdas) {
    Var<double> bce = gm * ad::log(ad::clamp_min(lam, kProbFloor)) +
                      (Var<double>::scalar(1.0) - gm) *
                          ad::log(ad::clamp_min(Var<double>::scalar(1.0) - lam, kProbFloor));
    Var<double> term = ad::sum(bce * mk) * (-1.0 / double(n));
    acc = acc.defined() ? acc + term : term;
  }
  return acc * (1.0 / double(lambdas.size()));
}

}  // namespace

WindowResult window_pass(const Weights<double>& w, const std::vector<Clip>& clips, size_t first,
                         size_t count, const Carries<double>& carries_in, const TrainConfig& tc,
                         bool with_grad) {
  require(first + count <= clips.size() && count >= 1, "window_pass: bad window");
  for (size_t i = 1; i < count; ++i)
    require(clips[first + i].video_id == clips[first].video_id,
            "window_pass: clips from different videos in one window");

  std::unique_ptr<ad::NoGradGuard> guard;
  if (!with_grad) guard = std::make_unique<ad::NoGradGuard>();

  Params<double> params = lift(w);
  std::vector<CarryVar<double>> carry = lift_carries(carries_in);

  Var<double> loss;
  WindowResult out;
  for (size_t i = 0; i < count; ++i) {
    const Clip& clip = clips[first + i];
    ClipForward<double> fwd = clip_forward<double>(params, clip.features, carry, false);
    carry = fwd.carry_out;

    std::optional<int> prev =
        clip.prev_label >= 0 ? std::optional<int>(clip.prev_label) : std::nullopt;
    const Vec<double> g = transition_target<double>(clip.labels, tc.sigma_l, tc.sigma_r, prev);

    Var<double> ce = tape_ce(fwd.probs, clip, tc.label_smoothing);
    Var<double> sm = tape_smooth(fwd.probs, clip);
    Var<double> tr = tc.w_trans != 0.0 ? tape_trans(fwd.lambdas, g, clip)
                                       : Var<double>::scalar(0.0);
    Var<double> lt = ce + Var<double>::scalar(tc.w_sm) * sm + Var<double>::scalar(tc.w_trans) * tr;
    loss = loss.defined() ? loss + lt : lt;

    out.loss.ce += ce.item() / double(count);
    out.loss.smooth += sm.item() / double(count);
    out.loss.trans += tr.item() / double(count);
    if (mask_count(clip.mask) == 0) out.loss.empty_mask = true;
  }
  loss = loss * (1.0 / double(count));
  out.loss.w_sm = tc.w_sm;
  out.loss.w_trans = tc.w_trans;
  out.loss.total = loss.item();

  out.carries_out.resize(carry.size());
  for (size_t k = 0; k < carry.size(); ++k) {
    out.carries_out[k].h = carry[k].h.val();
    out.carries_out[k].conv = carry[k].conv.val();
  }

  if (with_grad) {
    ad::backward(loss);
    for (const auto& [name, var] : params.vars) {
      out.grads[name] = var.has_grad()
                            ? var.grad()
                            : Mat<double>::Zero(var.rows(), var.cols());
    }
  }
  return out;
}

LossBreakdown<double> tbptt_step(Weights<double>& w, AdamW& opt, const std::vector<Clip>& clips,
                                 size_t first, size_t count, Carries<double>& carries,
                                 const TrainConfig& tc, double lr) {
  WindowResult res = window_pass(w, clips, first, count, carries, tc, true);
  if (!std::isfinite(res.loss.total))
    throw TrainDivergence("non-finite loss in TBPTT window");
  clip_global_norm(res.grads, tc.clip_norm);
  opt.step(w, res.grads, lr, tc.weight_decay);
  carries = std::move(res.carries_out);
  return res.loss;
}

Metrics evaluate(const Weights<double>& w, const std::vector<SyntheticVideo>& videos,
                 int clip_len) {
  std::vector<Eigen::VectorXi> labels, preds;
  for (size_t v = 0; v < videos.size(); ++v) {
    const auto clips = make_clips(videos[v], clip_len, int(v));
    Carries<double> carries = zero_carries<double>(w.cfg);
    Eigen::VectorXi pred(videos[v].labels.size());
    Index t = 0;
    for (const auto& clip : clips) {
      ClipForward<double> fwd = clip_eval<double>(w, clip.features, carries, false);
      const Mat<double>& p = fwd.probs.val();
      for (Index i = 0; i < p.rows() && t < pred.size(); ++i) {
        if (!clip.mask[i]) continue;
        Index arg = 0;
        p.row(i).maxCoeff(&arg);
        pred[t++] = int(arg);
      }
    }
    labels.push_back(videos[v].labels);
    preds.push_back(std::move(pred));
  }
  return compute_metrics(labels, preds, w.cfg.n_classes);
}

TrainResult train(const ModelConfig& mc, const TrainConfig& tc,
                  const std::vector<SyntheticVideo>& train_videos,
                  const std::vector<SyntheticVideo>& test_videos, std::ostream* log) {
  tc.validate();
  Weights<double> w = init_weights<double>(mc, tc.seed);
  AdamW opt;
  Rng shuffle_rng(tc.seed ^ 0x9e3779b97f4a7c15ull);

  std::vector<std::vector<Clip>> clips;
  size_t total_windows = 0;
  for (size_t v = 0; v < train_videos.size(); ++v) {
    clips.push_back(make_clips(train_videos[v], tc.clip_len, int(v)));
    total_windows += (clips.back().size() + tc.tbptt_window - 1) / tc.tbptt_window;
  }
  const double total_steps = double(total_windows) * tc.epochs;

  TrainResult result;
  size_t steps_done = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<size_t> order(train_videos.size());
    std::iota(order.begin(), order.end(), size_t(0));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    LossBreakdown<double> epoch_loss;
    size_t epoch_windows = 0;
    double last_lr = 0;

    for (size_t g0 = 0; g0 < order.size(); g0 += tc.batch_videos) {
      const size_t nb = std::min<size_t>(tc.batch_videos, order.size() - g0);
      std::vector<Carries<double>> carries(nb, zero_carries<double>(mc));
      std::vector<size_t> next(nb, 0);

      while (true) {
        std::vector<size_t> active;
        for (size_t b = 0; b < nb; ++b)
          if (next[b] < clips[order[g0 + b]].size()) active.push_back(b);
        if (active.empty()) break;

        std::vector<WindowResult> results(active.size());
        std::vector<std::thread> threads;
        for (size_t a = 0; a < active.size(); ++a) {
          const size_t b = active[a];
          const auto& vc = clips[order[g0 + b]];
          const size_t count = std::min<size_t>(tc.tbptt_window, vc.size() - next[b]);
          threads.emplace_back([&, a, b, count] {
            results[a] = window_pass(w, clips[order[g0 + b]], next[b], count, carries[b], tc,
                                     true);
          });
        }
        for (auto& t : threads) t.join();

        std::map<std::string, Mat<double>> grads;
        for (size_t a = 0; a < active.size(); ++a) {
          const size_t b = active[a];
          if (!std::isfinite(results[a].loss.total))
            throw TrainDivergence("non-finite loss at epoch " + std::to_string(epoch));
          for (auto& [k, g] : results[a].grads) {
            auto it = grads.find(k);
            if (it == grads.end())
              grads.emplace(k, g / double(active.size()));
            else
              it->second += g / double(active.size());
          }
          carries[b] = std::move(results[a].carries_out);
          next[b] += std::min<size_t>(tc.tbptt_window, clips[order[g0 + b]].size() - next[b]);
          epoch_loss.ce += results[a].loss.ce;
          epoch_loss.smooth += results[a].loss.smooth;
          epoch_loss.trans += results[a].loss.trans;
          epoch_loss.total += results[a].loss.total;
          ++epoch_windows;
        }
        last_lr = lr_at(tc, double(steps_done) / std::max(1.0, total_steps));
        clip_global_norm(grads, tc.clip_norm);
        opt.step(w, grads, last_lr, tc.weight_decay);
        ++steps_done;
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = last_lr;
    const double nw = std::max<size_t>(epoch_windows, 1);
    row.train_loss.ce = epoch_loss.ce / nw;
    row.train_loss.smooth = epoch_loss.smooth / nw;
    row.train_loss.trans = epoch_loss.trans / nw;
    row.train_loss.total = epoch_loss.total / nw;
    if ((epoch + 1) % tc.eval_every == 0 || epoch + 1 == tc.epochs) {
      row.test = evaluate(w, test_videos, tc.clip_len);
      row.evaluated = true;
      result.final_metrics = row.test;
    }
    if (log) {
      (*log) << "epoch " << epoch << " loss " << row.train_loss.total << " (ce "
             << row.train_loss.ce << " sm " << row.train_loss.smooth << " tr "
             << row.train_loss.trans << ") lr " << row.lr;
      if (row.evaluated)
        (*log) << " | acc " << row.test.acc << " jac " << row.test.jaccard;
      (*log) << std::endl;
    }
    result.history.push_back(row);
  }
  result.weights = std::move(w);
  return result;
}

GradCheckReport grad_check(std::uint64_t seed) {
  ModelConfig mc;
  mc.d_feat = 12;
  mc.d_model = 16;
  mc.d_inner = 8;
  mc.n_heads = 2;
  mc.d_state = 8;
  mc.d_conv = 3;
  mc.chunk = 8;
  mc.rank = 2;
  mc.n_blocks = 1;
  mc.n_classes = 4;
  mc.clip_len = 16;
  mc.ffn_mult = 2;

  TrainConfig tc;
  tc.clip_len = mc.clip_len;
  tc.tbptt_window = 2;
  tc.label_smoothing = 0.1;

  Weights<double> w = init_weights<double>(mc, seed + 1);
  Rng rng(seed + 2);

  // Two clips of one synthetic video with transitions and a masked tail.
  SyntheticConfig sc;
  sc.num_videos = 1;
  sc.t_min = sc.t_max = 2 * mc.clip_len - 3;  // forces mask=0 padding
  sc.d_feat = mc.d_feat;
  sc.n_classes = mc.n_classes;
  sc.min_phase_frames = 4;
  sc.skip_prob = 0.0;
  sc.blur = 2;
  sc.seed = seed + 3;
  const auto videos = gen_synthetic(sc);
  const auto clips = make_clips(videos[0], mc.clip_len, 0);

  Carries<double> carries = zero_carries<double>(mc);
  for (auto& c : carries) {
    c.h = rng.gaussian<double>(c.h.rows(), c.h.cols(), 0.3);
    c.conv = rng.gaussian<double>(c.conv.rows(), c.conv.cols(), 0.3);
  }

  WindowResult res = window_pass(w, clips, 0, 2, carries, tc, true);

  const double h = 1e-5;
  GradCheckReport report;
  for (auto& [name, tensor] : w.tensors) {
    const std::string group = name.find(".regram.") != std::string::npos ? "regram"
                              : name.find(".intensity.") != std::string::npos ? "intensity"
                                                                              : "core";
    const Mat<double>& ga = res.grads.at(name);
    for (Index i = 0; i < tensor.rows(); ++i)
      for (Index j = 0; j < tensor.cols(); ++j) {
        const double orig = tensor(i, j);
        tensor(i, j) = orig + h;
        const double lp = window_pass(w, clips, 0, 2, carries, tc, false).loss.total;
        tensor(i, j) = orig - h;
        const double lm = window_pass(w, clips, 0, 2, carries, tc, false).loss.total;
        tensor(i, j) = orig;
        const double fd = (lp - lm) / (2 * h);
        const double err =
            std::abs(ga(i, j) - fd) / std::max({std::abs(ga(i, j)), std::abs(fd), 1e-6});
        double& ge = report.group_error[group];
        ge = std::max(ge, err);
        if (err > report.max_rel_error) {
          report.max_rel_error = err;
          report.worst_tensor = name;
        }
      }
  }
  return report;
}

}  // namespace smamba
