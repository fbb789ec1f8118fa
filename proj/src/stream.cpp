#include "smamba/stream.hpp"

#include "smamba/timewarp.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace smamba {

namespace {

template <class S>
Vec<S> ln_row(const Vec<S>& x, const Mat<S>& gamma, const Mat<S>& beta) {
  return layer_norm_vec<S>(x, gamma.row(0).transpose(), beta.row(0).transpose());
}

template <class S>
Vec<S> silu_vec(Vec<S> x) {
  return x.unaryExpr([](S v) { return silu(v); });
}

template <class S>
Vec<S> rms_row(const Vec<S>& x, const Mat<S>& gamma, S eps = S(1e-5)) {
  const S ms = x.squaredNorm() / S(x.size());
  return (x.array() / std::sqrt(ms + eps) * gamma.row(0).transpose().array()).matrix();
}

template <class S>
Vec<S> softmax_vec(const Vec<S>& x) {
  const S shift = x.maxCoeff();
  Vec<S> e = (x.array() - shift).exp();
  return e / e.sum();
}

template <class S>
PlaneMlpHead<S> plane_mlp_head(const Weights<S>& w, const std::string& prefix, Index h) {
  const auto& cfg = w.cfg;
  const Index rh = cfg.regram_hidden(), N = cfg.d_state, r = cfg.rank;
  PlaneMlpHead<S> m;
  m.uv_w1 = w.at(prefix + ".regram.uv.w1").middleRows(h * rh, rh);
  m.uv_b1 = w.at(prefix + ".regram.uv.b1").row(h);
  m.uv_w2 = w.at(prefix + ".regram.uv.w2").middleRows(h * 2 * N * r, 2 * N * r);
  m.uv_b2 = w.at(prefix + ".regram.uv.b2").row(h);
  m.th_w1 = w.at(prefix + ".regram.th.w1").middleRows(h * rh, rh);
  m.th_b1 = w.at(prefix + ".regram.th.b1").row(h);
  m.th_w2 = w.at(prefix + ".regram.th.w2").middleRows(h * r, r);
  m.th_b2 = w.at(prefix + ".regram.th.b2").row(h);
  return m;
}

}  // namespace

template <class S>
StreamEngine<S>::StreamEngine(Weights<S> w) : w_(std::move(w)) {
  w_.cfg.validate();
  w_.validate_shapes();
  slow_.resize(w_.cfg.n_blocks);
  fast_.resize(w_.cfg.n_blocks);
  reset();
}

template <class S>
void StreamEngine<S>::zero_path(PathState& ps) const {
  const auto& c = w_.cfg;
  ps.h = SsmState<S>(c.n_heads, c.head_dim(), c.d_state);
  ps.conv = ConvCarry<S>(c.d_conv, c.d_inner);
  ps.chunk_sum = Vec<S>::Zero(c.d_inner);
}

template <class S>
void StreamEngine<S>::reset() {
  for (auto& p : slow_) zero_path(p);
  for (auto& p : fast_) zero_path(p);
  zero_path(head_);
  frame_in_clip_ = 0;
  frames_seen_ = 0;
  last_rot_.clear();
}

template <class S>
std::size_t StreamEngine<S>::state_bytes() const {
  auto path_bytes = [](const PathState& p) {
    return sizeof(S) * std::size_t(p.h.values.size() + p.conv.tail.size() + p.chunk_sum.size());
  };
  std::size_t n = path_bytes(head_);
  for (const auto& p : slow_) n += path_bytes(p);
  for (const auto& p : fast_) n += path_bytes(p);
  return n;
}

template <class S>
Vec<S> StreamEngine<S>::scan_frame(PathState& ps, const std::string& prefix, const Vec<S>& xc,
                                   S delta, const Vec<S>& B, const Vec<S>& C,
                                   Vec<S>* log_decay_out) const {
  const auto& cfg = w_.cfg;
  const Mat<S>& a_raw = w_.at(prefix + ".a_raw");
  Vec<S> abar(cfg.n_heads);
  for (Index h = 0; h < cfg.n_heads; ++h) {
    const S la = delta * -softplus(a_raw(0, h));
    if (log_decay_out) (*log_decay_out)[h] = la;
    abar[h] = std::exp(la);
  }
  const Vec<S> bbar = delta * B;
  Vec<S> y = ssm_step<S>(ps.h, abar, xc, bbar, C);
  if (cfg.use_dskip)
    y.array() += w_.at(prefix + ".d_skip").row(0).transpose().array() * xc.array();
  ps.chunk_sum += y;
  return y;
}

template <class S>
void StreamEngine<S>::regram_path(PathState& ps, const std::string& prefix,
                                  RotationOp<S>* keep) {
  const auto& cfg = w_.cfg;
  const Mat<S>& ln_g = w_.at(prefix + ".regram.ln.g");
  const Mat<S>& ln_b = w_.at(prefix + ".regram.ln.b");
  const Index P = cfg.head_dim();
  const Vec<S> pooled = ps.chunk_sum / S(cfg.chunk);
  RotationOp<S> op;
  for (Index h = 0; h < cfg.n_heads; ++h) {
    const Vec<S> phi = layer_norm_vec<S>(pooled.segment(h * P, P), ln_g.row(h).transpose(),
                                         ln_b.row(h).transpose());
    HeadRotation<S> rot =
        predict_planes<S>(phi, plane_mlp_head<S>(w_, prefix, h), cfg.d_state, cfg.rank);
    if (cfg.force_theta_zero) rot.theta.setZero();
    rot.Z = cayley_rotation<S>(rot.U, rot.V, rot.theta);
    op.push_back(std::move(rot));
  }
  apply_regram<S>(ps.h, op);
  ps.chunk_sum.setZero();
  if (keep) *keep = std::move(op);
}

template <class S>
StepOutput<S> StreamEngine<S>::step(const Vec<S>& frame) {
  const auto& cfg = w_.cfg;
  require(frame.size() == cfg.d_feat, "engine_step: feature width mismatch");
  require(frame.allFinite(), "engine_step: non-finite input frame");
  const Index di = cfg.d_inner, N = cfg.d_state;

  StepOutput<S> out;
  out.lambda = Vec<S>::Zero(cfg.n_blocks);
  out.log_decay = Mat<S>::Zero(cfg.n_blocks, cfg.n_heads);

  Vec<S> u = ln_row<S>(w_.at("proj.w") * frame + w_.at("proj.b").row(0).transpose(),
                       w_.at("proj.ln.g"), w_.at("proj.ln.b"));

  const bool boundary_next = cfg.use_regram && (frame_in_clip_ + 1) % cfg.chunk == 0;

  for (int k = 0; k < cfg.n_blocks; ++k) {
    const std::string b = "blocks." + std::to_string(k);
    const std::string sp = b + ".slow", fp = b + ".fast";
    Vec<S> xin = ln_row<S>(u, w_.at(b + ".norm1.g"), w_.at(b + ".norm1.b"));

    // slow path
    Vec<S> x_slow = w_.at(sp + ".w_in") * xin;
    Vec<S> xc_slow =
        causal_conv_step<S>(x_slow, w_.at(sp + ".conv.w"), w_.at(sp + ".conv.b"), slow_[k].conv);
    Vec<S> sel = w_.at(sp + ".w_x") * xc_slow;
    const S draw = sel[0];
    const Vec<S> B = sel.segment(1, N), C = sel.segment(1 + N, N);

    S lam = S(0);
    if (cfg.use_intensity && !cfg.force_lambda_zero) {
      IntensityNet<S> net{w_.at(sp + ".intensity.w1"), w_.at(sp + ".intensity.b1"),
                          w_.at(sp + ".intensity.w2"), w_.at(sp + ".intensity.b2")};
      lam = net(xc_slow);
    }
    out.lambda[k] = lam;
    S delta = softplus(w_.at(sp + ".w_dt")(0, 0) * draw + w_.at(sp + ".b_dt")(0, 0));
    if (cfg.use_intensity) delta *= S(1) + lam;

    Mat<S> h_prev;
    if (k == 0) h_prev = slow_[0].h.values;
    Vec<S> ld = Vec<S>::Zero(cfg.n_heads);
    Vec<S> y_slow = scan_frame(slow_[k], sp, xc_slow, delta, B, C, &ld);
    out.log_decay.row(k) = ld.transpose();
    if (k == 0) {
      const S denom = h_prev.norm();
      out.dh_rel = denom > S(0) ? (slow_[0].h.values - h_prev).norm() / denom : S(0);
    }
    if (boundary_next) regram_path(slow_[k], sp, k == 0 ? &last_rot_ : nullptr);

    // fast path, conditioned on the slow output at the same frame
    Vec<S> xf_z = w_.at(fp + ".w_in") * xin;
    Vec<S> x_fast = xf_z.head(di), z = xf_z.tail(di);
    Vec<S> xc_fast =
        causal_conv_step<S>(x_fast, w_.at(fp + ".conv.w"), w_.at(fp + ".conv.b"), fast_[k].conv);
    Vec<S> cond(2 * di);
    cond << xc_fast, y_slow;
    Vec<S> self = w_.at(fp + ".w_x") * cond;
    const S draw_f = self[0];
    const Vec<S> Bf = self.segment(1, N), Cf = self.segment(1 + N, N);
    const S delta_f = softplus(w_.at(fp + ".w_dt")(0, 0) * draw_f + w_.at(fp + ".b_dt")(0, 0));
    Vec<S> y_fast = scan_frame(fast_[k], fp, xc_fast, delta_f, Bf, Cf, nullptr);
    if (boundary_next) regram_path(fast_[k], fp, nullptr);

    // fusion, residual, FFN
    Vec<S> fused = rms_row<S>(((y_slow + y_fast).array() * silu_vec<S>(z).array()).matrix(),
                              w_.at(b + ".rms.g"));
    u += w_.at(b + ".w_out") * fused;
    Vec<S> v = ln_row<S>(u, w_.at(b + ".norm2.g"), w_.at(b + ".norm2.b"));
    Vec<S> hid = (w_.at(b + ".ffn.w1") * v + w_.at(b + ".ffn.b1").row(0).transpose())
                     .unaryExpr([](S x) {
                       return S(0.5) * x * (S(1) + std::erf(x / S(std::sqrt(2.0))));
                     });
    u += w_.at(b + ".ffn.w2") * hid + w_.at(b + ".ffn.b2").row(0).transpose();
  }

  // output head
  Vec<S> hv = ln_row<S>(u, w_.at("head.ln.g"), w_.at("head.ln.b"));
  Vec<S> sz = w_.at("head.w_in") * hv;
  Vec<S> stream = sz.head(di), z2 = sz.tail(di);
  Vec<S> xc_head =
      causal_conv_step<S>(stream, w_.at("head.conv.w"), w_.at("head.conv.b"), head_.conv);
  Vec<S> selh = w_.at("head.w_x") * xc_head;
  const S delta_h = softplus(w_.at("head.w_dt")(0, 0) * selh[0] + w_.at("head.b_dt")(0, 0));
  Vec<S> y_head = scan_frame(head_, "head", xc_head, delta_h, selh.segment(1, N),
                             selh.segment(1 + N, N), nullptr);
  if (boundary_next) regram_path(head_, "head", nullptr);
  Vec<S> gated = (y_head.array() * silu_vec<S>(z2).array()).matrix();
  Vec<S> logits = w_.at("head.w_cls") * gated + w_.at("head.b_cls").row(0).transpose();
  out.probs = softmax_vec<S>(logits);
  out.rotated = boundary_next;

  ++frame_in_clip_;
  ++frames_seen_;
  if (frame_in_clip_ == cfg.clip_len) {
    // clip boundary: sever the fast path and head, re-anchor the chunk grid
    for (auto& p : fast_) zero_path(p);
    zero_path(head_);
    for (auto& p : slow_) p.chunk_sum.setZero();
    frame_in_clip_ = 0;
  }
  return out;
}

template <class S>
BenchReport bench(StreamEngine<S>& engine, Index total_frames,
                  const std::vector<Index>& report_points, std::uint64_t seed) {
  require(!report_points.empty(), "bench: need report points");
  const Index maxp = *std::max_element(report_points.begin(), report_points.end());
  require(total_frames >= 2 * maxp, "bench: total frames must be >= 2x the last report point");

  const auto& cfg = engine.config();
  Rng rng(seed);
  Mat<S> feats = rng.gaussian<S>(total_frames, cfg.d_feat);

  std::vector<double> us(total_frames);
  using clock = std::chrono::steady_clock;
  for (Index t = 0; t < total_frames; ++t) {
    const Vec<S> frame = feats.row(t).transpose();
    const auto t0 = clock::now();
    volatile S sink = engine.step(frame).probs[0];
    const auto t1 = clock::now();
    (void)sink;
    us[t] = std::chrono::duration<double, std::micro>(t1 - t0).count();
  }

  BenchReport rep;
  rep.frames = total_frames;
  rep.points = report_points;
  for (Index p : report_points) {
    const Index w = std::max<Index>(50, p / 20);
    const Index lo = std::max<Index>(0, p - w), hi = std::min<Index>(total_frames, p + w);
    std::vector<double> win(us.begin() + lo, us.begin() + hi);
    std::nth_element(win.begin(), win.begin() + win.size() / 2, win.end());
    rep.median_us.push_back(win[win.size() / 2]);
  }

  // OLS of per-frame latency on frame index, excluding 5% warmup
  const Index start = total_frames / 20;
  const double n = double(total_frames - start);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (Index t = start; t < total_frames; ++t) {
    sx += double(t);
    sy += us[t];
    sxx += double(t) * double(t);
    sxy += double(t) * us[t];
  }
  const double denom = n * sxx - sx * sx;
  rep.slope_us_per_frame = (n * sxy - sx * sy) / denom;
  const double intercept = (sy - rep.slope_us_per_frame * sx) / n;
  double ss_res = 0;
  for (Index t = start; t < total_frames; ++t) {
    const double r = us[t] - (intercept + rep.slope_us_per_frame * double(t));
    ss_res += r * r;
  }
  const double se = std::sqrt(ss_res / (n - 2) / (sxx - sx * sx / n));
  rep.ci_lo = rep.slope_us_per_frame - 1.96 * se;
  rep.ci_hi = rep.slope_us_per_frame + 1.96 * se;
  rep.state_bytes_first = rep.state_bytes_last = engine.state_bytes();
  return rep;
}

template <class S>
TraceResult run_trace(StreamEngine<S>& engine, const FeatureFile& input,
                      const std::string& out_dir, Index state_dump_every) {
  const auto& cfg = engine.config();
  const Index T = input.features.rows(), K = cfg.n_blocks, H = cfg.n_heads;
  TraceResult res;
  res.frames = T;
  res.frame_csv = out_dir + "/frames.csv";
  res.chunk_csv = out_dir + "/chunks.csv";

  std::vector<std::string> header{"frame", "pred"};
  for (Index k = 0; k < K; ++k) header.push_back("lambda_" + std::to_string(k));
  for (Index k = 0; k < K; ++k) header.push_back("da_mean_" + std::to_string(k));
  for (Index k = 0; k < K; ++k) header.push_back("da_p10_" + std::to_string(k));
  for (Index k = 0; k < K; ++k) header.push_back("da_p90_" + std::to_string(k));
  header.push_back("dh_rel");
  CsvWriter frames(res.frame_csv, header);

  auto percentile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const size_t i = size_t(pos);
    const double f = pos - double(i);
    return i + 1 < v.size() ? v[i] * (1 - f) + v[i + 1] * f : v[i];
  };

  std::vector<RotationOp<S>> ops;
  std::ofstream dump;
  if (state_dump_every > 0) {
    res.state_dump = out_dir + "/states.bin";
    dump.open(res.state_dump, std::ios::binary);
    if (!dump.good()) throw IoError("cannot open for writing: " + res.state_dump);
    const std::uint32_t count = std::uint32_t((T - 1) / state_dump_every + 1);
    const std::uint32_t rows = std::uint32_t(cfg.d_inner), cols = std::uint32_t(cfg.d_state);
    dump.write("SMSD", 4);
    dump.write(reinterpret_cast<const char*>(&count), 4);
    dump.write(reinterpret_cast<const char*>(&rows), 4);
    dump.write(reinterpret_cast<const char*>(&cols), 4);
  }

  Index correct = 0, labeled = 0;
  for (Index t = 0; t < T; ++t) {
    const Vec<S> frame = input.features.row(t).cast<S>().transpose();
    StepOutput<S> so = engine.step(frame);
    Index pred = 0;
    so.probs.maxCoeff(&pred);
    if (input.has_labels && input.mask[t]) {
      ++labeled;
      correct += (Index(input.labels[t]) == pred) ? 1 : 0;
    }

    frames.field((long long)t);
    frames.field((long long)pred);
    for (Index k = 0; k < K; ++k) frames.field(double(so.lambda[k]));
    std::vector<std::vector<double>> da(K);
    for (Index k = 0; k < K; ++k) {
      da[k].resize(H);
      for (Index h = 0; h < H; ++h) da[k][h] = std::exp(double(so.log_decay(k, h)));
      frames.field(std::accumulate(da[k].begin(), da[k].end(), 0.0) / double(H));
    }
    for (Index k = 0; k < K; ++k) frames.field(percentile(da[k], 0.10));
    for (Index k = 0; k < K; ++k) frames.field(percentile(da[k], 0.90));
    frames.field(double(so.dh_rel));
    frames.end_row();

    if (so.rotated && !engine.last_rotation().empty()) ops.push_back(engine.last_rotation());
    if (state_dump_every > 0 && t % state_dump_every == 0) {
      const Mat<S>& hs = engine.slow_state(0);
      for (Index i = 0; i < hs.rows(); ++i)
        for (Index j = 0; j < hs.cols(); ++j) {
          const float v = float(hs(i, j));
          dump.write(reinterpret_cast<const char*>(&v), 4);
        }
      if (!dump.good()) throw IoError("write failed: " + res.state_dump);
    }
  }

  // Per-chunk rotation-plane similarity (upper triangle, row-sparse pairs)
  std::vector<std::string> ch{"chunk", "other", "plane_cosine"};
  for (Index h = 0; h < H; ++h) {
    ch.push_back("angle_min_h" + std::to_string(h));
    ch.push_back("angle_mean_h" + std::to_string(h));
    ch.push_back("angle_max_h" + std::to_string(h));
  }
  CsvWriter chunks(res.chunk_csv, ch);
  for (size_t c = 0; c < ops.size(); ++c) {
    for (size_t o = 0; o <= c; ++o) {
      const auto an = rotation_analytics<S>(ops[c], ops[o]);
      chunks.field((long long)c);
      chunks.field((long long)o);
      chunks.field(double(an.plane_cosine));
      if (o == c) {
        for (const auto& st : an.angles) {
          chunks.field(double(st.min));
          chunks.field(double(st.mean));
          chunks.field(double(st.max));
        }
      } else {
        for (Index h = 0; h < 3 * H; ++h) chunks.field(std::string());
      }
      chunks.end_row();
    }
  }

  res.accuracy = labeled ? double(correct) / double(labeled) : -1;
  return res;
}

template class StreamEngine<float>;
template class StreamEngine<double>;
template BenchReport bench<float>(StreamEngine<float>&, Index, const std::vector<Index>&,
                                  std::uint64_t);
template BenchReport bench<double>(StreamEngine<double>&, Index, const std::vector<Index>&,
                                   std::uint64_t);
template TraceResult run_trace<float>(StreamEngine<float>&, const FeatureFile&,
                                      const std::string&, Index);
template TraceResult run_trace<double>(StreamEngine<double>&, const FeatureFile&,
                                       const std::string&, Index);

}  // namespace smamba
