#pragma once

// Per-frame streaming evaluator with a constant state footprint: carries the
// slow-path SSM/conv state across clips, resets the fast path and output head
// every clip_len frames, and applies regramming every chunk frames since clip
// start (identical chunk grid to clip mode). Also: latency benchmarking and
// trace export.

#include "smamba/common.hpp"
#include "smamba/io.hpp"
#include "smamba/model.hpp"
#include "smamba/regram.hpp"
#include "smamba/ssm.hpp"

#include <string>
#include <vector>

namespace smamba {

template <class S>
struct StepOutput {
  Vec<S> probs;      // n_classes
  Vec<S> lambda;     // n_blocks, in [0,1]
  Mat<S> log_decay;  // n_blocks x n_heads slow-path log-decay alpha*delta*A
  S dh_rel = S(0);   // ||h_t - h_{t-1}|| / ||h_{t-1}|| on the first block's slow state
  bool rotated = false;  // a chunk boundary fired after this frame
};

template <class S>
class StreamEngine {
 public:
  explicit StreamEngine(Weights<S> w);

  /// Back to video start: all states zeroed.
  void reset();

  StepOutput<S> step(const Vec<S>& frame);

  /// Slow-path rotation of the first block at the most recent boundary.
  const RotationOp<S>& last_rotation() const { return last_rot_; }

  /// Slow-path SSM state of block k, (H*P) x N.
  const Mat<S>& slow_state(Index k) const { return slow_.at(k).h.values; }

  const ModelConfig& config() const { return w_.cfg; }
  std::size_t state_bytes() const;
  Index frames_seen() const { return frames_seen_; }

 private:
  struct PathState {
    SsmState<S> h;
    ConvCarry<S> conv;
    Vec<S> chunk_sum;  // running sum of path outputs in the open chunk
  };

  Weights<S> w_;
  std::vector<PathState> slow_, fast_;
  PathState head_;
  Index frame_in_clip_ = 0;
  Index frames_seen_ = 0;
  RotationOp<S> last_rot_;

  void zero_path(PathState& ps) const;
  void regram_path(PathState& ps, const std::string& prefix, RotationOp<S>* keep);
  Vec<S> scan_frame(PathState& ps, const std::string& prefix, const Vec<S>& xc, S delta,
                    const Vec<S>& B, const Vec<S>& C, Vec<S>* log_decay_out) const;
};

struct BenchReport {
  std::vector<Index> points;
  std::vector<double> median_us;  // per report point
  double slope_us_per_frame = 0;  // OLS over post-warmup per-frame latencies
  double ci_lo = 0, ci_hi = 0;    // 95% confidence interval of the slope
  std::size_t state_bytes_first = 0, state_bytes_last = 0;
  Index frames = 0;
};

/// Wall-clock per-frame latency on generated features (model cost only).
template <class S>
BenchReport bench(StreamEngine<S>& engine, Index total_frames,
                  const std::vector<Index>& report_points, std::uint64_t seed = 0);

struct TraceResult {
  double accuracy = -1;  // fraction correct when labels present, else -1
  Index frames = 0;
  std::string frame_csv, chunk_csv, state_dump;
};

/// Streams an SMFD file and writes per-frame and per-chunk CSV traces plus an
/// optional subsampled raw dump of the first block's slow state
/// ("SMSD" magic, u32 count/rows/cols header, f32 data).
template <class S>
TraceResult run_trace(StreamEngine<S>& engine, const FeatureFile& input,
                      const std::string& out_dir, Index state_dump_every = 0);

extern template class StreamEngine<float>;
extern template class StreamEngine<double>;

}  // namespace smamba
