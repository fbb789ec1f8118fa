// Command-line entry points: gen-data, train, infer, verify, bench,
// grad-check. Exit code 0 on pass; on failure a machine-readable summary is
// printed to stderr as a single JSON line.

#include "smamba/io.hpp"
#include "smamba/model.hpp"
#include "smamba/stream.hpp"
#include "smamba/synth.hpp"
#include "smamba/train.hpp"
#include "smamba/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace smamba;

namespace {

int fail(const std::string& command, const std::vector<std::string>& reasons) {
  json j;
  j["command"] = command;
  j["failed"] = reasons;
  std::cerr << j.dump() << std::endl;
  return 1;
}

template <class T>
void kv_get(const std::map<std::string, std::string>& kv, const std::string& key, T& out) {
  auto it = kv.find(key);
  if (it == kv.end()) return;
  if constexpr (std::is_same_v<T, bool>)
    out = it->second == "1" || it->second == "true" || it->second == "yes";
  else if constexpr (std::is_integral_v<T>)
    out = T(std::stoll(it->second));
  else
    out = T(std::stod(it->second));
}

SyntheticConfig synth_config(const std::map<std::string, std::string>& kv) {
  SyntheticConfig c;
  kv_get(kv, "train_videos", c.num_videos);
  kv_get(kv, "t_min", c.t_min);
  kv_get(kv, "t_max", c.t_max);
  kv_get(kv, "d_feat", c.d_feat);
  kv_get(kv, "classes", c.n_classes);
  kv_get(kv, "min_phase_frames", c.min_phase_frames);
  kv_get(kv, "duration_spread", c.duration_spread);
  kv_get(kv, "skip_prob", c.skip_prob);
  kv_get(kv, "separation", c.separation);
  kv_get(kv, "noise", c.noise);
  kv_get(kv, "blur", c.blur);
  kv_get(kv, "seed", c.seed);
  return c;
}

ModelConfig model_config(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  kv_get(kv, "d_feat", c.d_feat);
  kv_get(kv, "d_model", c.d_model);
  kv_get(kv, "d_inner", c.d_inner);
  kv_get(kv, "heads", c.n_heads);
  kv_get(kv, "d_state", c.d_state);
  kv_get(kv, "d_conv", c.d_conv);
  kv_get(kv, "chunk", c.chunk);
  kv_get(kv, "rank", c.rank);
  kv_get(kv, "blocks", c.n_blocks);
  kv_get(kv, "clip_len", c.clip_len);
  kv_get(kv, "ffn_mult", c.ffn_mult);
  kv_get(kv, "use_dskip", c.use_dskip);
  kv_get(kv, "use_intensity", c.use_intensity);
  kv_get(kv, "use_regram", c.use_regram);
  return c;
}

TrainConfig train_config(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  kv_get(kv, "lr", c.lr);
  kv_get(kv, "weight_decay", c.weight_decay);
  kv_get(kv, "clip_norm", c.clip_norm);
  kv_get(kv, "epochs", c.epochs);
  kv_get(kv, "warmup_epochs", c.warmup_epochs);
  kv_get(kv, "clip_len", c.clip_len);
  kv_get(kv, "tbptt_window", c.tbptt_window);
  kv_get(kv, "w_sm", c.w_sm);
  kv_get(kv, "w_trans", c.w_trans);
  kv_get(kv, "label_smoothing", c.label_smoothing);
  kv_get(kv, "sigma_l", c.sigma_l);
  kv_get(kv, "sigma_r", c.sigma_r);
  kv_get(kv, "batch_videos", c.batch_videos);
  kv_get(kv, "eval_every", c.eval_every);
  kv_get(kv, "seed", c.seed);
  return c;
}

FeatureFile to_feature_file(const SyntheticVideo& v, int n_classes) {
  FeatureFile f;
  f.features = v.features;
  f.n_classes = std::uint32_t(n_classes);
  f.has_labels = true;
  const Index T = v.features.rows();
  f.labels.resize(T);
  f.mask.assign(T, 1);
  for (Index t = 0; t < T; ++t) f.labels[t] = std::uint16_t(v.labels[t]);
  return f;
}

SyntheticVideo from_feature_file(const FeatureFile& f) {
  SyntheticVideo v;
  v.features = f.features;
  const Index T = f.features.rows();
  v.labels.resize(T);
  for (Index t = 0; t < T; ++t) v.labels[t] = f.has_labels ? int(f.labels[t]) : 0;
  for (Index t = 1; t < T; ++t)
    if (v.labels[t] != v.labels[t - 1]) v.transitions.push_back(t);
  return v;
}

std::vector<SyntheticVideo> load_split(const std::string& dir, const std::string& prefix,
                                       int& n_classes, int& d_feat) {
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().rfind(prefix, 0) == 0 && e.path().extension() == ".smfd")
      paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<SyntheticVideo> out;
  for (const auto& p : paths) {
    FeatureFile f = read_smfd(p.string());
    n_classes = std::max(n_classes, int(f.n_classes));
    d_feat = int(f.features.cols());
    out.push_back(from_feature_file(f));
  }
  return out;
}

int cmd_gen_data(const std::string& config, const std::string& out_dir) {
  const auto kv = read_kv_config(config);
  SyntheticConfig c = synth_config(kv);
  int test_videos = 10;
  kv_get(kv, "test_videos", test_videos);

  SyntheticConfig all = c;
  all.num_videos = c.num_videos + test_videos;
  const auto videos = gen_synthetic(all);

  fs::create_directories(out_dir);
  char name[64];
  for (int i = 0; i < all.num_videos; ++i) {
    const bool is_train = i < c.num_videos;
    std::snprintf(name, sizeof name, "%s_%03d.smfd", is_train ? "train" : "test",
                  is_train ? i : i - c.num_videos);
    write_smfd(out_dir + "/" + name, to_feature_file(videos[i], c.n_classes));
  }
  std::cout << "wrote " << c.num_videos << " train + " << test_videos << " test videos to "
            << out_dir << std::endl;
  return 0;
}

int cmd_train(const std::string& config, const std::string& data_dir, const std::string& out) {
  const auto kv = read_kv_config(config);
  int n_classes = 2, d_feat = 0;
  const auto train_videos = load_split(data_dir, "train", n_classes, d_feat);
  const auto test_videos = load_split(data_dir, "test", n_classes, d_feat);
  if (train_videos.empty()) return fail("train", {"no train_*.smfd files in " + data_dir});

  ModelConfig mc = model_config(kv);
  mc.d_feat = d_feat;
  mc.n_classes = n_classes;
  TrainConfig tc = train_config(kv);
  mc.clip_len = tc.clip_len;

  TrainResult res = train(mc, tc, train_videos, test_videos, &std::cout);
  save_checkpoint(out, res.weights.cast<float>());

  CsvWriter csv(out + ".metrics.csv",
                {"epoch", "lr", "loss_total", "loss_ce", "loss_smooth", "loss_trans",
                 "test_acc", "test_precision", "test_recall", "test_jaccard"});
  for (const auto& row : res.history) {
    csv.field((long long)row.epoch);
    csv.field(row.lr);
    csv.field(row.train_loss.total);
    csv.field(row.train_loss.ce);
    csv.field(row.train_loss.smooth);
    csv.field(row.train_loss.trans);
    if (row.evaluated) {
      csv.field(row.test.acc);
      csv.field(row.test.precision);
      csv.field(row.test.recall);
      csv.field(row.test.jaccard);
    } else {
      for (int i = 0; i < 4; ++i) csv.field(std::string());
    }
    csv.end_row();
  }
  std::cout << "final: acc " << res.final_metrics.acc << " pr " << res.final_metrics.precision
            << " re " << res.final_metrics.recall << " jac " << res.final_metrics.jaccard
            << std::endl;
  std::cout << "checkpoint " << out << std::endl;
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& input, const std::string& trace_dir,
              long long state_dump_every) {
  const Weights<float> w = load_checkpoint(ckpt);
  const FeatureFile f = read_smfd(input);
  fs::create_directories(trace_dir);
  StreamEngine<float> engine(w);
  const TraceResult res = run_trace<float>(engine, f, trace_dir, Index(state_dump_every));
  std::cout << "streamed " << res.frames << " frames; traces in " << trace_dir << std::endl;
  if (res.accuracy >= 0)
    std::cout << "frame accuracy " << 100.0 * res.accuracy << "%" << std::endl;
  return 0;
}

int cmd_verify(int seeds, const std::string& precision) {
  const bool single = precision == "single";
  const auto results = run_verification(seeds, single);
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS" : "FAIL") << " " << r.name << ": worst " << r.worst
              << " (threshold " << r.threshold << "; " << r.detail << ")" << std::endl;
    if (!r.pass) failed.push_back(r.name);
  }
  if (!failed.empty()) return fail("verify", failed);
  return 0;
}

int cmd_bench(const std::string& ckpt, long long frames) {
  const Weights<float> w = load_checkpoint(ckpt);
  StreamEngine<float> engine(w);
  std::vector<Index> points;
  for (Index p : {Index(100), Index(1000), Index(10000), Index(50000)})
    if (2 * p <= frames) points.push_back(p);
  if (points.empty()) return fail("bench", {"need --frames >= 200"});
  const BenchReport rep = bench<float>(engine, Index(frames), points);
  for (size_t i = 0; i < rep.points.size(); ++i)
    std::cout << "frame " << rep.points[i] << ": median " << rep.median_us[i] << " us"
              << std::endl;
  std::cout << "slope " << rep.slope_us_per_frame << " us/frame (95% CI [" << rep.ci_lo << ", "
            << rep.ci_hi << "])" << std::endl;
  std::cout << "state bytes " << rep.state_bytes_first << " (constant)" << std::endl;
  return 0;
}

int cmd_grad_check() {
  const GradCheckReport rep = grad_check();
  for (const auto& [group, err] : rep.group_error)
    std::cout << group << ": max relative error " << err << std::endl;
  std::cout << "overall: " << rep.max_rel_error << " (worst tensor " << rep.worst_tensor << ")"
            << std::endl;
  if (rep.max_rel_error >= 1e-4)
    return fail("grad-check", {"max relative error " + std::to_string(rep.max_rel_error)});
  std::cout << "PASS grad-check" << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming dual-path selective SSM: data, training, inference, verification"};
  app.require_subcommand(1);

  std::string config, out_dir, data_dir, ckpt, input, trace_dir, precision = "double";
  long long frames = 20000, state_dump_every = 0;
  int seeds = 100;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phase-stream dataset");
  gen->add_option("--config", config)->required();
  gen->add_option("--out", out_dir)->required();

  auto* tr = app.add_subcommand("train", "Train on an SMFD dataset directory");
  tr->add_option("--config", config)->required();
  tr->add_option("--data", data_dir)->required();
  tr->add_option("--out", ckpt)->required();

  auto* inf = app.add_subcommand("infer", "Stream an SMFD file and export traces");
  inf->add_option("--ckpt", ckpt)->required();
  inf->add_option("--input", input)->required();
  inf->add_option("--trace", trace_dir)->required();
  inf->add_option("--state-dump", state_dump_every, "dump slow state every N frames");

  auto* ver = app.add_subcommand("verify", "Run the algebraic verification suite");
  ver->add_option("--seeds", seeds);
  ver->add_option("--precision", precision)->check(CLI::IsMember({"double", "single"}));

  auto* be = app.add_subcommand("bench", "Per-frame latency benchmark");
  be->add_option("--ckpt", ckpt)->required();
  be->add_option("--frames", frames);

  app.add_subcommand("grad-check", "Finite-difference gradient check on a tiny model");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config, out_dir);
    if (tr->parsed()) return cmd_train(config, data_dir, ckpt);
    if (inf->parsed()) return cmd_infer(ckpt, input, trace_dir, state_dump_every);
    if (ver->parsed()) return cmd_verify(seeds, precision);
    if (be->parsed()) return cmd_bench(ckpt, frames);
    return cmd_grad_check();
  } catch (const std::exception& e) {
    return fail(app.get_subcommands().front()->get_name(), {e.what()});
  }
}
