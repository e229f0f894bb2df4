// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// fails. Built on the 64-bit core so gradient certification runs at full
// tolerance.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "avasr/checkpoint.hpp"
#include "avasr/decode.hpp"
#include "avasr/synth.hpp"
#include "avasr/testing/oracles.hpp"
#include "avasr/train.hpp"
#include "test_util.hpp"

using namespace avasr;
using namespace avasr::testing;
namespace fs = std::filesystem;

namespace {

struct Suite {
  int failures = 0;

  void report(int number, const std::string& name, bool ok,
              const std::string& detail) {
    std::printf("[%s] %2d. %-28s %s\n", ok ? "PASS" : "FAIL", number,
                name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- shared fixtures ------------------------------------------------------

AVASRConfig cert_config() {
  AVASRConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.d_ff = 16;
  cfg.dropout = 0;
  cfg.audio_cols = 3;
  cfg.stack_factor = 4;
  cfg.video_dim = 10;
  cfg.char_vocab = 9;
  cfg.subword_vocab = 11;
  cfg.fusion_enabled = true;
  return cfg;
}

// corpus + tokenizers + prepped splits under a scratch directory
struct SynthFixture {
  SynthPaths paths;
  CharVocab chars;
  BpeModel bpe;
  std::vector<PreppedUtterance> train, dev, test;

  SynthFixture(const std::string& dir, const SynthConfig& sc, int bpe_vocab,
               int stack_factor) {
    fs::remove_all(dir);
    paths = synth_corpus(dir, sc);
    std::vector<std::string> lines;
    std::ifstream in(paths.corpus);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    chars = CharVocab::train(lines);
    bpe = BpeModel::train(lines, bpe_vocab);
    auto prep = [&](const std::string& manifest) {
      return prep_utterances(load_manifest(manifest), chars, bpe, stack_factor,
                             sc.audio_cols, sc.video_dim);
    };
    train = prep(paths.train_manifest);
    dev = prep(paths.dev_manifest);
    test = prep(paths.test_manifest);
  }
};

AVASRConfig desk_model_config(const SynthFixture& fx, bool fusion) {
  AVASRConfig cfg;
  cfg.d_model = 48;
  cfg.heads = 2;
  cfg.enc_layers = 2;
  cfg.dec_layers = 2;
  cfg.d_ff = 96;
  cfg.dropout = real(0.1);
  cfg.audio_cols = 43;
  cfg.stack_factor = 4;
  cfg.video_dim = 2048;
  cfg.char_vocab = fx.chars.size();
  cfg.subword_vocab = fx.bpe.size();
  cfg.fusion_enabled = fusion;
  return cfg;
}

TrainConfig desk_train_config(uint64_t seed, real gamma) {
  TrainConfig tc;
  tc.gamma = gamma;
  tc.label_smoothing = real(0.1);
  tc.base_lr = real(2e-3);
  tc.warmup_steps = 150;
  tc.max_epochs = 150;
  tc.patience = 25;
  tc.seed = seed;
  tc.batch_frames = 150;
  return tc;
}

struct DeskRun {
  int best_epoch = -1;
  double heldout_wer = 0;
};

DeskRun desk_run(const SynthFixture& fx, uint64_t seed, real gamma,
                 bool fusion) {
  AVASRConfig mc = desk_model_config(fx, fusion);
  TrainConfig tc = desk_train_config(seed, gamma);
  Rng init(tc.seed);
  AVASRModel model(mc, init);
  TrainResult result = train_loop(model, fx.train, fx.dev, tc);
  EvalOptions opts;
  opts.beam.beam = 5;
  opts.beam.len_norm = 0.7;
  EvalReport report = evaluate(model, fx.test, fx.chars, fx.bpe, opts);
  return DeskRun{result.best_epoch, report.corpus_wer};
}

// run the (seed, variant) grid on two workers; results keyed by index
template <typename Fn>
std::vector<DeskRun> run_grid(int count, const Fn& job) {
  std::vector<DeskRun> out(static_cast<std::size_t>(count));
  std::vector<std::thread> workers;
  for (int w = 0; w < 2; ++w)
    workers.emplace_back([&, w] {
      for (int i = w; i < count; i += 2)
        out[static_cast<std::size_t>(i)] = job(i);
    });
  for (auto& t : workers) t.join();
  return out;
}

// ---- criteria -------------------------------------------------------------

void criterion_1(Suite& suite) {
  auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    AVASRConfig cfg = cert_config();
    Rng mrng(seed);
    AVASRModel model(cfg, mrng);
    Rng arng(seed * 31);
    model.set_alpha_value(static_cast<real>(arng.uniform(0.3, 0.9)));
    Rng drng(seed * 97 + 5);
    Batch batch = random_batch(cfg, drng, 2, 5);
    auto forward = [&] {
      return model_loss(model, batch, real(0.5), real(0.1), false, nullptr)
          .total;
    };
    model.zero_grads();
    forward().backward();
    auto params = model.named_parameters();
    std::vector<Tensor> tensors;
    for (auto& [name, t] : params) tensors.push_back(t);
    auto fd = finite_diff_grad([&] { return forward().item(); }, tensors,
                               real(1e-5));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& g = tensors[i].grad();
      for (std::size_t j = 0; j < g.size(); ++j) {
        double a = g[j], b = fd[i][j];
        double rel =
            std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-5});
        if (rel > worst) {
          worst = rel;
          worst_name = params[i].first;
        }
      }
    }
  }
  double secs = seconds_since(t0);
  bool ok = worst < 1e-4 && secs < 60.0;
  suite.report(1, "gradient certification", ok,
               fmt("max rel err %.2e (at %s), 20 seeds, %.1fs", worst,
                   worst_name.c_str(), secs));
}

void criterion_2(Suite& suite) {
  bool single_key_exact = true;
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor q = Tensor::randn({1, 4, 6}, rng);
    Tensor k = Tensor::randn({1, 1, 6}, rng);
    Tensor v = Tensor::randn({1, 1, 6}, rng);
    Tensor y = scaled_dot_attention(q, k, v, {});
    for (int i = 0; i < 4; ++i)
      for (int d = 0; d < 6; ++d)
        single_key_exact =
            single_key_exact && y.at({0, i, d}) == v.at({0, 0, d});
  }

  AVASRConfig cfg = cert_config();
  Rng mrng(13);
  AVASRModel model(cfg, mrng);
  model.set_alpha_value(real(0.4));
  Rng drng(17);
  Batch batch = random_batch(cfg, drng, 2, 5);

  bool boundaries_exact = true;
  auto probe = [&](real gamma, const Tensor& excluded_head,
                   const Tensor& single_loss_source) {
    model.zero_grads();
    LossBreakdown b =
        model_loss(model, batch, gamma, real(0.1), false, nullptr);
    b.total.backward();
    boundaries_exact =
        boundaries_exact && b.total.item() == single_loss_source.item();
    for (real g : excluded_head.grad())
      boundaries_exact = boundaries_exact && g == real(0);
  };
  {
    LossBreakdown b = model_loss(model, batch, 1, real(0.1), false, nullptr);
    probe(1, model.char_head_.w, b.sub_loss);
    LossBreakdown b0 = model_loss(model, batch, 0, real(0.1), false, nullptr);
    probe(0, model.sub_head_.w, b0.char_loss);
  }
  suite.report(2, "attention/loss identities",
               single_key_exact && boundaries_exact,
               fmt("single-key exact: %s, gamma boundaries exact: %s",
                   single_key_exact ? "yes" : "no",
                   boundaries_exact ? "yes" : "no"));
}

void criterion_3(Suite& suite) {
  SynthConfig sc;
  sc.seed = 19;
  sc.n_train = 6;
  sc.n_dev = 2;
  sc.n_test = 8;
  sc.video_dim = 24;
  SynthFixture fx("acc_tmp/gate", sc, 56, 4);
  AVASRConfig mc = desk_model_config(fx, true);
  mc.d_model = 16;
  mc.d_ff = 32;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.dropout = 0;
  mc.video_dim = 24;
  Rng init(23);
  AVASRModel model(mc, init);  // untrained weights are fine for the identity
  model.set_alpha_value(real(0.85));

  EvalOptions gate;
  gate.mode = MissingVideoMode::kGateAlpha;
  gate.beam.beam = 3;
  EvalReport r_gate = evaluate(model, fx.test, fx.chars, fx.bpe, gate);

  model.set_fusion_enabled(false);
  EvalOptions full;
  full.beam.beam = 3;
  EvalReport r_off = evaluate(model, fx.test, fx.chars, fx.bpe, full);
  model.set_fusion_enabled(true);

  bool identical = r_gate.corpus_wer == r_off.corpus_wer &&
                   r_gate.total_edits == r_off.total_edits;
  for (std::size_t i = 0; i < r_gate.utts.size(); ++i)
    identical = identical && r_gate.utts[i].hyp == r_off.utts[i].hyp &&
                r_gate.utts[i].wer.wer == r_off.utts[i].wer.wer;
  suite.report(3, "alpha-gating equivalence", identical,
               fmt("corpus WER %.6f == %.6f, %zu utterances bit-compared",
                   r_gate.corpus_wer, r_off.corpus_wer, r_gate.utts.size()));
}

void criterion_4(Suite& suite) {
  int agreed = 0;
  const int models = 50;
  for (int m = 0; m < models; ++m) {
    AVASRConfig cfg = cert_config();
    cfg.subword_vocab = 4;
    Rng mrng(200 + static_cast<uint64_t>(m));
    AVASRModel model(cfg, mrng);
    Tensor memory = Tensor::randn({1, 3, cfg.d_model}, mrng);
    Tensor fr = Tensor::full({1, 3}, 1);
    auto scorer = model_scorer(model, memory, fr, Resolution::kSubword);
    BeamOptions bo;
    bo.beam = 64;
    bo.max_len = 3;
    bo.len_norm = 0.7;
    BeamResult beam = beam_search(scorer, 4, bo);
    auto oracle = oracle_exhaustive_decode(
        [&](const std::vector<int>& prefix, int tok) {
          std::vector<int> bos{special::kBos};
          bos.insert(bos.end(), prefix.begin(), prefix.end());
          return scorer({bos})[0][static_cast<std::size_t>(tok)];
        },
        4, special::kEos, 3, 0.7);
    if (beam.tokens == oracle.tokens && beam.finished == oracle.finished)
      ++agreed;
  }
  suite.report(4, "beam-search oracle", agreed == models,
               fmt("%d/%d random models match exhaustive enumeration", agreed,
                   models));
}

void criterion_5(Suite& suite) {
  bool hand = true;
  {
    auto a = word_error({"a", "b", "c"}, {"a", "b", "c"});
    hand = hand && a.wer == 0.0 && a.edits == 0;
    auto b = word_error({"a", "b", "c"}, {"a", "x", "c"});
    hand = hand && std::abs(b.wer - 1.0 / 3) < 1e-15 && b.sub == 1 &&
           b.ins == 0 && b.del == 0;
    auto c = word_error({}, {});
    hand = hand && c.wer == 0.0;
    auto d = word_error({}, {"x"});
    hand = hand && std::isinf(d.wer);
  }
  Rng rng(300);
  std::vector<std::string> alphabet{"a", "b", "c", "d", "e"};
  int agreed = 0;
  const int pairs = 1000;
  for (int trial = 0; trial < pairs; ++trial) {
    auto draw = [&](int maxlen, bool allow_empty) {
      std::vector<std::string> s;
      int len = rng.uniform_int(allow_empty ? 0 : 1, maxlen);
      for (int i = 0; i < len; ++i)
        s.push_back(alphabet[static_cast<std::size_t>(rng.uniform_int(0, 4))]);
      return s;
    };
    auto ref = draw(8, false);
    auto hyp = draw(8, true);
    auto mine = word_error(ref, hyp);
    if (mine.edits == oracle_edit_distance(ref, hyp) &&
        mine.sub + mine.ins + mine.del == mine.edits)
      ++agreed;
  }
  suite.report(5, "WER oracle", hand && agreed == pairs,
               fmt("hand cases %s, %d/%d random pairs exact",
                   hand ? "ok" : "BAD", agreed, pairs));
}

void criterion_6(Suite& suite) {
  auto t0 = std::chrono::steady_clock::now();
  SynthConfig sc;  // the bundled defaults: 30 train utterances, seed 7
  SynthFixture fx("acc_tmp/overfit", sc, 56, 4);

  AVASRConfig mc = desk_model_config(fx, true);
  mc.d_model = 32;
  mc.d_ff = 64;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.dropout = 0;
  TrainConfig tc;
  tc.gamma = real(0.5);
  tc.label_smoothing = 0;
  tc.base_lr = real(2e-3);
  tc.warmup_steps = 60;
  tc.patience = 0;
  tc.seed = 7;
  tc.batch_frames = 400;

  Rng init(tc.seed);
  AVASRModel model(mc, init);
  TrainState state;
  long steps = 0;
  double wer = 1.0;
  while (steps < 2000) {
    TrainConfig chunk = tc;
    chunk.max_epochs = state.next_epoch + 50;
    TrainResult r = train_loop(model, fx.train, fx.train, chunk, state);
    state = r.final_state;  // optimizer and schedule continue seamlessly
    steps = r.steps;
    EvalOptions greedy;
    greedy.beam.beam = 1;
    EvalReport report = evaluate(model, fx.train, fx.chars, fx.bpe, greedy);
    wer = report.corpus_wer;
    if (wer == 0.0) break;
  }
  double secs = seconds_since(t0);
  suite.report(6, "overfit sanity", wer == 0.0 && steps <= 2000 && secs < 600,
               fmt("greedy WER %.4f after %ld steps, %.0fs", wer, steps,
                   secs));
}

void criterion_7_8(Suite& suite) {
  auto t0 = std::chrono::steady_clock::now();
  SynthConfig sc;
  sc.seed = 7;
  sc.n_train = 120;
  sc.n_dev = 16;
  sc.n_test = 16;
  SynthFixture fx("acc_tmp/desk", sc, 56, 4);

  const int seeds = 5;
  // grid: [0..4] gamma=0.5 fused; [5..9] gamma=1.0 fused; [10..14] unfused
  auto grid = run_grid(3 * seeds, [&](int i) {
    uint64_t seed = static_cast<uint64_t>(i % seeds) + 1;
    if (i < seeds) return desk_run(fx, seed, real(0.5), true);
    if (i < 2 * seeds) return desk_run(fx, seed, real(1.0), true);
    return desk_run(fx, seed, real(0.5), false);
  });

  std::vector<double> epochs_mr, epochs_sub, wer_mr, wer_sub, wer_unfused;
  for (int s = 0; s < seeds; ++s) {
    epochs_mr.push_back(grid[static_cast<std::size_t>(s)].best_epoch);
    wer_mr.push_back(grid[static_cast<std::size_t>(s)].heldout_wer);
    epochs_sub.push_back(grid[static_cast<std::size_t>(seeds + s)].best_epoch);
    wer_sub.push_back(grid[static_cast<std::size_t>(seeds + s)].heldout_wer);
    wer_unfused.push_back(
        grid[static_cast<std::size_t>(2 * seeds + s)].heldout_wer);
  }
  double secs = seconds_since(t0);

  bool epochs_ok = median(epochs_mr) <= median(epochs_sub);
  bool wer_ok = median(wer_mr) <= median(wer_sub);
  suite.report(7, "multiresolution direction", epochs_ok && wer_ok,
               fmt("median epochs-to-best %.0f vs %.0f, median WER %.3f vs "
                   "%.3f (gamma 0.5 vs 1.0), %.0fs",
                   median(epochs_mr), median(epochs_sub), median(wer_mr),
                   median(wer_sub), secs));

  bool fusion_ok = median(wer_mr) <= median(wer_unfused);
  suite.report(8, "fusion direction", fusion_ok,
               fmt("median held-out WER fused %.3f vs unfused %.3f over %d "
                   "seeds",
                   median(wer_mr), median(wer_unfused), seeds));
}

void criterion_9(Suite& suite) {
  bool ok = true;
  Rng rng(41);

  // stacking round trip: content recovered exactly, tail zero
  for (int rows : {1, 5, 8, 10, 13}) {
    FeatureMatrix m;
    m.rows = rows;
    m.cols = 43;
    m.data.resize(static_cast<std::size_t>(rows) * 43);
    for (auto& v : m.data) v = static_cast<float>(rng.uniform(-1, 1));
    FeatureMatrix s = stack_frames(m, 4);
    ok = ok && s.rows == (rows + 3) / 4 && s.cols == 172;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < 43; ++c)
        ok = ok && s.at(r / 4, (r % 4) * 43 + c) == m.at(r, c);
    for (int r = rows; r < s.rows * 4; ++r)
      for (int c = 0; c < 43; ++c)
        ok = ok && s.at(r / 4, (r % 4) * 43 + c) == 0.0f;
  }

  // filter boundary: exactly 15 s is kept
  std::vector<UtteranceRecord> recs(4);
  recs[0].duration_s = 5;
  recs[1].duration_s = 14.9;
  recs[2].duration_s = 15.0;
  recs[3].duration_s = 15.1;
  auto f = filter_long(recs, 15.0);
  ok = ok && f.kept.size() == 3 && f.dropped == 1;

  // chunk slices equal direct row-slices
  fs::create_directories("acc_tmp");
  FeatureMatrix m;
  m.rows = 30;
  m.cols = 43;
  m.data.resize(30 * 43);
  for (auto& v : m.data) v = static_cast<float>(rng.uniform(-1, 1));
  write_feature_file("acc_tmp/chunk.af", m);
  UtteranceRecord rec;
  rec.id = "chunky";
  rec.audio_path = "acc_tmp/chunk.af";
  rec.duration_s = 0.30;
  rec.transcript = "a b";
  rec.chunks = {{2, 11, "a"}, {15, 30, "b"}};
  auto chunked = chunk_records({rec});
  ok = ok && chunked.size() == 2;
  FeatureMatrix s0 = load_features(chunked[0]);
  FeatureMatrix s1 = load_features(chunked[1]);
  ok = ok && s0.rows == 9 && s1.rows == 15;
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 43; ++c) ok = ok && s0.at(r, c) == m.at(r + 2, c);
  for (int r = 0; r < 15; ++r)
    for (int c = 0; c < 43; ++c) ok = ok && s1.at(r, c) == m.at(r + 15, c);

  suite.report(9, "preprocessing conservation", ok,
               "stacking/filter/chunk oracles exact");
}

void criterion_10(Suite& suite) {
  SynthConfig sc;
  sc.seed = 29;
  sc.n_train = 6;
  sc.n_dev = 3;
  sc.n_test = 2;
  sc.video_dim = 24;
  SynthFixture fx("acc_tmp/determinism", sc, 50, 4);
  AVASRConfig mc = desk_model_config(fx, true);
  mc.d_model = 16;
  mc.d_ff = 32;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.video_dim = 24;

  TrainConfig tc;
  tc.base_lr = real(1e-3);
  tc.warmup_steps = 10;
  tc.patience = 0;
  tc.seed = 77;
  tc.batch_frames = 300;
  tc.record_step_losses = true;

  auto run_metrics = [&](int epochs) {
    Rng init(tc.seed);
    AVASRModel model(mc, init);
    TrainConfig cfg = tc;
    cfg.max_epochs = epochs;
    std::ostringstream metrics;
    TrainResult r = train_loop(model, fx.train, fx.dev, cfg, {}, &metrics);
    return std::pair<std::string, TrainResult>(metrics.str(), r);
  };
  auto [m1, r1] = run_metrics(6);
  auto [m2, r2] = run_metrics(6);
  bool identical = m1 == m2 && !m1.empty();

  // resume: 3 epochs, checkpoint, 3 more; next-step loss within 1e-6
  fs::create_directories("acc_tmp/ck");
  Rng init(tc.seed);
  AVASRModel model(mc, init);
  TrainConfig first = tc;
  first.max_epochs = 3;
  first.checkpoint_dir = "acc_tmp/ck";
  train_loop(model, fx.train, fx.dev, first);
  LoadedCheckpoint ckpt = read_checkpoint("acc_tmp/ck/last.ckpt");
  AVASRModel resumed_model = restore_model(ckpt);
  TrainConfig rest = tc;
  rest.max_epochs = 6;
  TrainResult resumed =
      train_loop(resumed_model, fx.train, fx.dev, rest, ckpt.state);
  std::size_t offset = r1.step_losses.size() - resumed.step_losses.size();
  double delta =
      std::abs(r1.step_losses[offset] - resumed.step_losses[0]);
  bool resume_ok = delta < 1e-6;

  suite.report(10, "determinism", identical && resume_ok,
               fmt("metrics byte-identical: %s, resume next-step delta %.2e",
                   identical ? "yes" : "no", delta));
}

}  // namespace

int main(int argc, char** argv) {
  // optional args: criterion numbers to run (7 and 8 share one harness)
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  auto run = [&](int n) {
    return wanted.empty() ||
           std::find(wanted.begin(), wanted.end(), n) != wanted.end();
  };

  std::printf("acceptance suite (scalar width %zu)\n", sizeof(real));
  auto t0 = std::chrono::steady_clock::now();
  fs::remove_all("acc_tmp");
  fs::create_directories("acc_tmp");

  Suite suite;
  if (run(1)) criterion_1(suite);
  if (run(2)) criterion_2(suite);
  if (run(3)) criterion_3(suite);
  if (run(4)) criterion_4(suite);
  if (run(5)) criterion_5(suite);
  if (run(6)) criterion_6(suite);
  if (run(7) || run(8)) criterion_7_8(suite);
  if (run(9)) criterion_9(suite);
  if (run(10)) criterion_10(suite);

  fs::remove_all("acc_tmp");
  std::printf("%d criterion failure(s), %.0fs total\n", suite.failures,
              seconds_since(t0));
  return suite.failures == 0 ? 0 : 1;
}
