#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "avasr/checkpoint.hpp"
#include "avasr/cli.hpp"
#include "avasr/decode.hpp"
#include "avasr/selfcheck.hpp"
#include "avasr/synth.hpp"
#include "test_util.hpp"

using namespace avasr;
using namespace avasr::testing;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("avasr");
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_run(static_cast<int>(argv.size()), argv.data());
}

// small synth corpus + tokenizers + prepped utterances for library-level runs
struct Corpus {
  SynthPaths paths;
  CharVocab chars;
  BpeModel bpe;
  std::vector<PreppedUtterance> train, dev, test;
  AVASRConfig model_cfg;

  Corpus(const TmpDir& dir, uint64_t seed, int n_train, int video_dim) {
    SynthConfig sc;
    sc.seed = seed;
    sc.n_train = n_train;
    sc.n_dev = 4;
    sc.n_test = 4;
    sc.video_dim = video_dim;
    paths = synth_corpus(dir.file("data"), sc);
    std::vector<std::string> lines;
    std::ifstream in(paths.corpus);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    chars = CharVocab::train(lines);
    bpe = BpeModel::train(lines, 56);
    model_cfg = tiny_config();
    model_cfg.d_model = 32;
    model_cfg.d_ff = 64;
    model_cfg.audio_cols = 43;
    model_cfg.stack_factor = 4;
    model_cfg.video_dim = video_dim;
    model_cfg.char_vocab = chars.size();
    model_cfg.subword_vocab = bpe.size();
    auto prep = [&](const std::string& manifest) {
      return prep_utterances(load_manifest(manifest), chars, bpe,
                             model_cfg.stack_factor, model_cfg.audio_cols,
                             model_cfg.video_dim);
    };
    train = prep(paths.train_manifest);
    dev = prep(paths.dev_manifest);
    test = prep(paths.test_manifest);
  }
};

}  // namespace

TEST_CASE("synth: identical seeds give byte-identical corpora") {
  TmpDir dir("pipe_synth_tmp");
  SynthConfig sc;
  sc.seed = 7;
  sc.n_train = 6;
  sc.n_dev = 2;
  sc.n_test = 2;
  sc.video_dim = 16;
  SynthPaths a = synth_corpus(dir.file("a"), sc);
  SynthPaths b = synth_corpus(dir.file("b"), sc);
  CHECK(slurp(a.corpus) == slurp(b.corpus));
  CHECK(slurp(dir.file("a/audio/utt0000.af")) ==
        slurp(dir.file("b/audio/utt0000.af")));
  CHECK(slurp(dir.file("a/video/utt0003.vf")) ==
        slurp(dir.file("b/video/utt0003.vf")));
  // manifests differ only in the directory prefix
  std::string ma = slurp(a.train_manifest), mb = slurp(b.train_manifest);
  CHECK(ma.size() == mb.size());

  SynthConfig other = sc;
  other.seed = 8;
  SynthPaths c = synth_corpus(dir.file("c"), other);
  CHECK(slurp(a.corpus) != slurp(c.corpus));
}

TEST_CASE("checkpoint round trip preserves parameters and state") {
  TmpDir dir("pipe_ckpt_tmp");
  AVASRConfig cfg = tiny_config();
  Rng rng(3);
  AVASRModel model(cfg, rng);
  model.set_alpha_value(real(0.25));
  TrainState state;
  state.step = 42;
  state.next_epoch = 5;
  state.best_epoch = 3;
  state.best_dev = 1.25;
  state.epochs_since_best = 2;
  state.adam.init(model.named_parameters());
  state.adam.step = 42;
  state.adam.m[0][0] = real(0.5);
  save_checkpoint(dir.file("m.ckpt"), model, state, 99, "");

  LoadedCheckpoint ckpt = read_checkpoint(dir.file("m.ckpt"));
  CHECK(ckpt.seed == 99);
  CHECK(ckpt.state.step == 42);
  CHECK(ckpt.state.next_epoch == 5);
  CHECK(ckpt.state.best_epoch == 3);
  CHECK(ckpt.state.best_dev == 1.25);
  CHECK(ckpt.state.adam.step == 42);
  CHECK(ckpt.state.adam.m[0][0] == real(0.5));
  CHECK(ckpt.config.d_model == cfg.d_model);
  CHECK(ckpt.config.video_dim == cfg.video_dim);

  AVASRModel restored = restore_model(ckpt);
  CHECK(restored.alpha_value() == real(0.25));
  auto a = model.named_parameters();
  auto b = restored.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.data() == b[i].second.data());
  }
}

TEST_CASE("corrupt checkpoint version is rejected") {
  TmpDir dir("pipe_badckpt_tmp");
  std::ofstream out(dir.file("bad.ckpt"), std::ios::binary);
  out.put(char(9));
  out << "garbage";
  out.close();
  CHECK_THROWS_AS(read_checkpoint(dir.file("bad.ckpt")), IoError);
}

TEST_CASE("training pipeline: overfit, decode, resume") {
  TmpDir dir("pipe_train_tmp");
  Corpus corpus(dir, 11, 6, 24);

  TrainConfig tc;
  tc.gamma = real(0.5);
  tc.label_smoothing = real(0.0);
  tc.base_lr = real(2e-3);
  tc.warmup_steps = 40;
  tc.max_epochs = 220;
  tc.patience = 0;  // run the full budget
  tc.seed = 5;
  tc.batch_frames = 300;

  Rng init(tc.seed);
  AVASRModel model(corpus.model_cfg, init);
  std::ostringstream metrics;
  TrainResult result =
      train_loop(model, corpus.train, corpus.train, tc, {}, &metrics);
  REQUIRE(result.steps <= 500);
  CHECK(result.best_dev < 0.05);

  SUBCASE("overfit corpus decodes to zero greedy WER") {
    EvalOptions opts;
    opts.beam.beam = 1;
    EvalReport report =
        evaluate(model, corpus.train, corpus.chars, corpus.bpe, opts);
    CHECK(report.corpus_wer == 0.0);
    CHECK(report.failures == 0);
  }

  SUBCASE("beam search scores at least greedy on every utterance") {
    for (const auto& utt : corpus.train) {
      Batch b;  // single utterance
      std::vector<PreppedUtterance> one{utt};
      EvalOptions greedy;
      greedy.beam.beam = 1;
      EvalOptions wide;
      wide.beam.beam = 5;
      auto rg = evaluate(model, one, corpus.chars, corpus.bpe, greedy);
      auto rw = evaluate(model, one, corpus.chars, corpus.bpe, wide);
      CHECK(rw.utts[0].hyp == rg.utts[0].hyp);  // converged model agrees
    }
  }

  SUBCASE("character-resolution decoding also reaches zero WER") {
    EvalOptions opts;
    opts.resolution = Resolution::kChar;
    opts.beam.beam = 2;
    EvalReport report =
        evaluate(model, corpus.train, corpus.chars, corpus.bpe, opts);
    CHECK(report.corpus_wer == 0.0);
  }
}

TEST_CASE("resume from checkpoint matches the uninterrupted run") {
  TmpDir dir("pipe_resume_tmp");
  Corpus corpus(dir, 13, 5, 16);

  TrainConfig tc;
  tc.label_smoothing = real(0.1);
  tc.base_lr = real(1e-3);
  tc.warmup_steps = 20;
  tc.patience = 0;
  tc.seed = 9;
  tc.batch_frames = 300;
  tc.record_step_losses = true;

  // uninterrupted: 6 epochs
  Rng init_a(tc.seed);
  AVASRModel model_a(corpus.model_cfg, init_a);
  TrainConfig tc6 = tc;
  tc6.max_epochs = 6;
  std::ostringstream metrics_a;
  TrainResult full =
      train_loop(model_a, corpus.train, corpus.dev, tc6, {}, &metrics_a);

  // interrupted at 3, checkpointed, resumed for 3 more
  Rng init_b(tc.seed);
  AVASRModel model_b(corpus.model_cfg, init_b);
  TrainConfig tc3 = tc;
  tc3.max_epochs = 3;
  tc3.checkpoint_dir = dir.file("ck");
  fs::create_directories(tc3.checkpoint_dir);
  std::ostringstream metrics_b1;
  train_loop(model_b, corpus.train, corpus.dev, tc3, {}, &metrics_b1);

  LoadedCheckpoint ckpt = read_checkpoint(dir.file("ck") + "/last.ckpt");
  AVASRModel model_c = restore_model(ckpt);
  TrainConfig tc_resume = tc;
  tc_resume.max_epochs = 6;
  std::ostringstream metrics_b2;
  TrainResult resumed = train_loop(model_c, corpus.train, corpus.dev,
                                   tc_resume, ckpt.state, &metrics_b2);

  // the first post-resume step loss must match the uninterrupted run's
  // step at the same position
  REQUIRE(full.step_losses.size() > resumed.step_losses.size());
  std::size_t offset = full.step_losses.size() - resumed.step_losses.size();
  CHECK(std::abs(full.step_losses[offset] - resumed.step_losses[0]) < 1e-6);
  // and the epoch metrics rows for the overlap agree line for line
  std::istringstream fa(metrics_a.str()), fb(metrics_b2.str());
  std::vector<std::string> la, lb;
  std::string line;
  while (std::getline(fa, line)) la.push_back(line);
  while (std::getline(fb, line)) lb.push_back(line);
  REQUIRE(lb.size() == 3);  // epochs 3..5, no header on resume
  for (std::size_t i = 0; i < lb.size(); ++i)
    CHECK(lb[i] == la[la.size() - 3 + i]);
}

TEST_CASE("cli: full loop from synth to eval") {
  TmpDir dir("pipe_cli_tmp");
  std::string data = dir.file("data"), tokens = dir.file("tokens"),
              run = dir.file("run");
  REQUIRE(run_cli({"synth", "--out-dir", data, "--seed", "3", "--train", "6",
                   "--dev", "2", "--test", "2", "--video-dim", "16"}) == 0);
  REQUIRE(run_cli({"tokenize-train", "--corpus", data + "/corpus.txt",
                   "--out-dir", tokens, "--vocab-size", "56"}) == 0);
  REQUIRE(run_cli({"train", "--train-manifest", data + "/train.tsv",
                   "--dev-manifest", data + "/dev.tsv", "--tokens", tokens,
                   "--out-dir", run, "--d-model", "16", "--d-ff", "32",
                   "--heads", "2", "--enc-layers", "1", "--dec-layers", "1",
                   "--dropout", "0", "--video-dim", "16", "--max-epochs", "3",
                   "--patience", "0", "--warmup-steps", "10", "--seed",
                   "21"}) == 0);
  CHECK(fs::exists(run + "/metrics.tsv"));
  CHECK(fs::exists(run + "/best.ckpt"));
  CHECK(fs::exists(run + "/resolved.config"));
  // the resolved echo names the seed
  CHECK(slurp(run + "/resolved.config").find("seed = 21") !=
        std::string::npos);

  REQUIRE(run_cli({"eval", "--checkpoint", run + "/best.ckpt", "--manifest",
                   data + "/test.tsv", "--tokens", tokens, "--out",
                   dir.file("report.tsv"), "--beam", "2"}) == 0);
  CHECK(fs::exists(dir.file("report.tsv")));
  CHECK(slurp(dir.file("report.tsv")).find("__corpus__") != std::string::npos);
  CHECK(fs::exists(dir.file("report.tsv") + ".resolved.config"));

  REQUIRE(run_cli({"decode", "--checkpoint", run + "/best.ckpt", "--manifest",
                   data + "/test.tsv", "--tokens", tokens, "--out",
                   dir.file("hyp.tsv"), "--beam", "2"}) == 0);
  CHECK(slurp(dir.file("hyp.tsv")).find("utt") != std::string::npos);
}

TEST_CASE("cli: identical config and seed give byte-identical metrics") {
  TmpDir dir("pipe_det_tmp");
  std::string data = dir.file("data"), tokens = dir.file("tokens");
  REQUIRE(run_cli({"synth", "--out-dir", data, "--seed", "5", "--train", "5",
                   "--dev", "2", "--test", "2", "--video-dim", "16"}) == 0);
  REQUIRE(run_cli({"tokenize-train", "--corpus", data + "/corpus.txt",
                   "--out-dir", tokens, "--vocab-size", "50"}) == 0);
  auto train_once = [&](const std::string& out) {
    REQUIRE(run_cli({"train", "--train-manifest", data + "/train.tsv",
                     "--dev-manifest", data + "/dev.tsv", "--tokens", tokens,
                     "--out-dir", out, "--d-model", "16", "--d-ff", "32",
                     "--heads", "2", "--enc-layers", "1", "--dec-layers", "1",
                     "--video-dim", "16", "--max-epochs", "4", "--patience",
                     "0", "--warmup-steps", "10", "--seed", "31"}) == 0);
  };
  train_once(dir.file("runA"));
  train_once(dir.file("runB"));
  CHECK(slurp(dir.file("runA/metrics.tsv")) ==
        slurp(dir.file("runB/metrics.tsv")));
  CHECK(slurp(dir.file("runA/resolved.config")) ==
        slurp(dir.file("runB/resolved.config")));
}

TEST_CASE("cli: gate mode equals no-fusion eval on one checkpoint") {
  TmpDir dir("pipe_gate_tmp");
  std::string data = dir.file("data"), tokens = dir.file("tokens"),
              run = dir.file("run");
  REQUIRE(run_cli({"synth", "--out-dir", data, "--seed", "9", "--train", "6",
                   "--dev", "2", "--test", "2", "--video-dim", "16"}) == 0);
  REQUIRE(run_cli({"tokenize-train", "--corpus", data + "/corpus.txt",
                   "--out-dir", tokens, "--vocab-size", "50"}) == 0);
  REQUIRE(run_cli({"train", "--train-manifest", data + "/train.tsv",
                   "--dev-manifest", data + "/dev.tsv", "--tokens", tokens,
                   "--out-dir", run, "--d-model", "16", "--d-ff", "32",
                   "--heads", "2", "--enc-layers", "1", "--dec-layers", "1",
                   "--video-dim", "16", "--max-epochs", "5", "--patience", "0",
                   "--warmup-steps", "10", "--seed", "41"}) == 0);
  REQUIRE(run_cli({"eval", "--checkpoint", run + "/best.ckpt", "--manifest",
                   data + "/test.tsv", "--tokens", tokens, "--mode",
                   "audio_only_gate", "--beam", "2", "--out",
                   dir.file("gate.tsv")}) == 0);
  REQUIRE(run_cli({"eval", "--checkpoint", run + "/best.ckpt", "--manifest",
                   data + "/test.tsv", "--tokens", tokens, "--no-fusion",
                   "--beam", "2", "--out", dir.file("off.tsv")}) == 0);
  auto strip_header = [](std::string s) {
    return s.substr(s.find('\n') + 1);  // first line echoes the mode
  };
  CHECK(strip_header(slurp(dir.file("gate.tsv"))) ==
        strip_header(slurp(dir.file("off.tsv"))));
}

TEST_CASE("cli: unknown flags exit 2, missing files exit 1") {
  CHECK(run_cli({"eval", "--実在しない"}) == 2);
  CHECK(run_cli({"nonsense-subcommand"}) == 2);
  CHECK(run_cli({"tokenize-train", "--corpus", "does_not_exist.txt",
                 "--out-dir", "pipe_tmp_x"}) == 1);
  fs::remove_all("pipe_tmp_x");
}

TEST_CASE("selfcheck passes in quick mode") {
  std::ostringstream out;
  CHECK(run_selfcheck(out, true));
  CHECK(out.str().find("[FAIL]") == std::string::npos);
}
