#include "avasr/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "avasr/checkpoint.hpp"
#include "avasr/decode.hpp"
#include "avasr/selfcheck.hpp"
#include "avasr/synth.hpp"

namespace avasr {

namespace fs = std::filesystem;

namespace {

// defaults <- config file <- explicit flags, echoed next to every output
struct Resolved {
  KV kv;

  AVASRConfig model() const { return model_config_from_kv(kv); }
  TrainConfig train() const { return train_config_from_kv(kv); }

  void echo_to(const std::string& path) const { kv.save(path); }
};

Resolved resolve(const std::string& config_path, const KV& overrides) {
  KV kv;
  model_config_to_kv(AVASRConfig{}, kv);
  train_config_to_kv(TrainConfig{}, kv);
  if (!config_path.empty()) {
    KV file = KV::load(config_path);
    for (const auto& [k, v] : file.items()) kv.set(k, v);
  }
  for (const auto& [k, v] : overrides.items()) kv.set(k, v);
  return Resolved{kv};
}

struct Tokenizers {
  CharVocab chars;
  BpeModel bpe;
};

Tokenizers load_tokenizers(const std::string& dir) {
  Tokenizers t;
  t.chars = CharVocab::load((fs::path(dir) / "chars.vocab").string());
  t.bpe = BpeModel::load((fs::path(dir) / "bpe.model").string());
  return t;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

int cmd_tokenize_train(const std::string& corpus, const std::string& out_dir,
                       int vocab_size) {
  fs::create_directories(out_dir);
  auto lines = read_lines(corpus);
  CharVocab chars = CharVocab::train(lines);
  BpeModel bpe = BpeModel::train(lines, vocab_size);
  chars.save((fs::path(out_dir) / "chars.vocab").string());
  bpe.save((fs::path(out_dir) / "bpe.model").string());
  KV echo;
  echo.set("corpus", corpus);
  echo.set_long("vocab_size", vocab_size);
  echo.set_long("char_vocab", chars.size());
  echo.set_long("bpe_vocab", bpe.size());
  echo.save((fs::path(out_dir) / "tokenize-train.resolved.config").string());
  std::cout << "char vocab " << chars.size() << ", bpe vocab " << bpe.size()
            << " -> " << out_dir << "\n";
  return 0;
}

int cmd_prep(const std::string& manifest, const std::string& out_manifest,
             const std::string& strategy, double max_seconds, int stack,
             const std::string& features_dir, bool skip_bad) {
  ManifestOptions mo;
  mo.skip_bad = skip_bad;
  auto records = load_manifest(manifest, mo, &std::cerr);
  std::vector<UtteranceRecord> out;

  if (strategy == "filter") {
    FilterResult r = filter_long(records, max_seconds);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100 * r.retained_fraction());
    std::cout << "kept " << r.kept.size() << "/" << records.size()
              << " utterances, " << buf << " of total seconds\n";
    out = std::move(r.kept);
  } else if (strategy == "chunk") {
    if (features_dir.empty())
      throw ConfigError("--features-dir is required for chunk (sliced "
                        "feature files are materialized there)");
    fs::create_directories(features_dir);
    out = chunk_records(records);
    for (auto& rec : out) {
      if (!rec.sliced()) continue;
      FeatureMatrix sliced = load_features(rec);
      std::string path =
          (fs::path(features_dir) / (rec.id + ".af")).string();
      write_feature_file(path, sliced);
      rec.audio_path = path;
      rec.frame_start = rec.frame_end = -1;
    }
    std::cout << records.size() << " records -> " << out.size()
              << " chunked records\n";
  } else if (strategy == "stack") {
    if (features_dir.empty())
      throw ConfigError("--features-dir is required for stack (stacked "
                        "feature files are materialized there)");
    fs::create_directories(features_dir);
    out = records;
    for (auto& rec : out) {
      FeatureMatrix stacked = stack_frames(load_features(rec), stack);
      std::string path =
          (fs::path(features_dir) / (rec.id + ".af")).string();
      write_feature_file(path, stacked);
      rec.audio_path = path;
    }
    std::cout << "stacked " << out.size() << " records by " << stack << "\n";
  } else {
    throw ConfigError("unknown prep strategy: " + strategy);
  }

  save_manifest(out_manifest, out);
  KV echo;
  echo.set("manifest", manifest);
  echo.set("strategy", strategy);
  echo.set_double("max_seconds", max_seconds);
  echo.set_long("stack", stack);
  echo.save(out_manifest + ".resolved.config");
  return 0;
}

int cmd_synth(const std::string& out_dir, const SynthConfig& cfg) {
  SynthPaths paths = synth_corpus(out_dir, cfg);
  KV echo;
  echo.set_long("seed", static_cast<long>(cfg.seed));
  echo.set_long("n_train", cfg.n_train);
  echo.set_long("n_dev", cfg.n_dev);
  echo.set_long("n_test", cfg.n_test);
  echo.set_long("video_dim", cfg.video_dim);
  echo.set_long("frames_per_word", cfg.frames_per_word);
  echo.save((fs::path(out_dir) / "synth.resolved.config").string());
  std::cout << "wrote " << paths.train_manifest << ", " << paths.dev_manifest
            << ", " << paths.test_manifest << "\n";
  return 0;
}

int cmd_train(const Resolved& resolved, const std::string& train_manifest,
              const std::string& dev_manifest, const std::string& tokens_dir,
              const std::string& out_dir, const std::string& resume) {
  fs::create_directories(out_dir);
  Tokenizers tok = load_tokenizers(tokens_dir);

  KV kv = resolved.kv;
  kv.set_long("char_vocab", tok.chars.size());
  kv.set_long("subword_vocab", tok.bpe.size());
  kv.set("train_manifest", train_manifest);
  kv.set("dev_manifest", dev_manifest);
  kv.set("tokens", tokens_dir);
  AVASRConfig mc = model_config_from_kv(kv);
  TrainConfig tc = train_config_from_kv(kv);
  tc.checkpoint_dir = out_dir;
  std::string echo = kv.to_string();
  kv.save((fs::path(out_dir) / "resolved.config").string());

  auto train_records = load_manifest(train_manifest);
  auto dev_records = load_manifest(dev_manifest);
  auto train_utts = prep_utterances(train_records, tok.chars, tok.bpe,
                                    mc.stack_factor, mc.audio_cols,
                                    mc.video_dim);
  auto dev_utts = prep_utterances(dev_records, tok.chars, tok.bpe,
                                  mc.stack_factor, mc.audio_cols,
                                  mc.video_dim);

  std::optional<AVASRModel> model;
  TrainState state;
  if (!resume.empty()) {
    LoadedCheckpoint ckpt = read_checkpoint(resume);
    model.emplace(restore_model(ckpt));
    state = ckpt.state;
    std::cout << "resuming from " << resume << " at epoch "
              << state.next_epoch << ", step " << state.step << "\n";
  } else {
    Rng init_rng(tc.seed);
    model.emplace(mc, init_rng);
  }

  std::ofstream metrics((fs::path(out_dir) / "metrics.tsv").string(),
                        resume.empty() ? std::ios::binary
                                       : std::ios::binary | std::ios::app);
  std::ofstream timing((fs::path(out_dir) / "timing.log").string(),
                       std::ios::binary | std::ios::app);
  std::cout << "training on " << train_utts.size() << " utterances (seed "
            << tc.seed << ")\n";
  TrainResult result = train_loop(*model, train_utts, dev_utts, tc, state,
                                  &metrics, &timing, echo);
  std::cout << "best dev loss " << result.best_dev << " at epoch "
            << result.best_epoch << " after " << result.epochs_run
            << " epochs (" << result.steps << " steps, "
            << result.wall_seconds << "s)\n";
  if (!result.best_checkpoint.empty())
    std::cout << "best checkpoint: " << result.best_checkpoint << "\n";
  return 0;
}

EvalOptions eval_options_from(const KV& kv) {
  EvalOptions opts;
  opts.mode = parse_missing_mode(kv.get("mode", "full"));
  opts.sigma = static_cast<real>(kv.get_double("sigma", 0.2));
  std::string res = kv.get("resolution", "subword");
  if (res == "char")
    opts.resolution = Resolution::kChar;
  else if (res == "subword")
    opts.resolution = Resolution::kSubword;
  else
    throw ConfigError("unknown resolution: " + res);
  opts.beam.beam = static_cast<int>(kv.get_long("beam", 5));
  opts.beam.len_norm = kv.get_double("len_norm", 0.7);
  std::string form = kv.get("len_norm_form", "power");
  if (form == "power")
    opts.beam.form = LengthNormForm::kPower;
  else if (form == "gnmt")
    opts.beam.form = LengthNormForm::kGnmt;
  else
    throw ConfigError("unknown len_norm_form: " + form);
  long max_len = kv.get_long("max_len", 0);
  opts.auto_max_len = max_len <= 0;
  if (!opts.auto_max_len) opts.beam.max_len = static_cast<int>(max_len);
  opts.threads = static_cast<int>(kv.get_long("threads", 1));
  opts.seed = static_cast<uint64_t>(kv.get_long("seed", 0));
  return opts;
}

struct EvalSetup {
  AVASRModel model;
  Tokenizers tok;
  std::vector<PreppedUtterance> utts;
  EvalOptions opts;
  KV kv;
};

EvalSetup eval_setup(const std::string& checkpoint,
                     const std::string& manifest,
                     const std::string& tokens_dir, const KV& overrides,
                     bool no_fusion) {
  LoadedCheckpoint ckpt = read_checkpoint(checkpoint);
  AVASRModel model = restore_model(ckpt);
  Tokenizers tok = load_tokenizers(tokens_dir);
  if (tok.chars.size() != model.config().char_vocab ||
      tok.bpe.size() != model.config().subword_vocab)
    throw IoError("tokenizer sizes (" + std::to_string(tok.chars.size()) +
                  " chars, " + std::to_string(tok.bpe.size()) +
                  " subwords) do not match checkpoint config (" +
                  std::to_string(model.config().char_vocab) + ", " +
                  std::to_string(model.config().subword_vocab) + ")");
  if (no_fusion) model.set_fusion_enabled(false);

  auto records = load_manifest(manifest);
  auto utts = prep_utterances(records, tok.chars, tok.bpe,
                              model.config().stack_factor,
                              model.config().audio_cols,
                              model.config().video_dim);
  KV kv = overrides;
  kv.set("checkpoint", checkpoint);
  kv.set("manifest", manifest);
  kv.set("tokens", tokens_dir);
  kv.set_bool("fusion_enabled", model.config().fusion_enabled);
  EvalOptions opts = eval_options_from(kv);
  kv.set("mode", missing_mode_name(opts.mode));
  return EvalSetup{std::move(model), std::move(tok), std::move(utts),
                   opts, std::move(kv)};
}

int cmd_decode(const std::string& checkpoint, const std::string& manifest,
               const std::string& tokens_dir, const std::string& out_path,
               const KV& overrides, bool no_fusion) {
  EvalSetup s = eval_setup(checkpoint, manifest, tokens_dir, overrides,
                           no_fusion);
  EvalReport report = evaluate(s.model, s.utts, s.tok.chars, s.tok.bpe,
                               s.opts);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot write transcripts: " + out_path);
  for (const UttEval& e : report.utts) {
    if (e.failed)
      out << e.id << "\tFAILED\t" << e.error << "\n";
    else
      out << e.id << '\t' << (e.finished ? 1 : 0) << '\t' << e.hyp << "\n";
  }
  s.kv.save(out_path + ".resolved.config");
  std::cout << "decoded " << report.utts.size() << " utterances -> "
            << out_path << "\n";
  return report.failures ? 1 : 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest,
             const std::string& tokens_dir, const std::string& out_path,
             const KV& overrides, bool no_fusion) {
  EvalSetup s = eval_setup(checkpoint, manifest, tokens_dir, overrides,
                           no_fusion);
  EvalReport report = evaluate(s.model, s.utts, s.tok.chars, s.tok.bpe,
                               s.opts);
  print_report(report, std::cout);
  if (!out_path.empty()) {
    write_report_tsv(report, out_path);
    s.kv.save(out_path + ".resolved.config");
  }
  return report.failures ? 1 : 0;
}

}  // namespace

int cli_run(int argc, const char* const* argv) {
  CLI::App app{"audio-visual speech recognizer: tokenizers, training, "
               "decoding, evaluation"};
  app.require_subcommand(1);

  // tokenize-train
  auto* tt = app.add_subcommand("tokenize-train",
                                "train BPE + grapheme vocabularies");
  std::string tt_corpus, tt_out;
  int tt_vocab = 1200;
  tt->add_option("--corpus", tt_corpus, "transcript lines, one per line")
      ->required();
  tt->add_option("--out-dir", tt_out, "output directory")->required();
  tt->add_option("--vocab-size", tt_vocab, "BPE vocabulary target");

  // prep
  auto* prep = app.add_subcommand("prep", "manifest preprocessing");
  std::string p_manifest, p_out, p_strategy, p_features;
  double p_max_seconds = 15.0;
  int p_stack = 4;
  bool p_skip_bad = false;
  prep->add_option("--manifest", p_manifest, "input manifest")->required();
  prep->add_option("--out-manifest", p_out, "output manifest")->required();
  prep->add_option("--strategy", p_strategy, "filter | chunk | stack")
      ->required();
  prep->add_option("--max-seconds", p_max_seconds, "filter threshold");
  prep->add_option("--stack", p_stack, "stacking factor");
  prep->add_option("--features-dir", p_features,
                   "where chunk/stack write new feature files");
  prep->add_flag("--skip-bad", p_skip_bad, "log bad lines instead of failing");

  // synth
  auto* synth = app.add_subcommand("synth", "generate the synthetic corpus");
  std::string s_out;
  SynthConfig s_cfg;
  long s_seed = static_cast<long>(s_cfg.seed);
  synth->add_option("--out-dir", s_out, "output directory")->required();
  synth->add_option("--seed", s_seed, "generation seed");
  synth->add_option("--train", s_cfg.n_train, "train utterances");
  synth->add_option("--dev", s_cfg.n_dev, "dev utterances");
  synth->add_option("--test", s_cfg.n_test, "test utterances");
  synth->add_option("--video-dim", s_cfg.video_dim, "video feature width");
  synth->add_option("--frames-per-word", s_cfg.frames_per_word,
                    "raw frames per word");
  synth->add_option("--filler-words", s_cfg.filler_words,
                    "distinct non-homophone words");

  // shared config-override machinery for train/decode/eval
  auto add_kv_options = [](CLI::App* cmd, std::shared_ptr<KV> kv) {
    auto opt = [cmd, kv](const std::string& flag, const std::string& key,
                         const std::string& help) {
      cmd->add_option_function<std::string>(
          flag, [kv, key](const std::string& v) { kv->set(key, v); }, help);
    };
    opt("--gamma", "gamma", "subword weight in the mixed loss");
    opt("--label-smoothing", "label_smoothing", "label smoothing");
    opt("--lr", "lr", "base learning rate");
    opt("--warmup-steps", "warmup_steps", "schedule warmup steps");
    opt("--max-epochs", "max_epochs", "epoch cap");
    opt("--patience", "patience", "early-stop patience (epochs)");
    opt("--seed", "seed", "run seed");
    opt("--batch-frames", "batch_frames", "padded frames per batch");
    opt("--clip-norm", "clip_norm", "gradient clip (0 off)");
    opt("--schedule", "schedule", "warmup_inv_sqrt | constant");
    opt("--d-model", "d_model", "model width");
    opt("--heads", "heads", "attention heads");
    opt("--enc-layers", "enc_layers", "encoder layers per modality");
    opt("--dec-layers", "dec_layers", "decoder layers");
    opt("--d-ff", "d_ff", "feed-forward width");
    opt("--dropout", "dropout", "dropout rate");
    opt("--stack-factor", "stack_factor", "frame stacking factor");
    opt("--video-dim", "video_dim", "video feature width");
    opt("--attention-scaling", "attention_scaling",
        "scale attention scores by 1/sqrt(d_head)");
    opt("--fusion", "fusion_enabled", "enable cross-modal fusion");
  };

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string t_config, t_train, t_dev, t_tokens, t_out, t_resume;
  auto t_kv = std::make_shared<KV>();
  train->add_option("--config", t_config, "key=value config file");
  train->add_option("--train-manifest", t_train, "training manifest")
      ->required();
  train->add_option("--dev-manifest", t_dev, "development manifest")
      ->required();
  train->add_option("--tokens", t_tokens, "tokenizer directory")->required();
  train->add_option("--out-dir", t_out, "run output directory")->required();
  train->add_option("--resume", t_resume, "checkpoint to continue from");
  add_kv_options(train, t_kv);

  // decode / eval share flags
  auto add_eval_options = [](CLI::App* cmd, std::string& checkpoint,
                             std::string& manifest, std::string& tokens,
                             std::string& out, std::shared_ptr<KV> kv,
                             bool& no_fusion, bool out_required) {
    cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")
        ->required();
    cmd->add_option("--manifest", manifest, "utterances to decode")
        ->required();
    cmd->add_option("--tokens", tokens, "tokenizer directory")->required();
    auto* o = cmd->add_option("--out", out, "output path");
    if (out_required) o->required();
    auto opt = [cmd, kv](const std::string& flag, const std::string& key,
                         const std::string& help) {
      cmd->add_option_function<std::string>(
          flag, [kv, key](const std::string& v) { kv->set(key, v); }, help);
    };
    opt("--mode", "mode",
        "full | audio_only_zeros | audio_only_gaussian | audio_only_gate");
    opt("--sigma", "sigma", "gaussian missing-video stddev");
    opt("--resolution", "resolution", "subword | char");
    opt("--beam", "beam", "beam size");
    opt("--len-norm", "len_norm", "length normalization exponent");
    opt("--len-norm-form", "len_norm_form", "power | gnmt");
    opt("--max-len", "max_len", "decode length cap (0 = auto)");
    opt("--threads", "threads", "parallel decode workers");
    opt("--seed", "seed", "seed for gaussian missing-video draws");
    cmd->add_flag("--no-fusion", no_fusion,
                  "disable cross-modal fusion at inference");
  };

  auto* decode = app.add_subcommand("decode", "transcribe a manifest");
  std::string d_ckpt, d_manifest, d_tokens, d_out;
  auto d_kv = std::make_shared<KV>();
  bool d_no_fusion = false;
  add_eval_options(decode, d_ckpt, d_manifest, d_tokens, d_out, d_kv,
                   d_no_fusion, true);

  auto* eval = app.add_subcommand("eval", "decode and score WER");
  std::string e_ckpt, e_manifest, e_tokens, e_out;
  auto e_kv = std::make_shared<KV>();
  bool e_no_fusion = false;
  add_eval_options(eval, e_ckpt, e_manifest, e_tokens, e_out, e_kv,
                   e_no_fusion, false);

  // selfcheck
  auto* selfcheck = app.add_subcommand("selfcheck",
                                       "run the gradient/oracle suites");
  bool quick = false;
  selfcheck->add_flag("--quick", quick, "trimmed trial counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (tt->parsed()) return cmd_tokenize_train(tt_corpus, tt_out, tt_vocab);
    if (prep->parsed())
      return cmd_prep(p_manifest, p_out, p_strategy, p_max_seconds, p_stack,
                      p_features, p_skip_bad);
    if (synth->parsed()) {
      s_cfg.seed = static_cast<uint64_t>(s_seed);
      return cmd_synth(s_out, s_cfg);
    }
    if (train->parsed())
      return cmd_train(resolve(t_config, *t_kv), t_train, t_dev, t_tokens,
                       t_out, t_resume);
    if (decode->parsed())
      return cmd_decode(d_ckpt, d_manifest, d_tokens, d_out, *d_kv,
                        d_no_fusion);
    if (eval->parsed())
      return cmd_eval(e_ckpt, e_manifest, e_tokens, e_out, *e_kv,
                      e_no_fusion);
    if (selfcheck->parsed())
      return run_selfcheck(std::cout, quick) ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace avasr
