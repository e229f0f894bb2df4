#include "avasr/decode.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <thread>

namespace avasr {

double Hypothesis::score(double len_norm, LengthNormForm form) const {
  double len = std::max(1, emitted());
  double denom = form == LengthNormForm::kPower
                     ? std::pow(len, len_norm)
                     : std::pow((5.0 + len) / 6.0, len_norm);
  return logprob / denom;
}

namespace {

double hyp_norm_score(double logprob, int emitted, const BeamOptions& opts) {
  Hypothesis h;
  h.tokens.assign(static_cast<std::size_t>(emitted) + 1, 0);
  h.logprob = logprob;
  return h.score(opts.len_norm, opts.form);
}

}  // namespace

BeamResult beam_search(const NextTokenScorer& scorer, int vocab,
                       const BeamOptions& opts) {
  if (opts.beam < 1) throw ConfigError("beam must be >= 1");
  if (opts.max_len < 1) throw ConfigError("max_len must be >= 1");

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;

  for (int step = 0; step < opts.max_len && !live.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(live.size());
    for (const Hypothesis& h : live) prefixes.push_back(h.tokens);
    std::vector<std::vector<double>> logp = scorer(prefixes);
    if (logp.size() != live.size())
      throw ContractError("scorer returned wrong row count");

    struct Cand {
      double lp;
      int hyp;
      int tok;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(vocab));
    for (std::size_t h = 0; h < live.size(); ++h) {
      if (static_cast<int>(logp[h].size()) != vocab)
        throw ContractError("scorer returned wrong vocab width");
      for (int v = 0; v < vocab; ++v)
        cands.push_back({live[h].logprob + logp[h][v],
                         static_cast<int>(h), v});
    }
    std::size_t keep = std::min(cands.size(),
                                static_cast<std::size_t>(opts.beam));
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.lp != b.lp) return a.lp > b.lp;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.tok < b.tok;
                      });

    std::vector<Hypothesis> next;
    next.reserve(keep);
    for (std::size_t c = 0; c < keep; ++c) {
      Hypothesis h = live[static_cast<std::size_t>(cands[c].hyp)];
      h.tokens.push_back(cands[c].tok);
      h.logprob = cands[c].lp;
      if (cands[c].tok == special::kEos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }

  auto better = [&](const Hypothesis& a, const Hypothesis& b) {
    double sa = a.score(opts.len_norm, opts.form);
    double sb = b.score(opts.len_norm, opts.form);
    if (sa != sb) return sa > sb;
    if (a.tokens.size() != b.tokens.size())
      return a.tokens.size() < b.tokens.size();
    return a.tokens < b.tokens;
  };

  const std::vector<Hypothesis>& pool = finished.empty() ? live : finished;
  if (pool.empty()) throw ContractError("beam search produced no hypotheses");
  const Hypothesis* best = &pool[0];
  for (const Hypothesis& h : pool)
    if (better(h, *best)) best = &h;

  BeamResult r;
  r.tokens.assign(best->tokens.begin() + 1, best->tokens.end());
  r.logprob = best->logprob;
  r.norm_score = best->score(opts.len_norm, opts.form);
  r.finished = best->finished;
  return r;
}

NextTokenScorer model_scorer(const AVASRModel& model, const Tensor& memory,
                             const Tensor& frame_real, Resolution res) {
  return [&model, memory, frame_real,
          res](const std::vector<std::vector<int>>& prefixes) {
    NoGradGuard guard;
    int h = static_cast<int>(prefixes.size());
    int len = static_cast<int>(prefixes[0].size());
    std::vector<int> flat;
    flat.reserve(static_cast<std::size_t>(h) * len);
    for (const auto& p : prefixes) {
      if (static_cast<int>(p.size()) != len)
        throw ContractError("beam prefixes must share a length");
      flat.insert(flat.end(), p.begin(), p.end());
    }
    Tensor mem = memory, fr = frame_real;
    if (h > 1) {
      mem = repeat_interleave0(memory, h);
      fr = repeat_interleave0(frame_real, h);
    }
    Tensor logits = model.decoder_logits(mem, fr, flat, h, len, {}, res,
                                         false, nullptr);
    int vocab = logits.dim(-1);
    std::vector<std::vector<double>> out(static_cast<std::size_t>(h));
    const real* pl = logits.data().data();
    for (int i = 0; i < h; ++i) {
      const real* row =
          pl + (static_cast<std::size_t>(i) * len + (len - 1)) * vocab;
      double mx = row[0];
      for (int v = 1; v < vocab; ++v)
        mx = std::max(mx, static_cast<double>(row[v]));
      double denom = 0;
      for (int v = 0; v < vocab; ++v)
        denom += std::exp(static_cast<double>(row[v]) - mx);
      double lse = mx + std::log(denom);
      out[static_cast<std::size_t>(i)].resize(vocab);
      for (int v = 0; v < vocab; ++v)
        out[static_cast<std::size_t>(i)][v] =
            static_cast<double>(row[v]) - lse;
    }
    return out;
  };
}

WerCounts word_error(const std::vector<std::string>& ref,
                     const std::vector<std::string>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  WerCounts c;
  c.ref_words = static_cast<long>(n);
  if (n == 0) {
    c.ins = static_cast<long>(m);
    c.edits = static_cast<long>(m);
    c.wer = m == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    return c;
  }

  // cell = (edits, ins+del); lexicographic min maximizes substitutions,
  // making the reported split order-symmetric
  struct Cell {
    int cost;
    int insdel;
  };
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j)
    prev[j] = {static_cast<int>(j), static_cast<int>(j)};
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = {static_cast<int>(i), static_cast<int>(i)};
    for (std::size_t j = 1; j <= m; ++j) {
      Cell best{prev[j - 1].cost + (ref[i - 1] == hyp[j - 1] ? 0 : 1),
                prev[j - 1].insdel};
      Cell del{prev[j].cost + 1, prev[j].insdel + 1};
      Cell ins{cur[j - 1].cost + 1, cur[j - 1].insdel + 1};
      auto take = [&](const Cell& cand) {
        if (cand.cost < best.cost ||
            (cand.cost == best.cost && cand.insdel < best.insdel))
          best = cand;
      };
      take(del);
      take(ins);
      cur[j] = best;
    }
    std::swap(prev, cur);
  }
  int edits = prev[m].cost;
  int insdel = prev[m].insdel;
  int diff = static_cast<int>(m) - static_cast<int>(n);  // ins - del
  c.edits = edits;
  c.ins = (insdel + diff) / 2;
  c.del = insdel - c.ins;
  c.sub = edits - insdel;
  c.wer = static_cast<double>(edits) / static_cast<double>(n);
  return c;
}

namespace {

Batch single_utterance_batch(const PreppedUtterance& u, int video_dim) {
  Batch b;
  b.size = 1;
  int t = u.audio.rows, d = u.audio.cols;
  if (t < 1) throw ContractError("utterance '" + u.id + "' has no frames");
  std::vector<real> audio(u.audio.data.begin(), u.audio.data.end());
  b.audio = Tensor::from_data({1, t, d}, std::move(audio));
  b.audio_real = Tensor::full({1, t}, 1);
  b.real_frames = static_cast<std::size_t>(t);
  b.video_avail.assign(1, u.video.empty() ? 0 : 1);
  if (!u.video.empty()) {
    std::vector<real> video(u.video.begin(), u.video.end());
    b.video = Tensor::from_data(
        {1, 1, static_cast<int>(u.video.size())}, std::move(video));
  }
  (void)video_dim;
  b.ids.push_back(u.id);
  return b;
}

UttEval eval_one(const AVASRModel& model, const PreppedUtterance& utt,
                 std::size_t index, const CharVocab& chars,
                 const BpeModel& bpe, const EvalOptions& opts) {
  UttEval e;
  e.id = utt.id;
  e.ref = utt.transcript_norm;
  try {
    Batch batch = single_utterance_batch(utt, model.config().video_dim);
    if (opts.mode != MissingVideoMode::kNone) {
      Rng draw_rng(opts.seed * 0x9e3779b9ull + index + 1);
      apply_missing_video(batch, opts.mode, opts.sigma,
                          model.config().video_dim, draw_rng);
    }
    NoGradGuard guard;
    Tensor memory = model.encode_and_fuse(batch, false, nullptr);
    BeamOptions bo = opts.beam;
    if (opts.auto_max_len) bo.max_len = 3 * memory.dim(1) + 8;
    int vocab = opts.resolution == Resolution::kChar
                    ? model.config().char_vocab
                    : model.config().subword_vocab;
    BeamResult r = beam_search(
        model_scorer(model, memory, batch.audio_real, opts.resolution), vocab,
        bo);
    e.finished = r.finished;
    std::vector<int> ids = r.tokens;
    if (!ids.empty() && ids.back() == special::kEos) ids.pop_back();
    e.hyp = opts.resolution == Resolution::kChar ? chars.decode(ids)
                                                 : bpe.decode(ids);
    e.wer = word_error(split_words(e.ref), split_words(e.hyp));
  } catch (const std::exception& ex) {
    e.failed = true;
    e.error = ex.what();
  }
  return e;
}

}  // namespace

EvalReport evaluate(AVASRModel& model,
                    const std::vector<PreppedUtterance>& utts,
                    const CharVocab& chars, const BpeModel& bpe,
                    const EvalOptions& opts) {
  EvalReport report;
  report.mode = missing_mode_name(opts.mode);
  report.resolution =
      opts.resolution == Resolution::kChar ? "char" : "subword";
  report.utts.resize(utts.size());

  // the gate flips alpha for the whole pass, before any worker starts
  std::unique_ptr<AlphaGate> gate;
  if (opts.mode == MissingVideoMode::kGateAlpha)
    gate = std::make_unique<AlphaGate>(model);

  int threads = std::max(1, opts.threads);
  if (threads == 1 || utts.size() < 2) {
    for (std::size_t i = 0; i < utts.size(); ++i)
      report.utts[i] = eval_one(model, utts[i], i, chars, bpe, opts);
  } else {
    std::vector<std::thread> pool;
    std::size_t n = utts.size();
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = static_cast<std::size_t>(w); i < n;
             i += static_cast<std::size_t>(threads))
          report.utts[i] = eval_one(model, utts[i], i, chars, bpe, opts);
      });
    for (auto& t : pool) t.join();
  }
  gate.reset();

  for (const UttEval& e : report.utts) {
    if (e.failed) {
      ++report.failures;
      continue;
    }
    report.total_edits += e.wer.edits;
    report.total_ref_words += e.wer.ref_words;
    report.total_sub += e.wer.sub;
    report.total_ins += e.wer.ins;
    report.total_del += e.wer.del;
    if (!e.finished) ++report.unfinished;
  }
  report.corpus_wer =
      report.total_ref_words > 0
          ? static_cast<double>(report.total_edits) / report.total_ref_words
          : 0.0;
  return report;
}

void write_report_tsv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report: " + path);
  out << "#mode=" << report.mode << "\tresolution=" << report.resolution
      << "\n";
  out << "id\twer\tedits\tsub\tins\tdel\tref_words\tfinished\tref\thyp\n";
  char buf[32];
  for (const UttEval& e : report.utts) {
    if (e.failed) {
      out << e.id << "\tFAILED\t-\t-\t-\t-\t-\t-\t-\t" << e.error << "\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "%.6f", e.wer.wer);
    out << e.id << '\t' << buf << '\t' << e.wer.edits << '\t' << e.wer.sub
        << '\t' << e.wer.ins << '\t' << e.wer.del << '\t' << e.wer.ref_words
        << '\t' << (e.finished ? 1 : 0) << '\t' << e.ref << '\t' << e.hyp
        << "\n";
  }
  std::snprintf(buf, sizeof buf, "%.6f", report.corpus_wer);
  out << "__corpus__\t" << buf << '\t' << report.total_edits << '\t'
      << report.total_sub << '\t' << report.total_ins << '\t'
      << report.total_del << '\t' << report.total_ref_words << '\t'
      << (report.unfinished == 0 ? 1 : 0) << "\t-\t-\n";
}

void print_report(const EvalReport& report, std::ostream& out) {
  char buf[64];
  out << "mode " << report.mode << ", resolution " << report.resolution
      << ", " << report.utts.size() << " utterances\n";
  for (const UttEval& e : report.utts) {
    if (e.failed) {
      out << "  " << e.id << "  FAILED: " << e.error << "\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "%6.2f%%  S%ld I%ld D%ld", 100 * e.wer.wer,
                  e.wer.sub, e.wer.ins, e.wer.del);
    out << "  " << e.id << "  " << buf << (e.finished ? "" : "  [unfinished]")
        << "\n";
  }
  std::snprintf(buf, sizeof buf, "%.2f%%", 100 * report.corpus_wer);
  out << "corpus WER " << buf << "  (" << report.total_edits << " edits / "
      << report.total_ref_words << " words; S" << report.total_sub << " I"
      << report.total_ins << " D" << report.total_del << ")";
  if (report.failures) out << "  FAILURES " << report.failures;
  out << "\n";
}

}  // namespace avasr
