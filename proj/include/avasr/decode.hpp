#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "avasr/model.hpp"
#include "avasr/tokenizer.hpp"

namespace avasr {

enum class LengthNormForm { kPower, kGnmt };

// Partial or complete decode with its accumulated log-probability. Tokens
// are BOS-prefixed; emitted length excludes BOS. The normalized score is
// always recomputed from the fields.
struct Hypothesis {
  std::vector<int> tokens{special::kBos};
  double logprob = 0;
  bool finished = false;

  int emitted() const { return static_cast<int>(tokens.size()) - 1; }
  double score(double len_norm, LengthNormForm form) const;
};

struct BeamOptions {
  int beam = 5;
  double len_norm = 0.7;
  LengthNormForm form = LengthNormForm::kPower;
  int max_len = 200;  // emitted tokens, EOS included
};

struct BeamResult {
  std::vector<int> tokens;  // emitted sequence, EOS included when finished
  double logprob = 0;
  double norm_score = 0;
  bool finished = false;
};

// Batch scorer: BOS-prefixed prefixes (equal length) in, per-prefix
// log-softmax over the vocabulary out.
using NextTokenScorer = std::function<std::vector<std::vector<double>>(
    const std::vector<std::vector<int>>&)>;

// Standard beam search: top-beam continuations by summed log-probability;
// EOS moves a hypothesis to the finished pool; the argmax of
// logprob / len^len_norm over finished hypotheses wins, falling back to the
// best unfinished one when nothing finished. beam=1 is exactly greedy.
BeamResult beam_search(const NextTokenScorer& scorer, int vocab,
                       const BeamOptions& opts);

// Scorer over one utterance's fused memory at the given resolution.
NextTokenScorer model_scorer(const AVASRModel& model, const Tensor& memory,
                             const Tensor& frame_real, Resolution res);

struct WerCounts {
  long edits = 0, sub = 0, ins = 0, del = 0;
  long ref_words = 0;
  double wer = 0;  // infinity for a nonempty hyp against an empty ref
};

// Word-level Levenshtein alignment with unit costs. Among optimal
// alignments the one maximizing substitutions is reported, which makes the
// split symmetric: wer(a,b) swaps ins and del of wer(b,a).
WerCounts word_error(const std::vector<std::string>& ref,
                     const std::vector<std::string>& hyp);

struct UttEval {
  std::string id;
  std::string ref, hyp;
  WerCounts wer;
  bool finished = true;
  bool failed = false;
  std::string error;
};

struct EvalReport {
  std::vector<UttEval> utts;
  long total_edits = 0, total_ref_words = 0;
  long total_sub = 0, total_ins = 0, total_del = 0;
  double corpus_wer = 0;  // total edits / total reference words
  int unfinished = 0;
  int failures = 0;
  std::string mode;        // missing-input mode echo
  std::string resolution;  // decode resolution echo
};

struct EvalOptions {
  MissingVideoMode mode = MissingVideoMode::kNone;
  real sigma = real(0.2);
  Resolution resolution = Resolution::kSubword;
  BeamOptions beam;
  bool auto_max_len = true;  // derive max_len from the memory length
  int threads = 1;
  uint64_t seed = 0;  // drives gaussian missing-video draws
};

// Decodes every utterance (in parallel when asked), scores word-level WER
// against the normalized transcript, and aggregates in utterance order.
EvalReport evaluate(AVASRModel& model,
                    const std::vector<PreppedUtterance>& utts,
                    const CharVocab& chars, const BpeModel& bpe,
                    const EvalOptions& opts);

void write_report_tsv(const EvalReport& report, const std::string& path);
void print_report(const EvalReport& report, std::ostream& out);

}  // namespace avasr
