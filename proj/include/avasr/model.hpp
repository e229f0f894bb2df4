#pragma once

#include <string>
#include <vector>

#include "avasr/data.hpp"
#include "avasr/nn.hpp"

namespace avasr {

struct AVASRConfig {
  int d_model = 480;
  int heads = 6;
  int enc_layers = 6;   // per modality stack
  int dec_layers = 4;
  int d_ff = 1920;
  real dropout = real(0.2);
  int audio_cols = 43;    // raw feature width before stacking
  int stack_factor = 4;
  int video_dim = 2048;
  int char_vocab = 45;
  int subword_vocab = 1200;
  bool attention_scaling = true;
  bool fusion_enabled = true;

  int audio_dim() const { return audio_cols * stack_factor; }
  void validate() const;
};

enum class Resolution { kChar, kSubword };

// Dual-encoder transformer: per-modality input projections feed one tied
// feed-forward layer; the audio encoding is fused with a cross-modal
// attention readout of the video encoding, weighted by the learnable scalar
// alpha; a shared decoder then runs once per output resolution.
class AVASRModel {
 public:
  AVASRModel(const AVASRConfig& cfg, Rng& rng);

  const AVASRConfig& config() const { return cfg_; }
  void set_fusion_enabled(bool on) { cfg_.fusion_enabled = on; }

  // Stable construction order; names are unique and checkpoint-stable.
  NamedParams named_parameters() const;
  std::size_t parameter_count() const;
  void zero_grads() const;

  // projection -> tied FF -> positions -> encoder stack
  Tensor encode_audio(const Tensor& feats, const Tensor& frame_real,
                      bool train, Rng* rng) const;
  // projection -> tied FF (same weights) -> encoder stack; the pooled video
  // sequence has length 1, so no position table is added
  Tensor encode_video(const Tensor& vfeats, bool train, Rng* rng) const;
  // audio + alpha * CrossMHA(Q = audio, K = V = video)
  Tensor fuse(const Tensor& audio_enc, const Tensor& video_enc, bool train,
              Rng* rng) const;
  // Full encode side; returns the decoder memory. With fusion disabled this
  // is exactly the audio encoding.
  Tensor encode_and_fuse(const Batch& batch, bool train, Rng* rng) const;

  // Teacher-forced decoder pass at one resolution over a fused memory.
  // tgt_real marks real target positions ([batch, len]); undefined = all.
  Tensor decoder_logits(const Tensor& memory, const Tensor& frame_real,
                        const std::vector<int>& tgt_in, int batch, int len,
                        const Tensor& tgt_real, Resolution res, bool train,
                        Rng* rng) const;

  struct Output {
    Tensor char_logits;  // [b, char_len, char_vocab]
    Tensor sub_logits;   // [b, sub_len, subword_vocab]
  };
  // Teacher-forced pass over both resolutions; batch must carry both target
  // sequences.
  Output forward(const Batch& batch, bool train, Rng* rng) const;

  real alpha_value() const { return alpha_.data()[0]; }
  void set_alpha_value(real v) { alpha_.data()[0] = v; }

  // members stay public: tests and checkpoints reach in directly
  AVASRConfig cfg_;
  Linear audio_in_, video_in_, tied_ff_;
  std::vector<EncoderLayer> audio_enc_, video_enc_;
  LayerNorm audio_enc_norm_, video_enc_norm_;
  MultiHeadAttention cross_;
  Tensor alpha_;
  std::vector<DecoderLayer> dec_;
  LayerNorm dec_norm_;
  Tensor char_emb_, sub_emb_;
  Linear char_head_, sub_head_;
};

// Missing-visual handling at inference time.
enum class MissingVideoMode { kNone, kZeros, kGaussian, kGateAlpha };

MissingVideoMode parse_missing_mode(const std::string& name);
std::string missing_mode_name(MissingVideoMode mode);

// Replaces the batch's video features per mode: zeros, iid gaussian draws of
// the given sigma, or (for the alpha gate) zeros that only serve as
// placeholders while AlphaGate silences the fused term.
void apply_missing_video(Batch& batch, MissingVideoMode mode, real sigma,
                         int video_dim, Rng& rng);

// Forces alpha to 0 for the guarded scope; parameters are restored on exit.
struct AlphaGate {
  explicit AlphaGate(AVASRModel& m) : model(m), saved(m.alpha_value()) {
    model.set_alpha_value(0);
  }
  ~AlphaGate() { model.set_alpha_value(saved); }
  AlphaGate(const AlphaGate&) = delete;
  AlphaGate& operator=(const AlphaGate&) = delete;

 private:
  AVASRModel& model;
  real saved;
};

}  // namespace avasr
