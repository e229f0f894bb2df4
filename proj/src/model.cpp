#include "avasr/model.hpp"

#include <cmath>

namespace avasr {

void AVASRConfig::validate() const {
  if (d_model < 1 || heads < 1 || enc_layers < 1 || dec_layers < 1 ||
      d_ff < 1 || audio_cols < 1 || stack_factor < 1 || video_dim < 1)
    throw ConfigError("model dimensions must be positive");
  if (d_model % heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  if (dropout < real(0) || dropout >= real(1))
    throw ConfigError("dropout must be in [0, 1)");
  if (char_vocab < special::kCount || subword_vocab < special::kCount)
    throw ConfigError("vocab sizes cannot be below the reserved specials");
}

AVASRModel::AVASRModel(const AVASRConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.d_model;
  audio_in_ = Linear(cfg_.audio_dim(), d, rng);
  video_in_ = Linear(cfg_.video_dim, d, rng);
  tied_ff_ = Linear(d, d, rng);
  for (int i = 0; i < cfg_.enc_layers; ++i) {
    audio_enc_.emplace_back(d, cfg_.heads, cfg_.d_ff, cfg_.dropout, rng,
                            cfg_.attention_scaling);
    video_enc_.emplace_back(d, cfg_.heads, cfg_.d_ff, cfg_.dropout, rng,
                            cfg_.attention_scaling);
  }
  audio_enc_norm_ = LayerNorm(d);
  video_enc_norm_ = LayerNorm(d);
  cross_ = MultiHeadAttention(d, cfg_.heads, rng, cfg_.attention_scaling);
  // training starts from the audio-only solution and learns to admit video
  alpha_ = Tensor::zeros({1}, true);
  for (int i = 0; i < cfg_.dec_layers; ++i)
    dec_.emplace_back(d, cfg_.heads, cfg_.d_ff, cfg_.dropout, rng,
                      cfg_.attention_scaling);
  dec_norm_ = LayerNorm(d);
  real emb_std = static_cast<real>(1.0 / std::sqrt(static_cast<double>(d)));
  char_emb_ = Tensor::randn({cfg_.char_vocab, d}, rng, emb_std, true);
  sub_emb_ = Tensor::randn({cfg_.subword_vocab, d}, rng, emb_std, true);
  char_head_ = Linear(d, cfg_.char_vocab, rng);
  sub_head_ = Linear(d, cfg_.subword_vocab, rng);
}

NamedParams AVASRModel::named_parameters() const {
  NamedParams out;
  audio_in_.collect("audio_in", out);
  video_in_.collect("video_in", out);
  tied_ff_.collect("tied_ff", out);
  for (std::size_t i = 0; i < audio_enc_.size(); ++i)
    audio_enc_[i].collect("audio_enc." + std::to_string(i), out);
  audio_enc_norm_.collect("audio_enc_norm", out);
  for (std::size_t i = 0; i < video_enc_.size(); ++i)
    video_enc_[i].collect("video_enc." + std::to_string(i), out);
  video_enc_norm_.collect("video_enc_norm", out);
  cross_.collect("cross", out);
  out.emplace_back("alpha", alpha_);
  for (std::size_t i = 0; i < dec_.size(); ++i)
    dec_[i].collect("dec." + std::to_string(i), out);
  dec_norm_.collect("dec_norm", out);
  out.emplace_back("char_emb", char_emb_);
  out.emplace_back("sub_emb", sub_emb_);
  char_head_.collect("char_head", out);
  sub_head_.collect("sub_head", out);
  return out;
}

std::size_t AVASRModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void AVASRModel::zero_grads() const {
  // allocate-and-zero so parameters outside the current graph (e.g. the
  // video path with fusion off) still present zero gradients to the optimizer
  for (auto& [name, t] : named_parameters()) {
    const_cast<Tensor&>(t).grad();
    const_cast<Tensor&>(t).zero_grad();
  }
}

Tensor AVASRModel::encode_audio(const Tensor& feats, const Tensor& frame_real,
                                bool train, Rng* rng) const {
  if (feats.ndim() != 3 || feats.dim(2) != cfg_.audio_dim())
    throw ConfigError("audio features " + shape_str(feats.shape()) +
                      " do not end in audio_dim " +
                      std::to_string(cfg_.audio_dim()));
  int t = feats.dim(1);
  Tensor x = tied_ff_.forward(audio_in_.forward(feats));
  x = add_rowwise(x, sinusoidal_positions(t, cfg_.d_model));
  x = apply_dropout(x, cfg_.dropout, train, rng);
  Tensor mask = keys_allowed_mask(frame_real, t);
  for (const EncoderLayer& layer : audio_enc_)
    x = layer.forward(x, mask, train, rng);
  return audio_enc_norm_.forward(x);
}

Tensor AVASRModel::encode_video(const Tensor& vfeats, bool train,
                                Rng* rng) const {
  if (vfeats.ndim() != 3 || vfeats.dim(2) != cfg_.video_dim)
    throw ConfigError("video features " + shape_str(vfeats.shape()) +
                      " do not end in video_dim " +
                      std::to_string(cfg_.video_dim));
  Tensor x = tied_ff_.forward(video_in_.forward(vfeats));
  x = apply_dropout(x, cfg_.dropout, train, rng);
  for (const EncoderLayer& layer : video_enc_)
    x = layer.forward(x, {}, train, rng);
  return video_enc_norm_.forward(x);
}

Tensor AVASRModel::fuse(const Tensor& audio_enc, const Tensor& video_enc,
                        bool train, Rng* rng) const {
  if (!cfg_.fusion_enabled) return audio_enc;
  Tensor cross = cross_.forward(audio_enc, video_enc, {});
  cross = apply_dropout(cross, cfg_.dropout, train, rng);
  return add(audio_enc, scale_by(cross, alpha_));
}

Tensor AVASRModel::encode_and_fuse(const Batch& batch, bool train,
                                   Rng* rng) const {
  Tensor audio = encode_audio(batch.audio, batch.audio_real, train, rng);
  if (!cfg_.fusion_enabled) return audio;
  if (!batch.video.defined())
    throw ContractError(
        "fusion enabled but batch has no video features; pick a "
        "missing-input mode");
  for (std::size_t i = 0; i < batch.video_avail.size(); ++i)
    if (!batch.video_avail[i])
      throw ContractError("utterance '" + batch.ids[i] +
                          "' lacks video features with fusion enabled");
  Tensor video = encode_video(batch.video, train, rng);
  return fuse(audio, video, train, rng);
}

Tensor AVASRModel::decoder_logits(const Tensor& memory,
                                  const Tensor& frame_real,
                                  const std::vector<int>& tgt_in, int batch,
                                  int len, const Tensor& tgt_real,
                                  Resolution res, bool train, Rng* rng) const {
  const Tensor& table = res == Resolution::kChar ? char_emb_ : sub_emb_;
  const Linear& head = res == Resolution::kChar ? char_head_ : sub_head_;
  Tensor y = embedding(table, tgt_in, {batch, len});
  y = scale(y, static_cast<real>(std::sqrt(static_cast<double>(cfg_.d_model))));
  y = add_rowwise(y, sinusoidal_positions(len, cfg_.d_model));
  y = apply_dropout(y, cfg_.dropout, train, rng);
  Tensor real_pos = tgt_real.defined() ? tgt_real : Tensor::full({batch, len}, 1);
  Tensor self_mask = causal_allowed_mask(real_pos);
  Tensor mem_mask = keys_allowed_mask(frame_real, len);
  for (const DecoderLayer& layer : dec_)
    y = layer.forward(y, memory, self_mask, mem_mask, train, rng);
  return head.forward(dec_norm_.forward(y));
}

AVASRModel::Output AVASRModel::forward(const Batch& batch, bool train,
                                       Rng* rng) const {
  if (batch.char_in.empty() || batch.sub_in.empty())
    throw ContractError("forward needs targets at both resolutions");
  Tensor memory = encode_and_fuse(batch, train, rng);
  Tensor char_real = Tensor::from_data(
      {batch.size, batch.char_len},
      std::vector<real>(batch.char_mask.begin(), batch.char_mask.end()));
  Tensor sub_real = Tensor::from_data(
      {batch.size, batch.sub_len},
      std::vector<real>(batch.sub_mask.begin(), batch.sub_mask.end()));
  Output out;
  out.char_logits =
      decoder_logits(memory, batch.audio_real, batch.char_in, batch.size,
                     batch.char_len, char_real, Resolution::kChar, train, rng);
  out.sub_logits =
      decoder_logits(memory, batch.audio_real, batch.sub_in, batch.size,
                     batch.sub_len, sub_real, Resolution::kSubword, train, rng);
  return out;
}

MissingVideoMode parse_missing_mode(const std::string& name) {
  if (name == "full" || name == "none") return MissingVideoMode::kNone;
  if (name == "audio_only_zeros" || name == "zeros")
    return MissingVideoMode::kZeros;
  if (name == "audio_only_gaussian" || name == "gaussian")
    return MissingVideoMode::kGaussian;
  if (name == "audio_only_gate" || name == "gate_alpha")
    return MissingVideoMode::kGateAlpha;
  throw ConfigError("unknown missing-video mode: " + name);
}

std::string missing_mode_name(MissingVideoMode mode) {
  switch (mode) {
    case MissingVideoMode::kNone: return "full";
    case MissingVideoMode::kZeros: return "audio_only_zeros";
    case MissingVideoMode::kGaussian: return "audio_only_gaussian";
    case MissingVideoMode::kGateAlpha: return "audio_only_gate";
  }
  return "?";
}

void apply_missing_video(Batch& batch, MissingVideoMode mode, real sigma,
                         int video_dim, Rng& rng) {
  if (mode == MissingVideoMode::kNone) return;
  std::vector<real> v(static_cast<std::size_t>(batch.size) * video_dim,
                      real(0));
  if (mode == MissingVideoMode::kGaussian)
    for (auto& x : v) x = static_cast<real>(rng.normal(0.0, sigma));
  batch.video = Tensor::from_data({batch.size, 1, video_dim}, std::move(v));
  batch.video_avail.assign(static_cast<std::size_t>(batch.size), 1);
}

}  // namespace avasr
