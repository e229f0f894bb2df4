#pragma once

#include <string>
#include <utility>
#include <vector>

#include "avasr/tensor.hpp"

namespace avasr {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Dropout gated on train mode; rng may be null when train is false.
Tensor apply_dropout(const Tensor& x, real rate, bool train, Rng* rng);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]

  Linear() = default;
  Linear(int in, int out, Rng& rng);

  Tensor forward(const Tensor& x) const { return add_bias(matmul(x, w), b); }
  void collect(const std::string& prefix, NamedParams& out) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  real eps = real(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(int dim);

  Tensor forward(const Tensor& x) const {
    return layer_norm(x, gain, bias, eps);
  }
  void collect(const std::string& prefix, NamedParams& out) const;
};

// Fixed sine/cosine position table, [length, d_model].
Tensor sinusoidal_positions(int length, int d_model);

// Key-padding mask: allowed[b, i, j] = key_real[b, j], for len_q query rows.
// key_real is [batch, len_kv] with 1 = real position.
Tensor keys_allowed_mask(const Tensor& key_real, int len_q);
// Causal + key-padding: allowed[b, i, j] = (j <= i) && key_real[b, j].
Tensor causal_allowed_mask(const Tensor& key_real);

// Core attention. q [B, len_q, d], k/v [B, len_kv, d]; optional mask
// [B, len_q, len_kv] with 1 = attend allowed. Masked scores get -1e9 before
// the softmax; a row with no allowed key is a contract error. Scores are
// divided by sqrt(d) unless `scale` is off. When `attn_probs` is non-null the
// post-softmax weights are copied out for inspection.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& mask, bool scale = true,
                            Tensor* attn_probs = nullptr);

struct MultiHeadAttention {
  int heads = 1;
  int d_model = 0;
  bool scale_scores = true;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(int d_model, int heads, Rng& rng, bool scale_scores = true);

  // Self-attention when q_src and kv_src are the same tensor; cross-modal
  // when kv_src comes from the other modality's encoder.
  Tensor forward(const Tensor& q_src, const Tensor& kv_src,
                 const Tensor& mask) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

struct FeedForward {
  Linear inner, outer;

  FeedForward() = default;
  FeedForward(int d_model, int d_ff, Rng& rng);

  Tensor forward(const Tensor& x) const {
    return outer.forward(relu(inner.forward(x)));
  }
  void collect(const std::string& prefix, NamedParams& out) const;
};

// Pre-norm residual blocks: x + dropout(sublayer(norm(x))).
struct EncoderLayer {
  LayerNorm norm_attn, norm_ff;
  MultiHeadAttention self_attn;
  FeedForward ff;
  real drop = 0;

  EncoderLayer() = default;
  EncoderLayer(int d_model, int heads, int d_ff, real dropout_rate, Rng& rng,
               bool scale_scores = true);

  Tensor forward(const Tensor& x, const Tensor& self_mask, bool train,
                 Rng* rng) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

struct DecoderLayer {
  LayerNorm norm_self, norm_src, norm_ff;
  MultiHeadAttention self_attn, src_attn;
  FeedForward ff;
  real drop = 0;

  DecoderLayer() = default;
  DecoderLayer(int d_model, int heads, int d_ff, real dropout_rate, Rng& rng,
               bool scale_scores = true);

  Tensor forward(const Tensor& y, const Tensor& memory, const Tensor& self_mask,
                 const Tensor& mem_mask, bool train, Rng* rng) const;
  void collect(const std::string& prefix, NamedParams& out) const;
};

}  // namespace avasr
