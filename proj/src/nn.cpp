#include "avasr/nn.hpp"

#include <cmath>

namespace avasr {

namespace {

Tensor xavier(int in, int out, Rng& rng) {
  real limit = static_cast<real>(std::sqrt(6.0 / (in + out)));
  return Tensor::rand_uniform({in, out}, rng, -limit, limit, true);
}

Tensor split_heads(const Tensor& x, int heads) {
  int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  Tensor r = reshape(x, {b, t, heads, d / heads});
  r = transpose(r, 1, 2);
  return reshape(r, {b * heads, t, d / heads});
}

Tensor merge_heads(const Tensor& x, int heads) {
  int bh = x.dim(0), t = x.dim(1), dh = x.dim(2);
  Tensor r = reshape(x, {bh / heads, heads, t, dh});
  r = transpose(r, 1, 2);
  return reshape(r, {bh / heads, t, heads * dh});
}

}  // namespace

Tensor apply_dropout(const Tensor& x, real rate, bool train, Rng* rng) {
  if (!train || rate <= real(0)) return x;
  return dropout(x, rate, *rng, true);
}

Linear::Linear(int in, int out, Rng& rng)
    : w(xavier(in, out, rng)), b(Tensor::zeros({out}, true)) {}

void Linear::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
}

LayerNorm::LayerNorm(int dim)
    : gain(Tensor::full({dim}, 1, true)), bias(Tensor::zeros({dim}, true)) {}

void LayerNorm::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".bias", bias);
}

Tensor sinusoidal_positions(int length, int d_model) {
  if (length < 1 || d_model < 1)
    throw DimError("sinusoidal_positions: length and d_model must be >= 1");
  std::vector<real> table(static_cast<std::size_t>(length) * d_model);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < d_model; ++i) {
      double exponent = static_cast<double>(2 * (i / 2)) / d_model;
      double angle = pos / std::pow(10000.0, exponent);
      table[static_cast<std::size_t>(pos) * d_model + i] =
          static_cast<real>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return Tensor::from_data({length, d_model}, std::move(table));
}

Tensor keys_allowed_mask(const Tensor& key_real, int len_q) {
  int b = key_real.dim(0), lk = key_real.dim(1);
  std::vector<real> m(static_cast<std::size_t>(b) * len_q * lk);
  const real* pk = key_real.data().data();
  for (int bi = 0; bi < b; ++bi)
    for (int i = 0; i < len_q; ++i)
      for (int j = 0; j < lk; ++j)
        m[(static_cast<std::size_t>(bi) * len_q + i) * lk + j] =
            pk[static_cast<std::size_t>(bi) * lk + j];
  return Tensor::from_data({b, len_q, lk}, std::move(m));
}

Tensor causal_allowed_mask(const Tensor& key_real) {
  int b = key_real.dim(0), l = key_real.dim(1);
  std::vector<real> m(static_cast<std::size_t>(b) * l * l, real(0));
  const real* pk = key_real.data().data();
  for (int bi = 0; bi < b; ++bi)
    for (int i = 0; i < l; ++i)
      for (int j = 0; j <= i; ++j)
        m[(static_cast<std::size_t>(bi) * l + i) * l + j] =
            pk[static_cast<std::size_t>(bi) * l + j];
  return Tensor::from_data({b, l, l}, std::move(m));
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& mask, bool scale,
                            Tensor* attn_probs) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    throw DimError("attention expects [batch, len, d] inputs");
  if (k.shape() != v.shape())
    throw DimError("attention: K " + shape_str(k.shape()) + " and V " +
                   shape_str(v.shape()) + " must share shape");
  if (q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2))
    throw DimError("attention: Q " + shape_str(q.shape()) +
                   " incompatible with K " + shape_str(k.shape()));
  int b = q.dim(0), lq = q.dim(1), lk = k.dim(1), d = q.dim(2);

  Tensor scores = matmul(q, transpose(k, 1, 2));
  if (scale)
    scores = avasr::scale(scores,
                          static_cast<real>(1.0 / std::sqrt(static_cast<double>(d))));
  if (mask.defined()) {
    if (mask.shape() != Shape{b, lq, lk})
      throw DimError("attention mask " + shape_str(mask.shape()) +
                     " does not match scores " + shape_str(scores.shape()));
    const real* pm = mask.data().data();
    std::vector<real> additive(mask.numel());
    for (int bi = 0; bi < b; ++bi)
      for (int i = 0; i < lq; ++i) {
        bool any = false;
        for (int j = 0; j < lk; ++j) {
          std::size_t idx = (static_cast<std::size_t>(bi) * lq + i) * lk + j;
          bool allowed = pm[idx] != real(0);
          any = any || allowed;
          additive[idx] = allowed ? real(0) : real(-1e9);
        }
        if (!any)
          throw ContractError("attention row " + std::to_string(i) +
                              " of batch " + std::to_string(bi) +
                              " has no allowed key");
      }
    scores = add(scores, Tensor::from_data(mask.shape(), std::move(additive)));
  }
  Tensor probs = softmax(scores, -1);
  if (attn_probs) *attn_probs = probs;
  return matmul(probs, v);
}

MultiHeadAttention::MultiHeadAttention(int d_model_, int heads_, Rng& rng,
                                       bool scale_scores_)
    : heads(heads_), d_model(d_model_), scale_scores(scale_scores_) {
  if (heads < 1 || d_model < 1 || d_model % heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  wq = Linear(d_model, d_model, rng);
  wk = Linear(d_model, d_model, rng);
  wv = Linear(d_model, d_model, rng);
  wo = Linear(d_model, d_model, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& q_src, const Tensor& kv_src,
                                   const Tensor& mask) const {
  if (q_src.dim(-1) != d_model || kv_src.dim(-1) != d_model)
    throw DimError("multi_head_attention: inputs must end in d_model " +
                   std::to_string(d_model));
  Tensor q = split_heads(wq.forward(q_src), heads);
  Tensor k = split_heads(wk.forward(kv_src), heads);
  Tensor v = split_heads(wv.forward(kv_src), heads);
  Tensor m = mask;
  if (m.defined() && heads > 1) m = repeat_interleave0(m, heads);
  Tensor att = scaled_dot_attention(q, k, v, m, scale_scores);
  return wo.forward(merge_heads(att, heads));
}

void MultiHeadAttention::collect(const std::string& prefix,
                                 NamedParams& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
}

FeedForward::FeedForward(int d_model, int d_ff, Rng& rng)
    : inner(d_model, d_ff, rng), outer(d_ff, d_model, rng) {}

void FeedForward::collect(const std::string& prefix, NamedParams& out) const {
  inner.collect(prefix + ".inner", out);
  outer.collect(prefix + ".outer", out);
}

EncoderLayer::EncoderLayer(int d_model, int heads, int d_ff, real dropout_rate,
                           Rng& rng, bool scale_scores)
    : norm_attn(d_model),
      norm_ff(d_model),
      self_attn(d_model, heads, rng, scale_scores),
      ff(d_model, d_ff, rng),
      drop(dropout_rate) {}

Tensor EncoderLayer::forward(const Tensor& x, const Tensor& self_mask,
                             bool train, Rng* rng) const {
  Tensor nx = norm_attn.forward(x);
  Tensor h = add(x, apply_dropout(self_attn.forward(nx, nx, self_mask), drop,
                                  train, rng));
  Tensor nf = norm_ff.forward(h);
  return add(h, apply_dropout(ff.forward(nf), drop, train, rng));
}

void EncoderLayer::collect(const std::string& prefix, NamedParams& out) const {
  norm_attn.collect(prefix + ".norm_attn", out);
  self_attn.collect(prefix + ".self_attn", out);
  norm_ff.collect(prefix + ".norm_ff", out);
  ff.collect(prefix + ".ff", out);
}

DecoderLayer::DecoderLayer(int d_model, int heads, int d_ff, real dropout_rate,
                           Rng& rng, bool scale_scores)
    : norm_self(d_model),
      norm_src(d_model),
      norm_ff(d_model),
      self_attn(d_model, heads, rng, scale_scores),
      src_attn(d_model, heads, rng, scale_scores),
      ff(d_model, d_ff, rng),
      drop(dropout_rate) {}

Tensor DecoderLayer::forward(const Tensor& y, const Tensor& memory,
                             const Tensor& self_mask, const Tensor& mem_mask,
                             bool train, Rng* rng) const {
  Tensor ns = norm_self.forward(y);
  Tensor h = add(y, apply_dropout(self_attn.forward(ns, ns, self_mask), drop,
                                  train, rng));
  Tensor nm = norm_src.forward(h);
  h = add(h, apply_dropout(src_attn.forward(nm, memory, mem_mask), drop,
                           train, rng));
  Tensor nf = norm_ff.forward(h);
  return add(h, apply_dropout(ff.forward(nf), drop, train, rng));
}

void DecoderLayer::collect(const std::string& prefix, NamedParams& out) const {
  norm_self.collect(prefix + ".norm_self", out);
  self_attn.collect(prefix + ".self_attn", out);
  norm_src.collect(prefix + ".norm_src", out);
  src_attn.collect(prefix + ".src_attn", out);
  norm_ff.collect(prefix + ".norm_ff", out);
  ff.collect(prefix + ".ff", out);
}

}  // namespace avasr
