#include "avasr/selfcheck.hpp"

#include <cmath>
#include <functional>

#include "avasr/decode.hpp"
#include "avasr/testing/oracles.hpp"
#include "avasr/train.hpp"

namespace avasr {

namespace {

using testing::oracle_attention;
using testing::oracle_edit_distance;
using testing::oracle_exhaustive_decode;
using testing::oracle_label_smoothed_ce;
using testing::oracle_matmul;
using testing::oracle_sinusoid;
using testing::oracle_softmax;

struct Reporter {
  std::ostream& out;
  bool all_ok = true;

  void check(const std::string& name, bool ok) {
    out << (ok ? "[PASS] " : "[FAIL] ") << name << "\n";
    all_ok = all_ok && ok;
  }
};

AVASRConfig toy_cfg() {
  AVASRConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.d_ff = 16;
  cfg.dropout = 0;
  cfg.audio_cols = 3;
  cfg.stack_factor = 2;
  cfg.video_dim = 10;
  cfg.char_vocab = 8;
  cfg.subword_vocab = 9;
  return cfg;
}

Batch toy_batch(const AVASRConfig& cfg, Rng& rng) {
  Batch b;
  b.size = 2;
  int t = 4;
  b.audio = Tensor::randn({b.size, t, cfg.audio_dim()}, rng);
  b.audio_real = Tensor::full({b.size, t}, 1);
  b.video = Tensor::randn({b.size, 1, cfg.video_dim}, rng);
  b.video_avail.assign(2, 1);
  auto fill = [&](int vocab, int& len, std::vector<int>& in,
                  std::vector<int>& out, std::vector<uint8_t>& mask) {
    len = 4;
    in.assign(static_cast<std::size_t>(b.size) * len, special::kPad);
    out.assign(static_cast<std::size_t>(b.size) * len, special::kPad);
    mask.assign(static_cast<std::size_t>(b.size) * len, 1);
    for (int bi = 0; bi < b.size; ++bi) {
      std::size_t base = static_cast<std::size_t>(bi) * len;
      in[base] = special::kBos;
      for (int i = 1; i < len; ++i)
        in[base + i] = rng.uniform_int(special::kCount, vocab - 1);
      for (int i = 0; i + 1 < len; ++i) out[base + i] = in[base + i + 1];
      out[base + len - 1] = special::kEos;
    }
  };
  fill(cfg.char_vocab, b.char_len, b.char_in, b.char_out, b.char_mask);
  fill(cfg.subword_vocab, b.sub_len, b.sub_in, b.sub_out, b.sub_mask);
  b.ids = {"a", "b"};
  return b;
}

}  // namespace

bool run_selfcheck(std::ostream& out, bool quick) {
  Reporter r{out};
  Rng rng(12345);

  {
    std::vector<double> a(12), b(8);
    for (auto& v : a) v = rng.uniform(-2, 2);
    for (auto& v : b) v = rng.uniform(-2, 2);
    Tensor ta = Tensor::from_data({3, 4}, std::vector<real>(a.begin(), a.end()));
    Tensor tb = Tensor::from_data({4, 2}, std::vector<real>(b.begin(), b.end()));
    Tensor c = matmul(ta, tb);
    auto want = oracle_matmul(a, 3, 4, b, 2);
    bool ok = true;
    for (std::size_t i = 0; i < want.size(); ++i)
      ok = ok && std::abs(static_cast<double>(c.data()[i]) - want[i]) < 1e-5;
    r.check("matmul vs triple-loop oracle", ok);
  }

  {
    Tensor y = softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
    auto want = oracle_softmax({1, 2, 3});
    bool ok = true;
    for (int i = 0; i < 3; ++i)
      ok = ok && std::abs(static_cast<double>(y.data()[i]) - want[i]) < 1e-6;
    Tensor big = softmax(Tensor::from_data({2}, {1000, 0}), 0);
    ok = ok && std::abs(static_cast<double>(big.data()[0]) - 1.0) < 1e-6;
    r.check("softmax oracle and overflow safety", ok);
  }

  {
    Tensor q = Tensor::randn({1, 3, 4}, rng);
    Tensor k = Tensor::randn({1, 1, 4}, rng);
    Tensor v = Tensor::randn({1, 1, 4}, rng);
    Tensor y = scaled_dot_attention(q, k, v, {});
    bool ok = true;
    for (int i = 0; i < 3; ++i)
      for (int d = 0; d < 4; ++d)
        ok = ok && y.at({0, i, d}) == v.at({0, 0, d});
    r.check("single-key attention returns V exactly", ok);
  }

  {
    Tensor t = sinusoidal_positions(4, 8);
    bool ok = true;
    for (int pos = 0; pos < 4; ++pos)
      for (int i = 0; i < 8; ++i)
        ok = ok && std::abs(static_cast<double>(t.at({pos, i})) -
                            oracle_sinusoid(pos, i, 8)) < 1e-6;
    r.check("sinusoidal position oracle", ok);
  }

  {
    std::vector<real> logits{2, -1, 0.5, 0.25, 1, -2};
    Tensor lt = Tensor::from_data({2, 3}, logits);
    Tensor loss = label_smoothed_ce(lt, {0, 2}, {1, 1}, real(0.1));
    double want = (oracle_label_smoothed_ce({2, -1, 0.5}, 0, 0.1) +
                   oracle_label_smoothed_ce({0.25, 1, -2}, 2, 0.1)) /
                  2;
    r.check("label-smoothed cross-entropy oracle",
            std::abs(static_cast<double>(loss.item()) - want) < 1e-5);
  }

  {
    AVASRConfig cfg = toy_cfg();
    Rng mrng(7);
    AVASRModel model(cfg, mrng);
    model.set_alpha_value(real(0.6));
    Rng drng(8);
    Batch batch = toy_batch(cfg, drng);
    auto forward = [&] {
      return model_loss(model, batch, real(0.5), real(0.1), false, nullptr)
          .total;
    };
    model.zero_grads();
    forward().backward();
    std::vector<Tensor> tensors;
    for (auto& [name, t] : model.named_parameters()) tensors.push_back(t);
    if (sizeof(real) == 8) {
      // per-coordinate central differences at full certification tolerance
      auto fd =
          finite_diff_grad([&] { return forward().item(); }, tensors,
                           real(1e-5));
      double worst = 0;
      for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& g = tensors[i].grad();
        for (std::size_t j = 0; j < g.size(); ++j) {
          double a = g[j], b = fd[i][j];
          worst = std::max(
              worst, std::abs(a - b) /
                         std::max({std::abs(a), std::abs(b), 1e-5}));
        }
      }
      r.check("full-model gradient vs finite differences (worst rel err " +
                  std::to_string(worst) + ")",
              worst < 1e-4);
    } else {
      // 32-bit smoke: directional derivative along a random direction,
      // which averages out per-coordinate float noise
      Rng urng(17);
      std::vector<std::vector<real>> dir;
      double norm = 0;
      for (const Tensor& t : tensors) {
        std::vector<real> u(t.numel());
        for (auto& v : u) v = static_cast<real>(urng.normal(0, 1));
        for (real v : u) norm += static_cast<double>(v) * v;
        dir.push_back(std::move(u));
      }
      norm = std::sqrt(norm);
      double analytic = 0;
      for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& g = tensors[i].grad();
        for (std::size_t j = 0; j < g.size(); ++j)
          analytic += static_cast<double>(g[j]) * dir[i][j] / norm;
      }
      const double h = 1e-2;
      auto nudge = [&](double sign) {
        for (std::size_t i = 0; i < tensors.size(); ++i) {
          auto& data = tensors[i].data();
          for (std::size_t j = 0; j < data.size(); ++j)
            data[j] += static_cast<real>(sign * h * dir[i][j] / norm);
        }
      };
      nudge(+1);
      double fp = forward().item();
      nudge(-2);
      double fm = forward().item();
      nudge(+1);
      double fd_dir = (fp - fm) / (2 * h);
      double rel = std::abs(analytic - fd_dir) /
                   std::max({std::abs(analytic), std::abs(fd_dir), 1e-3});
      r.check("full-model directional gradient check (rel err " +
                  std::to_string(rel) + ")",
              rel < 2e-2);
    }
  }

  {
    Rng wrng(31);
    std::vector<std::string> alphabet{"a", "b", "c", "d"};
    int trials = quick ? 50 : 300;
    bool ok = true;
    for (int trial = 0; trial < trials; ++trial) {
      auto draw = [&](int maxlen) {
        std::vector<std::string> s;
        int len = wrng.uniform_int(0, maxlen);
        for (int i = 0; i < len; ++i)
          s.push_back(
              alphabet[static_cast<std::size_t>(wrng.uniform_int(0, 3))]);
        return s;
      };
      auto ref = draw(8);
      if (ref.empty()) ref.push_back("a");
      auto hyp = draw(8);
      ok = ok && word_error(ref, hyp).edits == oracle_edit_distance(ref, hyp);
    }
    r.check("word error rate vs DP oracle", ok);
  }

  {
    AVASRConfig cfg = toy_cfg();
    cfg.subword_vocab = 4;
    int models = quick ? 2 : 5;
    bool ok = true;
    for (int m = 0; m < models && ok; ++m) {
      Rng mrng(100 + static_cast<uint64_t>(m));
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
      ok = beam.tokens == oracle.tokens;
    }
    r.check("beam search vs exhaustive enumeration", ok);
  }

  {
    FeatureMatrix m;
    m.rows = 10;
    m.cols = 43;
    m.data.resize(430);
    for (std::size_t i = 0; i < m.data.size(); ++i)
      m.data[i] = static_cast<float>(rng.uniform(-1, 1));
    FeatureMatrix s = stack_frames(m, 4);
    bool ok = s.rows == 3 && s.cols == 172;
    for (int c = 0; c < 43 && ok; ++c) {
      ok = ok && s.at(2, c) == m.at(8, c) && s.at(2, 43 + c) == m.at(9, c) &&
           s.at(2, 86 + c) == 0.0f && s.at(2, 129 + c) == 0.0f;
    }
    std::vector<UtteranceRecord> recs(4);
    recs[0].duration_s = 5;
    recs[1].duration_s = 14.9;
    recs[2].duration_s = 15.0;
    recs[3].duration_s = 15.1;
    ok = ok && filter_long(recs, 15.0).kept.size() == 3;
    r.check("frame stacking and duration filter oracles", ok);
  }

  out << (r.all_ok ? "selfcheck: all checks passed\n"
                   : "selfcheck: FAILURES detected\n");
  return r.all_ok;
}

}  // namespace avasr
