#pragma once

// Independent reference implementations used by the test and selfcheck
// suites. Everything here is computed in plain double with the most direct
// formulation available and must stay decoupled from the library internals
// it certifies.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace avasr::testing {

// Naive triple-loop matrix product, row-major.
inline std::vector<double> oracle_matmul(const std::vector<double>& a, int m,
                                         int k, const std::vector<double>& b,
                                         int n) {
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p)
        acc += a[static_cast<std::size_t>(i) * k + p] *
               b[static_cast<std::size_t>(p) * n + j];
      out[static_cast<std::size_t>(i) * n + j] = acc;
    }
  return out;
}

// Direct exp/sum softmax of one slice.
inline std::vector<double> oracle_softmax(const std::vector<double>& x) {
  double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    denom += out[i];
  }
  for (auto& v : out) v /= denom;
  return out;
}

// Attention for one batch element: q [lq, d], k/v [lkv, d], scores scaled
// by 1/sqrt(d) when `scaled`, exp-normalized weights applied to v.
inline std::vector<double> oracle_attention(const std::vector<double>& q,
                                            const std::vector<double>& k,
                                            const std::vector<double>& v,
                                            int lq, int lkv, int d,
                                            bool scaled) {
  std::vector<double> out(static_cast<std::size_t>(lq) * d, 0.0);
  for (int i = 0; i < lq; ++i) {
    std::vector<double> scores(lkv);
    for (int j = 0; j < lkv; ++j) {
      double s = 0.0;
      for (int p = 0; p < d; ++p)
        s += q[static_cast<std::size_t>(i) * d + p] *
             k[static_cast<std::size_t>(j) * d + p];
      scores[j] = scaled ? s / std::sqrt(static_cast<double>(d)) : s;
    }
    std::vector<double> w = oracle_softmax(scores);
    for (int j = 0; j < lkv; ++j)
      for (int p = 0; p < d; ++p)
        out[static_cast<std::size_t>(i) * d + p] +=
            w[j] * v[static_cast<std::size_t>(j) * d + p];
  }
  return out;
}

inline double oracle_sinusoid(int pos, int i, int d_model) {
  double angle = pos / std::pow(10000.0, (2.0 * (i / 2)) / d_model);
  return i % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

// Cross-entropy against the smoothed target distribution for one token.
inline double oracle_label_smoothed_ce(const std::vector<double>& logits,
                                       int target, double eps) {
  double mx = *std::max_element(logits.begin(), logits.end());
  double lse = 0.0;
  for (double v : logits) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  int V = static_cast<int>(logits.size());
  double loss = 0.0;
  for (int i = 0; i < V; ++i) {
    double q = i == target ? 1.0 - eps : eps / (V - 1);
    loss -= q * (logits[i] - lse);
  }
  return loss;
}

// Full-DP Levenshtein distance over word sequences, unit costs.
inline int oracle_edit_distance(const std::vector<std::string>& a,
                                const std::vector<std::string>& b) {
  std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) dp[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) dp[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      int sub = dp[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      int del = dp[i - 1][j] + 1;
      int ins = dp[i][j - 1] + 1;
      dp[i][j] = std::min({sub, del, ins});
    }
  return dp[n][m];
}

// Exhaustive search over every token sequence the decoder could emit:
// sequences with eos only in final position (finished) plus eos-free
// sequences of exactly max_len (unfinished). `step_logprob(prefix, tok)`
// scores one extension; finished sequences win over unfinished ones.
struct OracleBeamResult {
  std::vector<int> tokens;
  double norm_score = 0.0;
  bool finished = false;
};

inline OracleBeamResult oracle_exhaustive_decode(
    const std::function<double(const std::vector<int>&, int)>& step_logprob,
    int vocab, int eos, int max_len, double len_norm) {
  OracleBeamResult best;
  bool have = false;
  std::function<void(std::vector<int>&, double)> walk =
      [&](std::vector<int>& prefix, double logprob) {
        int len = static_cast<int>(prefix.size());
        if (len >= max_len) return;
        for (int tok = 0; tok < vocab; ++tok) {
          double lp = logprob + step_logprob(prefix, tok);
          prefix.push_back(tok);
          bool fin = tok == eos;
          bool terminal = fin || static_cast<int>(prefix.size()) == max_len;
          if (terminal) {
            double score =
                lp / std::pow(static_cast<double>(prefix.size()), len_norm);
            bool better =
                !have || (fin && !best.finished) ||
                (fin == best.finished && score > best.norm_score);
            if (better) {
              best.tokens = prefix;
              best.norm_score = score;
              best.finished = fin;
              have = true;
            }
          }
          if (!fin) walk(prefix, lp);
          prefix.pop_back();
        }
      };
  std::vector<int> prefix;
  walk(prefix, 0.0);
  return best;
}

}  // namespace avasr::testing
