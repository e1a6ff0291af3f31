#pragma once

// Independent brute-force reference implementations used by the test suites.
// Everything here is deliberately slow, simple, and structurally unrelated to
// the main-path code: this header depends only on the corpus data model.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "apdt/corpus.hpp"

namespace apdt::oracle {

struct OracleReport {
  std::string case_id;
  double main_value = 0, oracle_value = 0;
  double abs_err = 0, rel_err = 0;
};

inline OracleReport compare(const std::string& case_id, double main_value,
                            double oracle_value) {
  OracleReport r;
  r.case_id = case_id;
  r.main_value = main_value;
  r.oracle_value = oracle_value;
  r.abs_err = std::abs(main_value - oracle_value);
  r.rel_err = r.abs_err / std::max({1e-12, std::abs(main_value), std::abs(oracle_value)});
  return r;
}

// -- n-gram BLEU counter --

// Corpus BLEU via explicit n-gram maps: clipped counts, add-one smoothing on
// zero counts for n >= 2, brevity penalty exp(1 - r/c) when c < r.
inline double bleu_brute(const std::vector<TokenSeq>& cands, const std::vector<TokenSeq>& refs,
                         int max_n = 4) {
  double log_sum = 0;
  long long cand_len = 0, ref_len = 0;
  for (size_t i = 0; i < cands.size(); ++i) {
    cand_len += (long long)cands[i].size();
    ref_len += (long long)refs[i].size();
  }
  for (int n = 1; n <= max_n; ++n) {
    long long matched = 0, total = 0;
    for (size_t i = 0; i < cands.size(); ++i) {
      std::map<TokenSeq, long long> cand_ngrams, ref_ngrams;
      for (int s = 0; s + n <= int(cands[i].size()); ++s)
        ++cand_ngrams[TokenSeq(cands[i].begin() + s, cands[i].begin() + s + n)];
      for (int s = 0; s + n <= int(refs[i].size()); ++s)
        ++ref_ngrams[TokenSeq(refs[i].begin() + s, refs[i].begin() + s + n)];
      for (const auto& [ng, c] : cand_ngrams) {
        total += c;
        auto it = ref_ngrams.find(ng);
        if (it != ref_ngrams.end()) matched += std::min(c, it->second);
      }
    }
    double p;
    if (n == 1) {
      if (total == 0 || matched == 0) return 0.0;
      p = double(matched) / double(total);
    } else {
      p = matched == 0 ? (matched + 1.0) / (total + 1.0) : double(matched) / double(total);
    }
    log_sum += std::log(p);
  }
  double bleu = std::exp(log_sum / max_n);
  if (cand_len < ref_len)
    bleu *= std::exp(1.0 - double(ref_len) / std::max<long long>(1, cand_len));
  return 100.0 * bleu;
}

// -- LCS / ROUGE-L --

inline int lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::vector<int>> dp(a.size() + 1, std::vector<int>(b.size() + 1, 0));
  for (size_t i = 1; i <= a.size(); ++i)
    for (size_t j = 1; j <= b.size(); ++j)
      dp[i][j] = a[i - 1] == b[j - 1] ? dp[i - 1][j - 1] + 1
                                      : std::max(dp[i - 1][j], dp[i][j - 1]);
  return dp[a.size()][b.size()];
}

inline double rouge_l_brute(const TokenSeq& cand, const TokenSeq& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  int lcs = lcs_length(cand, ref);
  if (lcs == 0) return 0.0;
  double p = double(lcs) / double(cand.size());
  double r = double(lcs) / double(ref.size());
  return 2.0 * p * r / (p + r);
}

// -- scatter-add copy summation --

inline std::vector<double> copy_scatter_brute(const std::vector<double>& attn_row,
                                              const std::vector<int>& ids, int vocab) {
  std::vector<double> out(vocab, 0.0);
  for (int w = 0; w < vocab; ++w)
    for (size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == w) out[w] += attn_row[i];
  return out;
}

// -- single-head attention by hand --

// softmax(Q K^T / sqrt(d)) computed with bare loops over already-projected
// query/key rows.
inline std::vector<std::vector<double>> attention_by_hand(
    const std::vector<std::vector<double>>& q, const std::vector<std::vector<double>>& k) {
  const size_t d = q.empty() ? 0 : q[0].size();
  std::vector<std::vector<double>> out(q.size(), std::vector<double>(k.size(), 0.0));
  for (size_t i = 0; i < q.size(); ++i) {
    std::vector<double> scores(k.size(), 0.0);
    for (size_t j = 0; j < k.size(); ++j) {
      for (size_t x = 0; x < d; ++x) scores[j] += q[i][x] * k[j][x];
      scores[j] /= std::sqrt(double(d));
    }
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double z = 0;
    for (size_t j = 0; j < k.size(); ++j) {
      out[i][j] = std::exp(scores[j] - mx);
      z += out[i][j];
    }
    for (size_t j = 0; j < k.size(); ++j) out[i][j] /= z;
  }
  return out;
}

// -- exhaustive decode --

// Length penalty shared with beam search: (5 + len)^a / 6^a.
inline double length_penalty(int len, double exponent) {
  return std::pow(5.0 + len, exponent) / std::pow(6.0, exponent);
}

struct EnumResult {
  std::vector<int> tokens;
  double penalized = -std::numeric_limits<double>::infinity();
  bool finished = false;
  bool valid = false;
};

// Scores every token sequence reachable in at most max_len decoder steps
// (emitting EOS is a step, so finished content has at most max_len - 1
// tokens). Finished sequences include the EOS probability in their score and
// are preferred over unfinished ones; ties go to the lexicographically
// smaller sequence. Guards against blowup: refuses search spaces beyond 1e5.
inline EnumResult enumerate_decode(
    const std::function<std::vector<double>(const std::vector<int>&)>& step, int vocab,
    int eos_id, int max_len, double lenpen_exponent, int min_len = 1,
    const std::vector<int>& banned = {}) {
  if (vocab > 8 || max_len > 4)
    throw ValidationError("enumerate_decode: intended for vocab <= 8, max_len <= 4");
  double space = 0;
  for (int l = 1; l <= max_len; ++l) space += std::pow(double(vocab), l);
  if (space > 1e5) throw ValidationError("enumerate_decode: search space too large");

  std::vector<int> content_tokens;
  for (int w = 0; w < vocab; ++w) {
    bool ok = w != eos_id;
    for (int b : banned)
      if (w == b) ok = false;
    if (ok) content_tokens.push_back(w);
  }

  EnumResult best_finished, best_unfinished;
  auto consider = [](EnumResult& best, const std::vector<int>& toks, double score) {
    if (!best.valid || score > best.penalized ||
        (score == best.penalized && toks < best.tokens)) {
      best.tokens = toks;
      best.penalized = score;
      best.valid = true;
    }
  };

  std::vector<int> seq;
  std::function<void(double)> rec = [&](double logp) {
    auto dist = step(seq);
    const int len = int(seq.size());
    if (len >= min_len && len + 1 <= max_len) {
      double fin = logp + std::log(std::max(dist[eos_id], 1e-300));
      consider(best_finished, seq, fin / length_penalty(len, lenpen_exponent));
    }
    if (len == max_len) {
      consider(best_unfinished, seq, logp / length_penalty(len, lenpen_exponent));
      return;
    }
    for (int w : content_tokens) {
      seq.push_back(w);
      rec(logp + std::log(std::max(dist[w], 1e-300)));
      seq.pop_back();
    }
  };
  rec(0.0);

  EnumResult& r = best_finished.valid ? best_finished : best_unfinished;
  r.finished = best_finished.valid;
  return r;
}

// -- finite differences --

// Central finite differences of a scalar loss over explicitly listed
// parameter scalars (64-bit mode).
inline std::vector<double> finite_diff_grad(const std::function<double()>& loss,
                                            const std::vector<double*>& params,
                                            double eps = 1e-5) {
  std::vector<double> grad(params.size(), 0.0);
  for (size_t i = 0; i < params.size(); ++i) {
    double orig = *params[i];
    *params[i] = orig + eps;
    double up = loss();
    *params[i] = orig - eps;
    double down = loss();
    *params[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericalError("finite_diff_grad: non-finite loss at perturbed point");
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

// -- synthetic aspect rules --

// Re-applies the rule table to a record's attributes (fresh loop, no shared
// code with the generator).
inline std::vector<std::string> aspects_from_rules(const ProductRecord& rec,
                                                   const RuleTable& table) {
  std::vector<std::string> out;
  for (const auto& ap : rec.attributes)
    for (const auto& rule : table.rules)
      if (rule.key == ap.key && rule.value == ap.value) out.push_back(rule.aspect);
  return out;
}

// Aspect-lexicon tokens present in a sequence, in first-appearance order.
inline std::vector<std::string> aspect_tokens_in(const TokenSeq& seq, const RuleTable& table) {
  std::vector<std::string> out;
  for (const auto& tok : seq) {
    bool is_aspect = false;
    for (const auto& rule : table.rules)
      if (rule.aspect == tok) is_aspect = true;
    if (is_aspect) {
      bool seen = false;
      for (const auto& s : out)
        if (s == tok) seen = true;
      if (!seen) out.push_back(tok);
    }
  }
  return out;
}

}  // namespace apdt::oracle
