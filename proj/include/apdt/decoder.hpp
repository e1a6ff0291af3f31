#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "apdt/distill.hpp"

namespace apdt {

// Probability vector over the vocabulary at one decoding step.
template <class Real>
struct StepDistribution {
  std::vector<Real> p;
  int step = 0;
};

// Legal output tokens: everything except PAD and BOS.
inline std::vector<std::uint8_t> legal_tokens(int vocab) {
  std::vector<std::uint8_t> legal(vocab, 1);
  legal[kPad] = 0;
  legal[kBos] = 0;
  return legal;
}

// Gate parameters for the vocab/title-copy/attribute-copy coordination:
// softmax(W2 h_t + W3 c_T + W4 c_A + b2) per decoding step.
template <class Real>
struct GateP {
  int w2 = -1, w3 = -1, w4 = -1, b2 = -1;

  static GateP create(ParamStore<Real>& ps, const std::string& name, int d, Rng& rng) {
    GateP p;
    p.w2 = ps.add(name + ".w2", d, 3);
    p.w3 = ps.add(name + ".w3", d, 3);
    p.w4 = ps.add(name + ".w4", d, 3);
    p.b2 = ps.add(name + ".b2", 1, 3);
    init_xavier(ps.value(p.w2), rng);
    init_xavier(ps.value(p.w3), rng);
    init_xavier(ps.value(p.w4), rng);
    return p;
  }

  // dec_states [T,d], title_ctx [T,d], attr_ctx [T,d] -> lambda [T,3]
  int apply(Bind<Real>& B, int dec_states, int title_ctx, int attr_ctx) const {
    auto& t = B.tape();
    int logits = ops::matmul(t, dec_states, B(w2));
    logits = ops::add(t, logits, ops::matmul(t, title_ctx, B(w3)));
    logits = ops::add(t, logits, ops::matmul(t, attr_ctx, B(w4)));
    logits = ops::add_rowvec(t, logits, B(b2));
    return ops::softmax_rows(t, logits);
  }
};

// Scatters per-step source attention onto vocabulary ids. Rows of `attn` are
// distributions over source positions, so rows of the result are
// distributions over the vocabulary; duplicate source tokens aggregate and
// UNK source positions feed the UNK entry.
template <class Real>
int copy_distribution(Tape<Real>& t, int attn, const std::vector<int>& source_ids, int vocab) {
  return ops::copy_scatter(t, attn, source_ids, vocab);
}

// Convex mixture P = l1*P_vocab + l2*P_cp_title + l3*P_cp_attr with lambda
// [T,3]. Inputs are valid distributions, so the output is too.
template <class Real>
int mix(Tape<Real>& t, int p_vocab, int p_cp_title, int p_cp_attr, int lambda) {
  int m = ops::rowscale(t, p_vocab, ops::slice_cols(t, lambda, 0, 1));
  m = ops::add(t, m, ops::rowscale(t, p_cp_title, ops::slice_cols(t, lambda, 1, 2)));
  m = ops::add(t, m, ops::rowscale(t, p_cp_attr, ops::slice_cols(t, lambda, 2, 3)));
  return m;
}

// Teacher-forced decoder pass artifacts for one record.
template <class Real>
struct SeqForward {
  int probs = -1;      // [T, V]
  int states = -1;     // [T, d]
  int lambda = -1;     // [T, 3] (copy path only)
  int cross_avg = -1;  // [T, memory_len] final-layer head-averaged cross attention
};

// Runs the stacked decoder over a BOS-framed prefix against a given memory.
// Cross-attention weights of the final layer come back head-averaged; the
// copy mechanism renormalizes blocks of them.
template <class Real>
DecoderOut<Real> decode_states(Bind<Real>& B, const DecoderStackP<Real>& dec,
                               const EmbeddingTables<Real>& emb,
                               const std::vector<int>& prefix_ids, int memory,
                               const std::vector<std::uint8_t>& memory_mask,
                               const FwdCtx<Real>& ctx) {
  if (prefix_ids.empty() || prefix_ids[0] != kBos)
    throw ValidationError("decode_states: prefix must start with BOS");
  auto& t = B.tape();
  int x = ops::add(t, ops::gather_rows(t, B(emb.word), prefix_ids),
                   emb.positions(B, int(prefix_ids.size())));
  return dec.apply(B, x, memory, memory_mask.empty() ? nullptr : &memory_mask, ctx);
}

// Vocabulary head: PAD and BOS are masked out before the softmax.
template <class Real>
int vocab_head(Bind<Real>& B, const LinearP<Real>& head, int states,
               const std::vector<std::uint8_t>& legal) {
  auto& t = B.tape();
  return ops::softmax_rows(t, head.apply(B, states), &legal, false);
}

}  // namespace apdt
