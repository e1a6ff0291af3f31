#pragma once

#include <cstdint>
#include <vector>

#include "apdt/corpus.hpp"
#include "apdt/nn.hpp"

namespace apdt {

enum class Source { title, attributes, reviews };

// Per-layer outputs of one encoder pass over one source sequence.
template <class Real>
struct EncoderStackOutput {
  std::vector<int> layers;  // tape node ids, layers[l-1] = layer l output
  std::vector<std::uint8_t> mask;
  Source tag = Source::title;

  int depth() const { return int(layers.size()); }
  int top() const { return layers.back(); }
};

// Word / position / attribute-segment / review-segment tables. The PAD word
// row and segment row 0 are held at zero (see ApdtModel::pin_reserved_rows).
template <class Real>
struct EmbeddingTables {
  int word = -1, pos = -1, attr_seg = -1, rev_seg = -1;  // param ids
  int pos_max = 0;
  bool sinusoidal = false;
  Mat<Real> sin_table;

  static EmbeddingTables create(ParamStore<Real>& ps, int vocab, int d, int pos_max,
                                int attr_seg_max, int rev_seg_max, bool sinusoidal,
                                Rng& rng) {
    EmbeddingTables e;
    e.pos_max = pos_max;
    e.sinusoidal = sinusoidal;
    e.word = ps.add("emb.word", vocab, d);
    init_normal(ps.value(e.word), rng, 0.1);
    for (int j = 0; j < d; ++j) ps.value(e.word)(kPad, j) = 0;
    if (sinusoidal) {
      e.sin_table = Mat<Real>(pos_max, d);
      for (int p = 0; p < pos_max; ++p)
        for (int j = 0; j < d; ++j) {
          double angle = p / std::pow(10000.0, 2.0 * (j / 2) / d);
          e.sin_table(p, j) = Real(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    } else {
      e.pos = ps.add("emb.pos", pos_max, d);
      init_normal(ps.value(e.pos), rng, 0.1);
    }
    e.attr_seg = ps.add("emb.attr_seg", attr_seg_max, d);
    init_normal(ps.value(e.attr_seg), rng, 0.1);
    for (int j = 0; j < d; ++j) ps.value(e.attr_seg)(0, j) = 0;
    e.rev_seg = ps.add("emb.rev_seg", rev_seg_max, d);
    init_normal(ps.value(e.rev_seg), rng, 0.1);
    for (int j = 0; j < d; ++j) ps.value(e.rev_seg)(0, j) = 0;
    return e;
  }

  int positions(Bind<Real>& B, int len) const {
    if (len > pos_max)
      throw ValidationError("sequence length " + std::to_string(len) +
                            " exceeds position table size " + std::to_string(pos_max));
    std::vector<int> ids(len);
    for (int i = 0; i < len; ++i) ids[i] = i;
    if (sinusoidal) {
      Mat<Real> rows(len, sin_table.cols);
      for (int i = 0; i < len; ++i)
        std::copy(sin_table.row(i), sin_table.row(i) + sin_table.cols, rows.row(i));
      return B.tape().constant(std::move(rows));
    }
    return ops::gather_rows(B.tape(), B(pos), ids);
  }
};

// WE + PE; positions restart at 0 within each source.
template <class Real>
int embed_title(Bind<Real>& B, const EmbeddingTables<Real>& emb, const std::vector<int>& ids) {
  auto& t = B.tape();
  int we = ops::gather_rows(t, B(emb.word), ids);
  return ops::add(t, we, emb.positions(B, int(ids.size())));
}

// WE + PE + AE; key and value tokens of one pair share the segment embedding.
template <class Real>
int embed_attributes(Bind<Real>& B, const EmbeddingTables<Real>& emb,
                     const std::vector<int>& ids, const std::vector<int>& segs) {
  auto& t = B.tape();
  int x = embed_title(B, emb, ids);
  return ops::add(t, x, ops::gather_rows(t, B(emb.attr_seg), segs));
}

// WE + PE + RE; positions run across the concatenated sentences, RE marks them.
template <class Real>
int embed_reviews(Bind<Real>& B, const EmbeddingTables<Real>& emb,
                  const std::vector<int>& ids, const std::vector<int>& segs) {
  auto& t = B.tape();
  int x = embed_title(B, emb, ids);
  return ops::add(t, x, ops::gather_rows(t, B(emb.rev_seg), segs));
}

// Runs the stacked encoder over an embedded input, retaining every layer
// output for the distillation selector.
template <class Real>
EncoderStackOutput<Real> encode(Bind<Real>& B, const EncoderStackP<Real>& stack, int x0,
                                std::vector<std::uint8_t> mask, Source tag,
                                const FwdCtx<Real>& ctx) {
  if (stack.layers.empty()) throw ValidationError("encode: depth must be >= 1");
  EncoderStackOutput<Real> out;
  out.tag = tag;
  out.mask = std::move(mask);
  out.layers = stack.apply(B, x0, out.mask.empty() ? nullptr : &out.mask, ctx);
  return out;
}

}  // namespace apdt
