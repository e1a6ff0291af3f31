#pragma once

#include <array>
#include <optional>
#include <vector>

#include "apdt/config.hpp"
#include "apdt/decoder.hpp"

namespace apdt {

inline EncodeLimits encode_limits(const TrainConfig& cfg) {
  EncodeLimits lim;
  lim.title_max = cfg.title_max;
  lim.attr_total_max = cfg.attr_total_max;
  lim.review_total_max = cfg.review_total_max;
  lim.desc_max = cfg.desc_max;
  return lim;
}

// The generator: shared source encoders, adaptive posterior distillation
// pathway, and a copy-equipped decoder. The student decodes against the fused
// title+attribute representation; the teacher decodes against reviews enriched
// by the interaction module. Inference uses the student path only.
template <class Real>
class ApdtModel {
 public:
  ApdtModel(const TrainConfig& cfg, int vocab) : cfg_(cfg), vocab_(vocab) {
    cfg_.validate();
    legal_ = legal_tokens(vocab);
    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 17);
    emb_ = EmbeddingTables<Real>::create(ps_, vocab, cfg.d_model, cfg.pos_max(),
                                         cfg.attr_seg_max, cfg.rev_seg_max,
                                         cfg.sinusoidal_positions, rng);
    if (cfg.share_encoder_stack) {
      enc_title_ = EncoderStackP<Real>::create(ps_, "enc", cfg.enc_layers, cfg.d_model,
                                               cfg.ffn_dim, rng);
      enc_attr_ = enc_title_;
      enc_rev_ = enc_title_;
    } else {
      enc_title_ = EncoderStackP<Real>::create(ps_, "enc_t", cfg.enc_layers, cfg.d_model,
                                               cfg.ffn_dim, rng);
      enc_attr_ = EncoderStackP<Real>::create(ps_, "enc_a", cfg.enc_layers, cfg.d_model,
                                              cfg.ffn_dim, rng);
      enc_rev_ = EncoderStackP<Real>::create(ps_, "enc_r", cfg.enc_layers, cfg.d_model,
                                             cfg.ffn_dim, rng);
    }
    proj_ = LinearP<Real>::create(ps_, "distill.proj", cfg.d_model, cfg.d_model, rng);
    inter_ = InteractionP<Real>::create(ps_, "inter", cfg.d_model, cfg.ffn_dim, rng);
    dec_ = DecoderStackP<Real>::create(ps_, "dec", cfg.dec_layers, cfg.d_model, cfg.ffn_dim,
                                       rng);
    head_ = LinearP<Real>::create(ps_, "head", cfg.d_model, vocab, rng);
    gate_ = GateP<Real>::create(ps_, "gate", cfg.d_model, rng);
    if (cfg.share_teacher_decoder) {
      dec_teacher_ = dec_;
      head_teacher_ = head_;
    } else {
      dec_teacher_ = DecoderStackP<Real>::create(ps_, "dec_r", cfg.dec_layers, cfg.d_model,
                                                 cfg.ffn_dim, rng);
      head_teacher_ = LinearP<Real>::create(ps_, "head_r", cfg.d_model, vocab, rng);
    }
    if (cfg.learn_gamma1) gamma1_raw_ = ps_.add("gamma1.raw", 1, 1);  // sigmoid(0) = 0.5
    pin_reserved_rows();
  }

  ParamStore<Real>& params() { return ps_; }
  const ParamStore<Real>& params() const { return ps_; }
  const TrainConfig& cfg() const { return cfg_; }
  int vocab() const { return vocab_; }
  const std::vector<std::uint8_t>& legal() const { return legal_; }

  // PAD embeddings and the padding segment rows stay zero across updates.
  void pin_reserved_rows() {
    auto zero_row = [this](int pid, int row) {
      Mat<Real>& m = ps_.value(pid);
      for (int j = 0; j < m.cols; ++j) m(row, j) = 0;
    };
    zero_row(emb_.word, kPad);
    zero_row(emb_.attr_seg, 0);
    zero_row(emb_.rev_seg, 0);
  }

  FwdCtx<Real> fwd_ctx(bool train, Rng* rng) const {
    FwdCtx<Real> c;
    c.heads = cfg_.heads;
    c.dropout = train ? Real(cfg_.dropout) : Real(0);
    c.act = cfg_.ffn_activation == "relu" ? Act::relu : Act::gelu;
    c.rng = rng;
    c.train = train;
    return c;
  }

  int gamma1_node(Bind<Real>& B) const {
    if (gamma1_raw_ >= 0) return ops::sigmoid(B.tape(), B(gamma1_raw_));
    Mat<Real> g(1, 1);
    g(0, 0) = Real(cfg_.gamma1);
    return B.tape().constant(std::move(g));
  }

  struct ItemEncoding {
    EncoderStackOutput<Real> title, attrs;
    int et_top = -1, ea_top = -1;
    StudentRepresentation<Real> student;
  };

  ItemEncoding encode_item(Bind<Real>& B, const IndexedRecord& rec,
                           const FwdCtx<Real>& ctx) const {
    if (rec.title_ids.empty() || rec.attr_ids.empty())
      throw ValidationError("encode_item: record needs title and attribute tokens");
    ItemEncoding it;
    int t0 = embed_title(B, emb_, rec.title_ids);
    it.title = encode(B, enc_title_, t0, rec.title_mask, Source::title, ctx);
    int a0 = embed_attributes(B, emb_, rec.attr_ids, rec.attr_segs);
    it.attrs = encode(B, enc_attr_, a0, rec.attr_mask, Source::attributes, ctx);
    it.et_top = it.title.top();
    it.ea_top = it.attrs.top();
    std::vector<std::uint8_t> item_mask = rec.title_mask;
    item_mask.insert(item_mask.end(), rec.attr_mask.begin(), rec.attr_mask.end());
    it.student = fuse_student(B, it.et_top, it.ea_top, gamma1_node(B), std::move(item_mask));
    return it;
  }

  EncoderStackOutput<Real> encode_review_stack(Bind<Real>& B, const IndexedRecord& rec,
                                               const FwdCtx<Real>& ctx) const {
    int r0 = embed_reviews(B, emb_, rec.rev_ids, rec.rev_segs);
    return encode(B, enc_rev_, r0, rec.rev_mask, Source::reviews, ctx);
  }

  // E_R': reviews enriched with item information. Empty for review-less
  // records, which then skip the teacher losses.
  TeacherRepresentation<Real> teacher_memory(Bind<Real>& B, const ItemEncoding& item,
                                             const IndexedRecord& rec,
                                             const FwdCtx<Real>& ctx) const {
    TeacherRepresentation<Real> none;
    if (rec.rev_ids.empty()) return none;
    auto rev = encode_review_stack(B, rec, ctx);
    int er_l = select_layer(rev, cfg_.distill_layer);
    int h_proj = project_student(B, proj_, item.student.node);
    return interact(B, inter_, h_proj, item.student.mask, er_l, rec.rev_mask,
                    cfg_.distill_layer, ctx);
  }

  // Teacher-forced student pass: copy-mixed distribution per target position.
  SeqForward<Real> student_forward(Bind<Real>& B, const IndexedRecord& rec,
                                   const ItemEncoding& item, const std::vector<int>& dec_in,
                                   const FwdCtx<Real>& ctx,
                                   std::optional<std::array<Real, 3>> force_lambda =
                                       std::nullopt) const {
    auto& t = B.tape();
    auto dec = decode_states(B, dec_, emb_, dec_in, item.student.node, item.student.mask, ctx);
    SeqForward<Real> out;
    out.states = dec.states;
    out.cross_avg = dec.cross_avg;
    int p_vocab = vocab_head(B, head_, dec.states, legal_);

    std::optional<std::array<Real, 3>> forced = force_lambda;
    if (cfg_.no_copy && !forced) forced = std::array<Real, 3>{Real(1), Real(0), Real(0)};
    if (forced && (*forced)[0] == Real(1)) {
      out.probs = p_vocab;  // pure vocabulary path
      return out;
    }

    const int n_title = item.student.title_len;
    const int n_item = n_title + item.student.attr_len;
    int attn_t = ops::rownorm(t, ops::slice_cols(t, dec.cross_avg, 0, n_title));
    int attn_a = ops::rownorm(t, ops::slice_cols(t, dec.cross_avg, n_title, n_item));
    int p_cp_t = copy_distribution(t, attn_t, rec.title_ids, vocab_);
    int p_cp_a = copy_distribution(t, attn_a, rec.attr_ids, vocab_);
    if (forced) {
      const int T = t.v(dec.states).rows;
      Mat<Real> lam(T, 3);
      for (int i = 0; i < T; ++i)
        for (int j = 0; j < 3; ++j) lam(i, j) = (*forced)[j];
      out.lambda = t.constant(std::move(lam));
    } else {
      int ctx_t = ops::matmul(t, attn_t, item.et_top);
      int ctx_a = ops::matmul(t, attn_a, item.ea_top);
      out.lambda = gate_.apply(B, dec.states, ctx_t, ctx_a);
    }
    out.probs = mix(t, p_vocab, p_cp_t, p_cp_a, out.lambda);
    return out;
  }

  // Teacher pass: same decoder stack (when shared), vocabulary head only.
  SeqForward<Real> teacher_forward(Bind<Real>& B, const TeacherRepresentation<Real>& teacher,
                                   const std::vector<int>& dec_in,
                                   const FwdCtx<Real>& ctx) const {
    if (teacher.empty())
      throw ValidationError("teacher_forward: record has no teacher representation");
    auto dec = decode_states(B, dec_teacher_, emb_, dec_in, teacher.node, teacher.mask, ctx);
    SeqForward<Real> out;
    out.states = dec.states;
    out.cross_avg = dec.cross_avg;
    out.probs = vocab_head(B, head_teacher_, dec.states, legal_);
    return out;
  }

  // -- inference support: encode once, then step the decoder on small tapes --

  struct DecodeMemory {
    Mat<Real> student, et_top, ea_top;
    std::vector<std::uint8_t> student_mask;
    std::vector<int> title_ids, attr_ids;
    int title_len = 0;
  };

  DecodeMemory make_decode_memory(const IndexedRecord& rec) {
    Tape<Real> t;
    Bind<Real> B(t, ps_);
    auto ctx = fwd_ctx(false, nullptr);
    auto item = encode_item(B, rec, ctx);
    DecodeMemory m;
    m.student = t.v(item.student.node);
    m.et_top = t.v(item.et_top);
    m.ea_top = t.v(item.ea_top);
    m.student_mask = item.student.mask;
    m.title_ids = rec.title_ids;
    m.attr_ids = rec.attr_ids;
    m.title_len = item.student.title_len;
    return m;
  }

  // Distribution over the next token given already-generated ids (no BOS).
  std::vector<Real> next_distribution(const DecodeMemory& m,
                                      const std::vector<int>& generated) {
    Tape<Real> t;
    Bind<Real> B(t, ps_);
    auto ctx = fwd_ctx(false, nullptr);
    std::vector<int> dec_in{kBos};
    dec_in.insert(dec_in.end(), generated.begin(), generated.end());
    int mem = t.constant(m.student);
    auto dec = decode_states(B, dec_, emb_, dec_in, mem, m.student_mask, ctx);
    int p_vocab = vocab_head(B, head_, dec.states, legal_);
    int probs;
    if (cfg_.no_copy) {
      probs = p_vocab;
    } else {
      const int n_item = int(m.student_mask.size());
      int attn_t = ops::rownorm(t, ops::slice_cols(t, dec.cross_avg, 0, m.title_len));
      int attn_a = ops::rownorm(t, ops::slice_cols(t, dec.cross_avg, m.title_len, n_item));
      int p_cp_t = copy_distribution(t, attn_t, m.title_ids, vocab_);
      int p_cp_a = copy_distribution(t, attn_a, m.attr_ids, vocab_);
      int ctx_t = ops::matmul(t, attn_t, t.constant(m.et_top));
      int ctx_a = ops::matmul(t, attn_a, t.constant(m.ea_top));
      int lambda = gate_.apply(B, dec.states, ctx_t, ctx_a);
      probs = mix(t, p_vocab, p_cp_t, p_cp_a, lambda);
    }
    const Mat<Real>& P = t.v(probs);
    const int last = P.rows - 1;
    return std::vector<Real>(P.row(last), P.row(last) + P.cols);
  }

  const EmbeddingTables<Real>& embeddings() const { return emb_; }
  const EncoderStackP<Real>& encoder_stack(Source s) const {
    return s == Source::title ? enc_title_ : s == Source::attributes ? enc_attr_ : enc_rev_;
  }
  const DecoderStackP<Real>& decoder_stack() const { return dec_; }
  const LinearP<Real>& out_head() const { return head_; }
  const GateP<Real>& gate() const { return gate_; }
  const LinearP<Real>& distill_proj() const { return proj_; }
  const InteractionP<Real>& interaction() const { return inter_; }

 private:
  TrainConfig cfg_;
  int vocab_;
  std::vector<std::uint8_t> legal_;
  ParamStore<Real> ps_;
  EmbeddingTables<Real> emb_;
  EncoderStackP<Real> enc_title_, enc_attr_, enc_rev_;
  LinearP<Real> proj_;
  InteractionP<Real> inter_;
  DecoderStackP<Real> dec_, dec_teacher_;
  LinearP<Real> head_, head_teacher_;
  GateP<Real> gate_;
  int gamma1_raw_ = -1;
};

}  // namespace apdt
