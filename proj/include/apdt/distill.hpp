#pragma once

#include <cstdint>
#include <vector>

#include "apdt/encoder.hpp"

namespace apdt {

// Fused title+attribute representation: the scaled title block stacked on the
// scaled attribute block. Row counts differ between the two sources, so the
// gamma-weighted combination is realized block-wise; this keeps one row per
// source token, which the copy attention downstream depends on.
template <class Real>
struct StudentRepresentation {
  int node = -1;                    // [title_len + attr_len, d]
  int title_len = 0, attr_len = 0;  // block boundary = title_len
  std::vector<std::uint8_t> mask;
};

template <class Real>
struct TeacherRepresentation {
  int node = -1;  // [rev_len, d]; -1 when the record has no reviews
  int source_layer = 0;
  std::vector<std::uint8_t> mask;

  bool empty() const { return node < 0; }
};

// gamma1 scales the title block, (1 - gamma1) the attribute block. The weight
// arrives as a 1x1 node so a learned gamma1 keeps its gradient.
template <class Real>
StudentRepresentation<Real> fuse_student(Bind<Real>& B, int et_top, int ea_top, int gamma1,
                                         std::vector<std::uint8_t> item_mask) {
  auto& t = B.tape();
  StudentRepresentation<Real> s;
  s.title_len = t.v(et_top).rows;
  s.attr_len = t.v(ea_top).rows;
  Mat<Real> one(1, 1);
  one(0, 0) = Real(1);
  int complement = ops::add(t, t.constant(std::move(one)), ops::scale(t, gamma1, Real(-1)));
  s.node = ops::concat_rows(t, ops::scale_by(t, et_top, gamma1),
                            ops::scale_by(t, ea_top, complement));
  s.mask = std::move(item_mask);
  return s;
}

// Non-linear projection ahead of the interaction module: Gelu(W1 x + b1).
template <class Real>
int project_student(Bind<Real>& B, const LinearP<Real>& proj, int hs) {
  return ops::gelu(B.tape(), proj.apply(B, hs));
}

// Picks the L-th encoder layer output (1-based) for the teacher pathway.
template <class Real>
int select_layer(const EncoderStackOutput<Real>& stack, int L) {
  if (L < 1 || L > stack.depth())
    throw ValidationError("select_layer: L=" + std::to_string(L) + " outside [1, " +
                          std::to_string(stack.depth()) + "]");
  return stack.layers[L - 1];
}

// One cross-attention block followed by a feed-forward block, both pre-norm
// residual. Queries come from the selected review layer, keys and values from
// the projected item representation, so the output keeps review length.
template <class Real>
struct InteractionP {
  MhaP<Real> mha;
  FfnP<Real> ffn;
  LayerNormP<Real> ln1, ln2;

  static InteractionP create(ParamStore<Real>& ps, const std::string& name, int d,
                             int ffn_dim, Rng& rng) {
    InteractionP p;
    p.mha = MhaP<Real>::create(ps, name + ".mha", d, rng);
    p.ffn = FfnP<Real>::create(ps, name + ".ffn", d, ffn_dim, rng);
    p.ln1 = LayerNormP<Real>::create(ps, name + ".ln1", d);
    p.ln2 = LayerNormP<Real>::create(ps, name + ".ln2", d);
    return p;
  }
};

template <class Real>
TeacherRepresentation<Real> interact(Bind<Real>& B, const InteractionP<Real>& p, int h_proj,
                                     const std::vector<std::uint8_t>& item_mask, int er_l,
                                     std::vector<std::uint8_t> review_mask, int source_layer,
                                     const FwdCtx<Real>& ctx) {
  TeacherRepresentation<Real> out;
  out.source_layer = source_layer;
  if (er_l < 0 || B.tape().v(er_l).rows == 0) return out;  // review-less record
  auto& t = B.tape();
  int x = er_l;
  auto a = p.mha.apply(B, p.ln1.apply(B, x), h_proj, ctx.heads,
                       item_mask.empty() ? nullptr : &item_mask, false);
  x = ops::add(t, x, ctx.drop(t, a.out));
  x = ops::add(t, x, ctx.drop(t, p.ffn.apply(B, p.ln2.apply(B, x), ctx.act)));
  out.node = x;
  out.mask = std::move(review_mask);
  return out;
}

// Mean over target steps of KL(student step distribution || teacher step
// distribution). Wrapper over the fused tape op; lengths must already agree.
template <class Real>
int kl_alignment(Tape<Real>& t, int p_student, int p_teacher, bool stop_teacher = false) {
  if (t.v(p_student).rows != t.v(p_teacher).rows)
    throw ValidationError("kl_alignment: step count mismatch");
  return ops::kl_rows(t, p_student, p_teacher, stop_teacher);
}

}  // namespace apdt
