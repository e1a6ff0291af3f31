#include <catch2/catch_amalgamated.hpp>

#include "apdt/encoder.hpp"
#include "apdt/oracles.hpp"

using namespace apdt;
using Catch::Approx;
using D = double;

namespace {

struct EmbFixture {
  ParamStore<D> ps;
  EmbeddingTables<D> emb;
  EmbFixture(int vocab = 8, int d = 2, int pos_max = 8) {
    Rng rng(3);
    emb = EmbeddingTables<D>::create(ps, vocab, d, pos_max, 6, 6, false, rng);
  }
  Mat<D>& word() { return ps.value(emb.word); }
  Mat<D>& pos() { return ps.value(emb.pos); }
  Mat<D>& aseg() { return ps.value(emb.attr_seg); }
  Mat<D>& rseg() { return ps.value(emb.rev_seg); }
};

}  // namespace

TEST_CASE("embed_title: zero word table leaves position rows", "[encoder]") {
  EmbFixture f;
  f.word().zero();
  Tape<D> t;
  Bind<D> B(t, f.ps);
  int x = embed_title(B, f.emb, {4, 5, 6});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) REQUIRE(t.v(x)(i, j) == Approx(f.pos()(i, j)));
}

TEST_CASE("embed_title: exact hand sums and permutation effect", "[encoder]") {
  EmbFixture f;
  // hand-set tables, d_model = 2
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 2; ++j) f.word()(i, j) = 10.0 * i + j;
  for (int p = 0; p < 8; ++p)
    for (int j = 0; j < 2; ++j) f.pos()(p, j) = 0.1 * p + 0.01 * j;

  Tape<D> t;
  Bind<D> B(t, f.ps);
  int x = embed_title(B, f.emb, {5, 4});
  REQUIRE(t.v(x)(0, 0) == Approx(50.0 + 0.0));
  REQUIRE(t.v(x)(0, 1) == Approx(51.0 + 0.01));
  REQUIRE(t.v(x)(1, 0) == Approx(40.0 + 0.1));
  REQUIRE(t.v(x)(1, 1) == Approx(41.0 + 0.11));

  // permuting two tokens changes exactly the WE components of those rows
  int y = embed_title(B, f.emb, {4, 5});
  REQUIRE(t.v(y)(0, 0) - t.v(x)(0, 0) == Approx(f.word()(4, 0) - f.word()(5, 0)));
  REQUIRE(t.v(y)(1, 0) - t.v(x)(1, 0) == Approx(f.word()(5, 0) - f.word()(4, 0)));

  // longer than the position table -> error
  std::vector<int> too_long(9, 4);
  REQUIRE_THROWS_AS(embed_title(B, f.emb, too_long), ValidationError);
}

TEST_CASE("embed_attributes: pair members share AE, pairs differ by AE delta", "[encoder]") {
  EmbFixture f;
  Tape<D> t;
  Bind<D> B(t, f.ps);
  // same word in both pairs, positions 0/1 vs 2/3
  int x = embed_attributes(B, f.emb, {4, 4, 4, 4}, {1, 1, 2, 2});
  // rows 0,1: same segment -> difference is purely positional
  for (int j = 0; j < 2; ++j)
    REQUIRE(t.v(x)(1, j) - t.v(x)(0, j) == Approx(f.pos()(1, j) - f.pos()(0, j)));
  // same word+position across pairs differs exactly by AE[1]-AE[2]
  Tape<D> t2;
  Bind<D> B2(t2, f.ps);
  int a = embed_attributes(B2, f.emb, {4}, {1});
  int b = embed_attributes(B2, f.emb, {4}, {2});
  for (int j = 0; j < 2; ++j)
    REQUIRE(t2.v(a)(0, j) - t2.v(b)(0, j) == Approx(f.aseg()(1, j) - f.aseg()(2, j)));
}

TEST_CASE("embed_attributes and embed_reviews: exact fixture sums", "[encoder]") {
  EmbFixture f;
  Tape<D> t;
  Bind<D> B(t, f.ps);
  int xa = embed_attributes(B, f.emb, {6, 7}, {1, 2});
  int xr = embed_reviews(B, f.emb, {6, 7}, {1, 2});
  for (int j = 0; j < 2; ++j) {
    REQUIRE(t.v(xa)(0, j) == Approx(f.word()(6, j) + f.pos()(0, j) + f.aseg()(1, j)));
    REQUIRE(t.v(xa)(1, j) == Approx(f.word()(7, j) + f.pos()(1, j) + f.aseg()(2, j)));
    REQUIRE(t.v(xr)(0, j) == Approx(f.word()(6, j) + f.pos()(0, j) + f.rseg()(1, j)));
    REQUIRE(t.v(xr)(1, j) == Approx(f.word()(7, j) + f.pos()(1, j) + f.rseg()(2, j)));
  }
  // segment 0 (padding) contributes zero
  int x0 = embed_attributes(B, f.emb, {6}, {0});
  for (int j = 0; j < 2; ++j) REQUIRE(t.v(x0)(0, j) == Approx(f.word()(6, j) + f.pos()(0, j)));
}

TEST_CASE("encoder stack: depth, masking, determinism, finiteness", "[encoder]") {
  Rng rng(11);
  ParamStore<D> ps;
  auto stack = EncoderStackP<D>::create(ps, "enc", 3, 8, 16, rng);

  FwdCtx<D> ctx;
  ctx.heads = 2;

  Mat<D> x0(5, 8);
  init_normal(x0, rng, 1.0);

  Tape<D> t;
  Bind<D> B(t, ps);
  auto out = encode(B, stack, t.input(x0), std::vector<std::uint8_t>(5, 1), Source::title, ctx);
  REQUIRE(out.depth() == 3);
  for (int l : out.layers) REQUIRE(t.v(l).all_finite());

  // depth=1 stack gives a single layer output
  auto stack1 = EncoderStackP<D>::create(ps, "enc1", 1, 8, 16, rng);
  Tape<D> t1;
  Bind<D> B1(t1, ps);
  auto out1 =
      encode(B1, stack1, t1.input(x0), std::vector<std::uint8_t>(5, 1), Source::title, ctx);
  REQUIRE(out1.depth() == 1);

  // with dropout disabled the pass is deterministic
  Tape<D> t2;
  Bind<D> B2(t2, ps);
  auto out2 =
      encode(B2, stack, t2.input(x0), std::vector<std::uint8_t>(5, 1), Source::title, ctx);
  for (int l = 0; l < 3; ++l)
    for (size_t i = 0; i < t.v(out.layers[l]).a.size(); ++i)
      REQUIRE(t.v(out.layers[l]).a[i] == t2.v(out2.layers[l]).a[i]);

  // masked key positions get exactly zero attention and never influence others
  std::vector<std::uint8_t> mask{1, 1, 1, 0, 0};
  Mat<D> x0b = x0;
  x0b(3, 0) += 100.0;  // perturb only masked rows
  x0b(4, 2) -= 50.0;
  Tape<D> tm1, tm2;
  Bind<D> Bm1(tm1, ps), Bm2(tm2, ps);
  auto m1 = encode(Bm1, stack, tm1.input(x0), mask, Source::title, ctx);
  auto m2 = encode(Bm2, stack, tm2.input(x0b), mask, Source::title, ctx);
  for (int l = 0; l < 3; ++l)
    for (int i = 0; i < 3; ++i)  // unmasked rows must be identical
      for (int j = 0; j < 8; ++j)
        REQUIRE(tm1.v(m1.layers[l])(i, j) == Approx(tm2.v(m2.layers[l])(i, j)).margin(1e-12));
}

TEST_CASE("single-head attention matches hand softmax(QK^T/sqrt(dk))", "[encoder]") {
  // d_model = 4, single head, identity projections, len = 2
  ParamStore<D> ps;
  Rng rng(5);
  auto mha = MhaP<D>::create(ps, "mha", 4, rng);
  for (int pid : {mha.q.w, mha.k.w, mha.v.w, mha.o.w}) {
    ps.value(pid).zero();
    for (int i = 0; i < 4; ++i) ps.value(pid)(i, i) = 1.0;
  }

  Mat<D> x(2, 4);
  std::vector<std::vector<double>> xr = {{0.5, -1.0, 0.25, 2.0}, {1.5, 0.5, -0.75, 0.0}};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) x(i, j) = xr[i][j];

  Tape<D> t;
  Bind<D> B(t, ps);
  int xin = t.input(x);
  auto out = mha.apply(B, xin, xin, 1, nullptr, false);
  auto hand = oracle::attention_by_hand(xr, xr);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      REQUIRE(t.v(out.attn_avg)(i, j) == Approx(hand[i][j]).epsilon(1e-12));

  // attention rows sum to one
  for (int i = 0; i < 2; ++i)
    REQUIRE(t.v(out.attn_avg)(i, 0) + t.v(out.attn_avg)(i, 1) == Approx(1.0));
}

TEST_CASE("encoder gradient check: analytic vs central differences", "[encoder]") {
  // 2 layers, d_model = 8, 2 heads, length-3 input, scalar readout
  Rng rng(21);
  ParamStore<D> ps;
  auto stack = EncoderStackP<D>::create(ps, "enc", 2, 8, 12, rng);
  FwdCtx<D> ctx;
  ctx.heads = 2;
  Mat<D> x0(3, 8);
  init_normal(x0, rng, 0.7);
  Mat<D> w(3, 8);
  init_normal(w, rng, 1.0);

  auto loss = [&]() {
    Tape<D> t;
    Bind<D> B(t, ps);
    auto out = encode(B, stack, t.constant(x0), std::vector<std::uint8_t>(3, 1),
                      Source::title, ctx);
    double s = 0;
    const Mat<D>& top = t.v(out.top());
    for (size_t i = 0; i < top.a.size(); ++i) s += top.a[i] * w.a[i];
    return s;
  };

  // analytic pass
  Tape<D> t;
  Bind<D> B(t, ps);
  auto out = encode(B, stack, t.constant(x0), std::vector<std::uint8_t>(3, 1), Source::title,
                    ctx);
  int top = out.top();
  Mat<D> val(1, 1);
  const Mat<D>& topv = t.v(top);
  for (size_t i = 0; i < topv.a.size(); ++i) val(0, 0) += topv.a[i] * w.a[i];
  int root = t.push(std::move(val), true);
  t.set_bwd(root, [root, top, w](Tape<D>& tp) {
    double g = tp.g(root)(0, 0);
    Mat<D>& gx = tp.g(top);
    for (size_t i = 0; i < gx.a.size(); ++i) gx.a[i] += g * w.a[i];
  });
  ps.zero_grads();
  t.backward(root);

  std::vector<double*> scalars;
  std::vector<double> analytic;
  for (int pid = 0; pid < ps.count(); ++pid) {
    auto& e = ps.entry(pid);
    for (size_t i = 0; i < e.value.a.size(); ++i) {
      scalars.push_back(&e.value.a[i]);
      analytic.push_back(e.grad.a[i]);
    }
  }
  auto fd = oracle::finite_diff_grad(loss, scalars, 1e-5);
  double max_rel = 0;
  for (size_t i = 0; i < fd.size(); ++i) {
    double rel = std::abs(fd[i] - analytic[i]) /
                 std::max({1e-3, std::abs(fd[i]), std::abs(analytic[i])});
    max_rel = std::max(max_rel, rel);
  }
  REQUIRE(max_rel < 1e-4);
}

TEST_CASE("sinusoidal positions are a config alternative", "[encoder]") {
  ParamStore<D> ps;
  Rng rng(2);
  auto emb = EmbeddingTables<D>::create(ps, 8, 4, 8, 4, 4, true, rng);
  Tape<D> t;
  Bind<D> B(t, ps);
  int x = emb.positions(B, 3);
  REQUIRE(t.v(x)(0, 0) == Approx(0.0).margin(1e-15));  // sin(0)
  REQUIRE(t.v(x)(0, 1) == Approx(1.0));                // cos(0)
  REQUIRE(t.v(x)(1, 0) == Approx(std::sin(1.0)));
}
