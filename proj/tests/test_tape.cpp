#include <catch2/catch_amalgamated.hpp>

#include "apdt/tape.hpp"

using namespace apdt;
using Catch::Approx;

namespace {

using D = double;

// Random but reproducible fill.
Mat<D> rand_mat(int r, int c, Rng& rng, double scale = 1.0) {
  Mat<D> m(r, c);
  for (auto& x : m.a) x = rng.uniform(-scale, scale);
  return m;
}

// Scalar readout sum(x .* w) with known gradient, so any op's output can be
// reduced to a backward() root.
int readout(Tape<D>& t, int x, const Mat<D>& w) {
  const Mat<D>& X = t.v(x);
  Mat<D> val(1, 1);
  for (size_t i = 0; i < X.a.size(); ++i) val(0, 0) += X.a[i] * w.a[i];
  int out = t.push(std::move(val), t.needs_grad(x));
  t.set_bwd(out, [out, x, w](Tape<D>& tp) {
    double g = tp.g(out)(0, 0);
    Mat<D>& gx = tp.g(x);
    for (size_t i = 0; i < gx.a.size(); ++i) gx.a[i] += g * w.a[i];
  });
  return out;
}

// Central finite differences of a scalar builder over a set of input mats.
// Builder gets the tape plus input node ids and returns the scalar root.
template <class Builder>
void check_gradients(Builder&& build, std::vector<Mat<D>> inputs, double tol = 5e-6) {
  std::vector<int> ids;
  Tape<D> t;
  for (auto& m : inputs) ids.push_back(t.input(m));
  int root = build(t, ids);
  t.backward(root);
  std::vector<Mat<D>> analytic;
  for (int id : ids) analytic.push_back(t.grad_of(id));

  const double eps = 1e-6;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (size_t i = 0; i < inputs[k].a.size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Mat<D>> pert = inputs;
        pert[k].a[i] += delta;
        Tape<D> t2;
        std::vector<int> ids2;
        for (auto& m : pert) ids2.push_back(t2.input(m));
        return t2.v(build(t2, ids2))(0, 0);
      };
      double fd = (eval(eps) - eval(-eps)) / (2 * eps);
      double an = analytic[k].a[i];
      double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      INFO("input " << k << " element " << i << " fd=" << fd << " analytic=" << an);
      REQUIRE(err < tol);
    }
  }
}

}  // namespace

TEST_CASE("matmul forward and gradients", "[tape]") {
  Rng rng(1);
  Mat<D> w = rand_mat(3, 4, rng);
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& in) {
        return readout(t, ops::matmul(t, in[0], in[1]), w);
      },
      {rand_mat(3, 5, rng), rand_mat(5, 4, rng)});

  Tape<D> t;
  int a = t.constant(rand_mat(2, 3, rng));
  int b = t.constant(rand_mat(3, 2, rng));
  int c = ops::matmul(t, a, b);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += t.v(a)(i, k) * t.v(b)(k, j);
      REQUIRE(t.v(c)(i, j) == Approx(s));
    }
}

TEST_CASE("matmul_nt matches transpose", "[tape]") {
  Rng rng(2);
  Mat<D> w = rand_mat(3, 6, rng);
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& in) {
        return readout(t, ops::matmul_nt(t, in[0], in[1]), w);
      },
      {rand_mat(3, 4, rng), rand_mat(6, 4, rng)});
}

TEST_CASE("elementwise ops gradients", "[tape]") {
  Rng rng(3);
  Mat<D> w = rand_mat(3, 4, rng);
  auto in = [&] { return rand_mat(3, 4, rng); };
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::add(t, ids[0], ids[1]), w);
      },
      {in(), in()});
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::scale(t, ids[0], 2.5), w);
      },
      {in()});
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::gelu(t, ids[0]), w);
      },
      {in()});
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::sigmoid(t, ids[0]), w);
      },
      {in()});
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::add_rowvec(t, ids[0], ids[1]), w);
      },
      {in(), rand_mat(1, 4, rng)});
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::scale_by(t, ids[0], ids[1]), w);
      },
      {in(), rand_mat(1, 1, rng)});
}

TEST_CASE("gelu exact values", "[tape]") {
  Tape<D> t;
  Mat<D> x(1, 3);
  x(0, 0) = 0.0;
  x(0, 1) = 1.0;
  x(0, 2) = 2.0;
  int y = ops::gelu(t, t.constant(x));
  REQUIRE(t.v(y)(0, 0) == Approx(0.0).margin(1e-12));
  // x * Phi(x) at x=1: Phi(1) = 0.841344746...
  REQUIRE(t.v(y)(0, 1) == Approx(0.8413447460685429).epsilon(1e-12));
  REQUIRE(t.v(y)(0, 1) < t.v(y)(0, 2));  // monotone on [0, inf)
}

TEST_CASE("relu gradient away from kink", "[tape]") {
  Rng rng(4);
  Mat<D> w = rand_mat(2, 5, rng);
  Mat<D> x = rand_mat(2, 5, rng);
  for (auto& v : x.a)
    if (std::abs(v) < 0.05) v += 0.1;  // keep FD away from the kink
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::relu(t, ids[0]), w);
      },
      {x});
}

TEST_CASE("shape ops gradients", "[tape]") {
  Rng rng(5);
  Mat<D> w53 = rand_mat(5, 3, rng), w24 = rand_mat(2, 4, rng), w32 = rand_mat(3, 2, rng),
         w27 = rand_mat(2, 7, rng);
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::concat_rows(t, ids[0], ids[1]), w53);
      },
      {rand_mat(2, 3, rng), rand_mat(3, 3, rng)});
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::slice_rows(t, ids[0], 1, 3), w24);
      },
      {rand_mat(4, 4, rng)});
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::slice_cols(t, ids[0], 1, 3), w32);
      },
      {rand_mat(3, 5, rng)});
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::concat_cols(t, {ids[0], ids[1], ids[2]}), w27);
      },
      {rand_mat(2, 2, rng), rand_mat(2, 3, rng), rand_mat(2, 2, rng)});
}

TEST_CASE("rowscale and rownorm", "[tape]") {
  Rng rng(6);
  Mat<D> w34 = rand_mat(3, 4, rng), w34b = rand_mat(3, 4, rng);
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::rowscale(t, ids[0], ids[1]), w34);
      },
      {rand_mat(3, 4, rng), rand_mat(3, 1, rng)});

  Mat<D> pos(3, 4);
  for (auto& v : pos.a) v = rng.uniform(0.2, 1.0);
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::rownorm(t, ids[0]), w34b);
      },
      {pos});

  Tape<D> t;
  int n = ops::rownorm(t, t.constant(pos));
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += t.v(n)(i, j);
    REQUIRE(s == Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows: masking, causality, gradients", "[tape]") {
  Rng rng(7);
  Mat<D> logits = rand_mat(4, 4, rng, 2.0);
  std::vector<std::uint8_t> mask{1, 0, 1, 1};

  Tape<D> t;
  int sm = ops::softmax_rows(t, t.constant(logits), &mask, false);
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += t.v(sm)(i, j);
    REQUIRE(s == Approx(1.0).epsilon(1e-9));
    REQUIRE(t.v(sm)(i, 1) == 0.0);  // exactly zero on masked keys
  }

  int cm = ops::softmax_rows(t, t.constant(logits), nullptr, true);
  REQUIRE(t.v(cm)(0, 0) == Approx(1.0));
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) REQUIRE(t.v(cm)(i, j) == 0.0);

  Mat<D> w44 = rand_mat(4, 4, rng);
  check_gradients(
      [&](Tape<D>& t2, const std::vector<int>& ids) {
        return readout(t2, ops::softmax_rows(t2, ids[0], &mask, false), w44);
      },
      {logits});
}

TEST_CASE("layer_norm gradients", "[tape]") {
  Rng rng(8);
  Mat<D> w36 = rand_mat(3, 6, rng);
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& ids) {
        return readout(t, ops::layer_norm(t, ids[0], ids[1], ids[2]), w36);
      },
      {rand_mat(3, 6, rng), rand_mat(1, 6, rng), rand_mat(1, 6, rng)}, 2e-5);
}

TEST_CASE("dropout semantics", "[tape]") {
  Rng rng(9);
  Mat<D> x = rand_mat(4, 4, rng);
  Tape<D> t;
  int in = t.input(x);
  REQUIRE(ops::dropout(t, in, 0.5, &rng, false) == in);  // eval mode: identity
  REQUIRE(ops::dropout(t, in, 0.0, &rng, true) == in);
  int d = ops::dropout(t, in, 0.5, &rng, true);
  const Mat<D>& Dv = t.v(d);
  for (size_t i = 0; i < Dv.a.size(); ++i) {
    bool zero = Dv.a[i] == 0.0;
    bool scaled = std::abs(Dv.a[i] - 2.0 * x.a[i]) < 1e-12;
    REQUIRE((zero || scaled));
  }
}

TEST_CASE("gather_rows and copy_scatter", "[tape]") {
  Rng rng(10);
  std::vector<int> ids{2, 0, 2, 1};
  Mat<D> w43 = rand_mat(4, 3, rng);
  check_gradients(
      [&](Tape<D>& t, const std::vector<int>& in) {
        return readout(t, ops::gather_rows(t, in[0], ids), w43);
      },
      {rand_mat(3, 3, rng)});

  // scatter: duplicate source tokens aggregate their attention mass
  Tape<D> t;
  Mat<D> attn(1, 3);
  attn(0, 0) = 0.2;
  attn(0, 1) = 0.3;
  attn(0, 2) = 0.5;
  std::vector<int> src{4, 4, 7};
  int cs = ops::copy_scatter(t, t.constant(attn), src, 10);
  REQUIRE(t.v(cs)(0, 4) == Approx(0.5));
  REQUIRE(t.v(cs)(0, 7) == Approx(0.5));
  double total = 0;
  for (int j = 0; j < 10; ++j) total += t.v(cs)(0, j);
  REQUIRE(total == Approx(1.0));

  std::vector<int> src2{1, 3, 1, 0};
  Mat<D> w25 = rand_mat(2, 5, rng);
  check_gradients(
      [&](Tape<D>& t2, const std::vector<int>& in) {
        return readout(t2, ops::copy_scatter(t2, in[0], src2, 5), w25);
      },
      {rand_mat(2, 4, rng)});
}

namespace {
Mat<D> rand_dist(int rows, int cols, Rng& rng) {
  Mat<D> m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    double z = 0;
    for (int j = 0; j < cols; ++j) {
      m(i, j) = rng.uniform(0.05, 1.0);
      z += m(i, j);
    }
    for (int j = 0; j < cols; ++j) m(i, j) /= z;
  }
  return m;
}
}  // namespace

TEST_CASE("nll_smoothed values and gradients", "[tape]") {
  Rng rng(11);
  const int V = 6;
  std::vector<std::uint8_t> legal(V, 1);
  legal[0] = 0;  // e.g. PAD banned from the smoothing support

  // uniform predictions over V -> log V, for any smoothing
  Tape<D> t;
  Mat<D> uni = Mat<D>::full(3, V, 1.0 / V);
  std::vector<int> tg{1, 2, 3};
  std::vector<D> w1{1, 1, 1};
  int l = ops::nll_smoothed(t, t.constant(uni), tg, legal, 0.1, w1);
  REQUIRE(t.v(l)(0, 0) == Approx(std::log(double(V))).epsilon(1e-12));

  // perfect one-hot predictions with smoothing 0 -> 0 (floored at eps)
  Mat<D> hot(2, V);
  hot(0, 1) = 1.0;
  hot(1, 4) = 1.0;
  std::vector<int> tg2{1, 4};
  std::vector<D> w2{1, 1};
  int l2 = ops::nll_smoothed(t, t.constant(hot), tg2, legal, 0.0, w2);
  REQUIRE(t.v(l2)(0, 0) == Approx(0.0).margin(1e-12));

  // weighted: S=2, w=(0.4,0.7), p(target)=(0.5,0.25)
  Mat<D> p(2, V);
  p(0, 1) = 0.5;
  p(0, 2) = 0.5;
  p(1, 4) = 0.25;
  p(1, 5) = 0.75;
  std::vector<D> w3{0.4, 0.7};
  int l3 = ops::nll_smoothed(t, t.constant(p), tg2, legal, 0.0, w3);
  double expect = (0.4 * std::log(2.0) + 0.7 * std::log(4.0)) / 1.1;
  REQUIRE(t.v(l3)(0, 0) == Approx(expect).epsilon(1e-12));

  check_gradients(
      [&](Tape<D>& t2, const std::vector<int>& in) {
        return ops::nll_smoothed(t2, in[0], tg, legal, 0.1, w1);
      },
      {rand_dist(3, V, rng)});
}

TEST_CASE("kl_rows identity, floor example, positivity, gradients", "[tape]") {
  Rng rng(12);
  Mat<D> p = rand_dist(4, 8, rng);
  Tape<D> t;
  int a = t.constant(p);
  int same = ops::kl_rows(t, a, t.constant(p));
  REQUIRE(t.v(same)(0, 0) == Approx(0.0).margin(1e-15));

  // p=(1,0) floored vs (0.5,0.5): ~ log 2
  Mat<D> ph(1, 2);
  ph(0, 0) = 1.0;
  Mat<D> q = Mat<D>::full(1, 2, 0.5);
  int kl = ops::kl_rows(t, t.constant(ph), t.constant(q));
  REQUIRE(t.v(kl)(0, 0) == Approx(std::log(2.0)).margin(1e-6));

  // non-negative for arbitrary (even sparse) distributions
  for (int trial = 0; trial < 200; ++trial) {
    Mat<D> ps = rand_dist(2, 6, rng);
    Mat<D> pt = rand_dist(2, 6, rng);
    if (trial % 3 == 0) {  // sprinkle exact zeros
      ps(0, trial % 6) = 0.0;
      pt(1, (trial + 2) % 6) = 0.0;
    }
    Tape<D> t2;
    int v = ops::kl_rows(t2, t2.constant(ps), t2.constant(pt));
    REQUIRE(t2.v(v)(0, 0) >= -1e-12);
  }

  check_gradients(
      [&](Tape<D>& t2, const std::vector<int>& in) {
        return ops::kl_rows(t2, in[0], in[1]);
      },
      {rand_dist(3, 6, rng), rand_dist(3, 6, rng)});

  // stop_teacher blocks the teacher-side gradient
  Tape<D> t3;
  int s = t3.input(rand_dist(2, 5, rng));
  int r = t3.input(rand_dist(2, 5, rng));
  int v3 = ops::kl_rows(t3, s, r, /*stop_teacher=*/true);
  t3.backward(v3);
  REQUIRE(frob_norm_sq(t3.grad_of(s)) > 0.0);
  REQUIRE(frob_norm_sq(t3.grad_of(r)) == 0.0);
}
