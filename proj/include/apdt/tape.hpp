#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "apdt/mat.hpp"

namespace apdt {

// Reverse-mode tape over Mat<Real>. One tape per forward/backward pass; nodes
// are appended in evaluation order and replayed in reverse. Parameters are
// bound as external leaves so their gradients accumulate straight into the
// owning store without copies.
template <class Real>
class Tape {
 public:
  const Mat<Real>& v(int id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.val;
  }

  // Gradient buffer, allocated on first touch.
  Mat<Real>& g(int id) {
    if (grads_[id].empty()) grads_[id] = Mat<Real>::zeros(v(id).rows, v(id).cols);
    return grads_[id];
  }

  bool has_grad(int id) const { return !grads_[id].empty(); }
  bool needs_grad(int id) const { return nodes_[id].ng; }
  size_t num_nodes() const { return nodes_.size(); }

  int constant(Mat<Real> m) { return push(std::move(m), false); }
  int input(Mat<Real> m) { return push(std::move(m), true); }

  int param(const Mat<Real>* value, Mat<Real>* gsink) {
    Node n;
    n.ext = value;
    n.gsink = gsink;
    n.ng = true;
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return int(nodes_.size()) - 1;
  }

  // Gradient of a node after backward(); zeros if it never received one.
  Mat<Real> grad_of(int id) {
    if (grads_[id].empty()) return Mat<Real>::zeros(v(id).rows, v(id).cols);
    return grads_[id];
  }

  void backward(int root) {
    const Mat<Real>& r = v(root);
    if (r.rows != 1 || r.cols != 1) throw NumericalError("backward root must be scalar");
    g(root)(0, 0) = Real(1);
    for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.ng && n.bwd && !grads_[id].empty()) n.bwd(*this);
    }
    for (size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.gsink && !grads_[id].empty()) axpy(Real(1), grads_[id], *n.gsink);
    }
  }

  int push(Mat<Real> val, bool ng) {
    Node n;
    n.val = std::move(val);
    n.ng = ng;
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return int(nodes_.size()) - 1;
  }

  // Ops push their value first, then attach a backward that knows the output id.
  template <class F>
  void set_bwd(int id, F&& fn) {
    if (nodes_[id].ng) nodes_[id].bwd = std::forward<F>(fn);
  }

 private:
  struct Node {
    Mat<Real> val;
    const Mat<Real>* ext = nullptr;
    Mat<Real>* gsink = nullptr;
    std::function<void(Tape&)> bwd;
    bool ng = false;
  };
  std::vector<Node> nodes_;
  std::vector<Mat<Real>> grads_;
};

namespace ops {

template <class Real>
constexpr Real prob_floor() { return Real(1e-9); }

// C = A * B
template <class Real>
int matmul(Tape<Real>& t, int a, int b) {
  int out = t.push(matmul_nn(t.v(a), t.v(b)), t.needs_grad(a) || t.needs_grad(b));
  t.set_bwd(out, [out, a, b](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    if (tp.needs_grad(a)) gemm_nt_acc(G, tp.v(b), tp.g(a));
    if (tp.needs_grad(b)) gemm_tn_acc(tp.v(a), G, tp.g(b));
  });
  return out;
}

// C = A * B^T
template <class Real>
int matmul_nt(Tape<Real>& t, int a, int b) {
  const auto &A = t.v(a), &B = t.v(b);
  Mat<Real> c(A.rows, B.rows);
  gemm_nt_acc(A, B, c);
  int out = t.push(std::move(c), t.needs_grad(a) || t.needs_grad(b));
  t.set_bwd(out, [out, a, b](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    if (tp.needs_grad(a)) gemm_nn_acc(G, tp.v(b), tp.g(a));
    if (tp.needs_grad(b)) gemm_tn_acc(G, tp.v(a), tp.g(b));
  });
  return out;
}

template <class Real>
int add(Tape<Real>& t, int a, int b) {
  Mat<Real> c = t.v(a);
  axpy(Real(1), t.v(b), c);
  int out = t.push(std::move(c), t.needs_grad(a) || t.needs_grad(b));
  t.set_bwd(out, [out, a, b](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    if (tp.needs_grad(a)) axpy(Real(1), G, tp.g(a));
    if (tp.needs_grad(b)) axpy(Real(1), G, tp.g(b));
  });
  return out;
}

// rows of `a` plus the broadcast row vector `b` [1, c]
template <class Real>
int add_rowvec(Tape<Real>& t, int a, int b) {
  const auto &A = t.v(a), &B = t.v(b);
  Mat<Real> c = A;
  for (int i = 0; i < c.rows; ++i)
    for (int j = 0; j < c.cols; ++j) c(i, j) += B(0, j);
  int out = t.push(std::move(c), t.needs_grad(a) || t.needs_grad(b));
  t.set_bwd(out, [out, a, b](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    if (tp.needs_grad(a)) axpy(Real(1), G, tp.g(a));
    if (tp.needs_grad(b)) {
      Mat<Real>& gb = tp.g(b);
      for (int i = 0; i < G.rows; ++i)
        for (int j = 0; j < G.cols; ++j) gb(0, j) += G(i, j);
    }
  });
  return out;
}

template <class Real>
int scale(Tape<Real>& t, int a, Real c) {
  Mat<Real> m = t.v(a);
  for (auto& x : m.a) x *= c;
  int out = t.push(std::move(m), t.needs_grad(a));
  t.set_bwd(out, [out, a, c](Tape<Real>& tp) {
    if (tp.needs_grad(a)) axpy(c, tp.g(out), tp.g(a));
  });
  return out;
}

// out = s * M where s is a 1x1 node
template <class Real>
int scale_by(Tape<Real>& t, int a, int s) {
  Real sv = t.v(s)(0, 0);
  Mat<Real> m = t.v(a);
  for (auto& x : m.a) x *= sv;
  int out = t.push(std::move(m), t.needs_grad(a) || t.needs_grad(s));
  t.set_bwd(out, [out, a, s, sv](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    if (tp.needs_grad(a)) axpy(sv, G, tp.g(a));
    if (tp.needs_grad(s)) {
      const Mat<Real>& A = tp.v(a);
      Real acc = 0;
      for (size_t i = 0; i < A.a.size(); ++i) acc += A.a[i] * G.a[i];
      tp.g(s)(0, 0) += acc;
    }
  });
  return out;
}

template <class Real>
int concat_rows(Tape<Real>& t, int a, int b) {
  const auto &A = t.v(a), &B = t.v(b);
  const int ra = A.rows;  // hoisted: push() below may reallocate node storage
  Mat<Real> c(A.rows + B.rows, A.cols);
  std::copy(A.a.begin(), A.a.end(), c.a.begin());
  std::copy(B.a.begin(), B.a.end(), c.a.begin() + A.a.size());
  int out = t.push(std::move(c), t.needs_grad(a) || t.needs_grad(b));
  t.set_bwd(out, [out, a, b, ra](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    if (tp.needs_grad(a)) {
      Mat<Real>& ga = tp.g(a);
      for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += G.a[i];
    }
    if (tp.needs_grad(b)) {
      Mat<Real>& gb = tp.g(b);
      size_t off = size_t(ra) * G.cols;
      for (size_t i = 0; i < gb.a.size(); ++i) gb.a[i] += G.a[off + i];
    }
  });
  return out;
}

template <class Real>
int slice_rows(Tape<Real>& t, int a, int r0, int r1) {
  const auto& A = t.v(a);
  Mat<Real> c(r1 - r0, A.cols);
  std::copy(A.row(r0), A.row(r0) + c.a.size(), c.a.begin());
  int out = t.push(std::move(c), t.needs_grad(a));
  t.set_bwd(out, [out, a, r0](Tape<Real>& tp) {
    if (!tp.needs_grad(a)) return;
    const Mat<Real>& G = tp.g(out);
    Mat<Real>& ga = tp.g(a);
    Real* dst = ga.row(r0);
    for (size_t i = 0; i < G.a.size(); ++i) dst[i] += G.a[i];
  });
  return out;
}

template <class Real>
int slice_cols(Tape<Real>& t, int a, int c0, int c1) {
  const auto& A = t.v(a);
  Mat<Real> c(A.rows, c1 - c0);
  for (int i = 0; i < A.rows; ++i)
    for (int j = c0; j < c1; ++j) c(i, j - c0) = A(i, j);
  int out = t.push(std::move(c), t.needs_grad(a));
  t.set_bwd(out, [out, a, c0](Tape<Real>& tp) {
    if (!tp.needs_grad(a)) return;
    const Mat<Real>& G = tp.g(out);
    Mat<Real>& ga = tp.g(a);
    for (int i = 0; i < G.rows; ++i)
      for (int j = 0; j < G.cols; ++j) ga(i, c0 + j) += G(i, j);
  });
  return out;
}

template <class Real>
int concat_cols(Tape<Real>& t, const std::vector<int>& parts) {
  int rows = t.v(parts[0]).rows, cols = 0;
  bool ng = false;
  for (int p : parts) {
    cols += t.v(p).cols;
    ng = ng || t.needs_grad(p);
  }
  Mat<Real> c(rows, cols);
  int off = 0;
  for (int p : parts) {
    const auto& P = t.v(p);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < P.cols; ++j) c(i, off + j) = P(i, j);
    off += P.cols;
  }
  int out = t.push(std::move(c), ng);
  t.set_bwd(out, [out, parts](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    int off2 = 0;
    for (int p : parts) {
      const auto& P = tp.v(p);
      if (tp.needs_grad(p)) {
        Mat<Real>& gp = tp.g(p);
        for (int i = 0; i < G.rows; ++i)
          for (int j = 0; j < P.cols; ++j) gp(i, j) += G(i, off2 + j);
      }
      off2 += P.cols;
    }
  });
  return out;
}

// out[i, :] = w[i, 0] * m[i, :]
template <class Real>
int rowscale(Tape<Real>& t, int m, int w) {
  const auto &M = t.v(m), &W = t.v(w);
  Mat<Real> c = M;
  for (int i = 0; i < c.rows; ++i) {
    Real wi = W(i, 0);
    for (int j = 0; j < c.cols; ++j) c(i, j) *= wi;
  }
  int out = t.push(std::move(c), t.needs_grad(m) || t.needs_grad(w));
  t.set_bwd(out, [out, m, w](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    const auto &M2 = tp.v(m), &W2 = tp.v(w);
    if (tp.needs_grad(m)) {
      Mat<Real>& gm = tp.g(m);
      for (int i = 0; i < G.rows; ++i) {
        Real wi = W2(i, 0);
        for (int j = 0; j < G.cols; ++j) gm(i, j) += wi * G(i, j);
      }
    }
    if (tp.needs_grad(w)) {
      Mat<Real>& gw = tp.g(w);
      for (int i = 0; i < G.rows; ++i) {
        Real acc = 0;
        for (int j = 0; j < G.cols; ++j) acc += M2(i, j) * G(i, j);
        gw(i, 0) += acc;
      }
    }
  });
  return out;
}

// each row divided by its sum (row sums must be positive)
template <class Real>
int rownorm(Tape<Real>& t, int a) {
  const auto& A = t.v(a);
  Mat<Real> c = A;
  std::vector<Real> z(A.rows);
  for (int i = 0; i < A.rows; ++i) {
    Real s = 0;
    for (int j = 0; j < A.cols; ++j) s += A(i, j);
    z[i] = s;
    if (!(s > Real(0))) throw NumericalError("rownorm: non-positive row sum");
    for (int j = 0; j < A.cols; ++j) c(i, j) /= s;
  }
  int out = t.push(std::move(c), t.needs_grad(a));
  t.set_bwd(out, [out, a, z](Tape<Real>& tp) {
    if (!tp.needs_grad(a)) return;
    const Mat<Real>& G = tp.g(out);
    const Mat<Real>& O = tp.v(out);
    Mat<Real>& ga = tp.g(a);
    for (int i = 0; i < G.rows; ++i) {
      Real dot = 0;
      for (int j = 0; j < G.cols; ++j) dot += G(i, j) * O(i, j);
      for (int j = 0; j < G.cols; ++j) ga(i, j) += (G(i, j) - dot) / z[i];
    }
  });
  return out;
}

// Row-wise softmax. key_mask (when given) has one entry per column, 1 = valid;
// causal additionally restricts row i to columns <= i. Masked columns come out
// exactly zero. Every row must keep at least one valid column.
template <class Real>
int softmax_rows(Tape<Real>& t, int a, const std::vector<std::uint8_t>* key_mask = nullptr,
                 bool causal = false) {
  const auto& A = t.v(a);
  Mat<Real> c(A.rows, A.cols);
  for (int i = 0; i < A.rows; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    int valid = 0;
    for (int j = 0; j < A.cols; ++j) {
      bool ok = (!key_mask || (*key_mask)[j]) && (!causal || j <= i);
      if (ok) {
        ++valid;
        mx = std::max(mx, A(i, j));
      }
    }
    if (valid == 0) throw NumericalError("softmax_rows: fully masked row");
    Real z = 0;
    for (int j = 0; j < A.cols; ++j) {
      bool ok = (!key_mask || (*key_mask)[j]) && (!causal || j <= i);
      Real e = ok ? std::exp(A(i, j) - mx) : Real(0);
      c(i, j) = e;
      z += e;
    }
    for (int j = 0; j < A.cols; ++j) c(i, j) /= z;
  }
  int out = t.push(std::move(c), t.needs_grad(a));
  t.set_bwd(out, [out, a](Tape<Real>& tp) {
    if (!tp.needs_grad(a)) return;
    const Mat<Real>& G = tp.g(out);
    const Mat<Real>& O = tp.v(out);
    Mat<Real>& ga = tp.g(a);
    for (int i = 0; i < G.rows; ++i) {
      Real dot = 0;
      for (int j = 0; j < G.cols; ++j) dot += G(i, j) * O(i, j);
      for (int j = 0; j < G.cols; ++j) ga(i, j) += O(i, j) * (G(i, j) - dot);
    }
  });
  return out;
}

// Row-wise layer norm with learned gain/bias nodes of shape [1, d].
template <class Real>
int layer_norm(Tape<Real>& t, int x, int gamma, int beta, Real eps = Real(1e-5)) {
  const auto &X = t.v(x), &Gm = t.v(gamma), &Bt = t.v(beta);
  const int d = X.cols;
  Mat<Real> xhat(X.rows, d), y(X.rows, d);
  std::vector<Real> istd(X.rows);
  for (int i = 0; i < X.rows; ++i) {
    Real mu = 0;
    for (int j = 0; j < d; ++j) mu += X(i, j);
    mu /= d;
    Real var = 0;
    for (int j = 0; j < d; ++j) {
      Real dv = X(i, j) - mu;
      var += dv * dv;
    }
    var /= d;
    Real is = Real(1) / std::sqrt(var + eps);
    istd[i] = is;
    for (int j = 0; j < d; ++j) {
      xhat(i, j) = (X(i, j) - mu) * is;
      y(i, j) = Gm(0, j) * xhat(i, j) + Bt(0, j);
    }
  }
  bool ng = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
  int out = t.push(std::move(y), ng);
  t.set_bwd(out, [out, x, gamma, beta, xhat, istd](Tape<Real>& tp) {
    const Mat<Real>& G = tp.g(out);
    const Mat<Real>& Gm2 = tp.v(gamma);
    const int d = G.cols;
    if (tp.needs_grad(gamma) || tp.needs_grad(beta)) {
      Mat<Real>& gg = tp.g(gamma);
      Mat<Real>& gb = tp.g(beta);
      for (int i = 0; i < G.rows; ++i)
        for (int j = 0; j < d; ++j) {
          gg(0, j) += G(i, j) * xhat(i, j);
          gb(0, j) += G(i, j);
        }
    }
    if (tp.needs_grad(x)) {
      Mat<Real>& gx = tp.g(x);
      for (int i = 0; i < G.rows; ++i) {
        Real mh = 0, mhx = 0;
        for (int j = 0; j < d; ++j) {
          Real h = G(i, j) * Gm2(0, j);
          mh += h;
          mhx += h * xhat(i, j);
        }
        mh /= d;
        mhx /= d;
        for (int j = 0; j < d; ++j) {
          Real h = G(i, j) * Gm2(0, j);
          gx(i, j) += (h - mh - xhat(i, j) * mhx) * istd[i];
        }
      }
    }
  });
  return out;
}

template <class Real>
Real gelu_scalar(Real x) {
  return x * Real(0.5) * std::erfc(-x * Real(0.7071067811865476));
}

// exact GELU, x * Phi(x)
template <class Real>
int gelu(Tape<Real>& t, int a) {
  Mat<Real> c = t.v(a);
  for (auto& x : c.a) x = gelu_scalar(x);
  int out = t.push(std::move(c), t.needs_grad(a));
  t.set_bwd(out, [out, a](Tape<Real>& tp) {
    if (!tp.needs_grad(a)) return;
    const Mat<Real>& G = tp.g(out);
    const Mat<Real>& A = tp.v(a);
    Mat<Real>& ga = tp.g(a);
    constexpr Real inv_sqrt2 = Real(0.7071067811865476);
    constexpr Real inv_sqrt2pi = Real(0.3989422804014327);
    for (size_t i = 0; i < A.a.size(); ++i) {
      Real x = A.a[i];
      Real phi = Real(0.5) * std::erfc(-x * inv_sqrt2);
      Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * x * x);
      ga.a[i] += G.a[i] * (phi + x * pdf);
    }
  });
  return out;
}

template <class Real>
int relu(Tape<Real>& t, int a) {
  Mat<Real> c = t.v(a);
  for (auto& x : c.a) x = x > Real(0) ? x : Real(0);
  int out = t.push(std::move(c), t.needs_grad(a));
  t.set_bwd(out, [out, a](Tape<Real>& tp) {
    if (!tp.needs_grad(a)) return;
    const Mat<Real>& G = tp.g(out);
    const Mat<Real>& A = tp.v(a);
    Mat<Real>& ga = tp.g(a);
    for (size_t i = 0; i < A.a.size(); ++i)
      if (A.a[i] > Real(0)) ga.a[i] += G.a[i];
  });
  return out;
}

template <class Real>
int sigmoid(Tape<Real>& t, int a) {
  Mat<Real> c = t.v(a);
  for (auto& x : c.a) x = Real(1) / (Real(1) + std::exp(-x));
  int out = t.push(std::move(c), t.needs_grad(a));
  t.set_bwd(out, [out, a](Tape<Real>& tp) {
    if (!tp.needs_grad(a)) return;
    const Mat<Real>& G = tp.g(out);
    const Mat<Real>& O = tp.v(out);
    Mat<Real>& ga = tp.g(a);
    for (size_t i = 0; i < O.a.size(); ++i) ga.a[i] += G.a[i] * O.a[i] * (Real(1) - O.a[i]);
  });
  return out;
}

// Inverted dropout; identity when not training or rate == 0.
template <class Real>
int dropout(Tape<Real>& t, int a, Real rate, Rng* rng, bool train) {
  if (!train || rate <= Real(0)) return a;
  const auto& A = t.v(a);
  std::vector<std::uint8_t> keep(A.a.size());
  Real inv = Real(1) / (Real(1) - rate);
  Mat<Real> c = A;
  for (size_t i = 0; i < c.a.size(); ++i) {
    keep[i] = rng->real() >= double(rate) ? 1 : 0;
    c.a[i] = keep[i] ? c.a[i] * inv : Real(0);
  }
  int out = t.push(std::move(c), t.needs_grad(a));
  t.set_bwd(out, [out, a, keep, inv](Tape<Real>& tp) {
    if (!tp.needs_grad(a)) return;
    const Mat<Real>& G = tp.g(out);
    Mat<Real>& ga = tp.g(a);
    for (size_t i = 0; i < G.a.size(); ++i)
      if (keep[i]) ga.a[i] += G.a[i] * inv;
  });
  return out;
}

// Embedding lookup: out row i = table row ids[i].
template <class Real>
int gather_rows(Tape<Real>& t, int table, const std::vector<int>& ids) {
  const auto& T = t.v(table);
  Mat<Real> c(int(ids.size()), T.cols);
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(T.row(ids[i]), T.row(ids[i]) + T.cols, c.row(int(i)));
  int out = t.push(std::move(c), t.needs_grad(table));
  t.set_bwd(out, [out, table, ids](Tape<Real>& tp) {
    if (!tp.needs_grad(table)) return;
    const Mat<Real>& G = tp.g(out);
    Mat<Real>& gt = tp.g(table);
    for (size_t i = 0; i < ids.size(); ++i) {
      Real* dst = gt.row(ids[i]);
      const Real* src = G.row(int(i));
      for (int j = 0; j < G.cols; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// Copy-attention scatter: out[t, ids[i]] += attn[t, i]. Rows of `attn` summing
// to one produce valid distributions over the vocabulary.
template <class Real>
int copy_scatter(Tape<Real>& t, int attn, const std::vector<int>& ids, int vocab) {
  const auto& A = t.v(attn);
  Mat<Real> c(A.rows, vocab);
  for (int i = 0; i < A.rows; ++i)
    for (int j = 0; j < A.cols; ++j) c(i, ids[j]) += A(i, j);
  int out = t.push(std::move(c), t.needs_grad(attn));
  t.set_bwd(out, [out, attn, ids](Tape<Real>& tp) {
    if (!tp.needs_grad(attn)) return;
    const Mat<Real>& G = tp.g(out);
    Mat<Real>& ga = tp.g(attn);
    for (int i = 0; i < ga.rows; ++i)
      for (int j = 0; j < ga.cols; ++j) ga(i, j) += G(i, ids[j]);
  });
  return out;
}

// Label-smoothed negative log-likelihood over per-step distributions P [T, V].
// The smoothed target puts 1-s+s/K on the gold token and s/K on every other
// legal token (K = number of legal tokens). Steps are combined as
// sum_t w_t * ce_t / sum_t w_t. Probabilities are floored at prob_floor()
// before the log.
template <class Real>
int nll_smoothed(Tape<Real>& t, int p, const std::vector<int>& targets,
                 const std::vector<std::uint8_t>& legal, Real smoothing,
                 const std::vector<Real>& weights) {
  const auto& P = t.v(p);
  const int T = P.rows, V = P.cols;
  const Real eps = prob_floor<Real>();
  int K = 0;
  for (int w = 0; w < V; ++w) K += legal[w] ? 1 : 0;
  Real wsum = 0;
  for (Real w : weights) wsum += w;
  if (!(wsum > Real(0))) throw NumericalError("nll_smoothed: zero weight sum");
  const Real q_gold = Real(1) - smoothing + smoothing / K;
  const Real q_other = smoothing / K;
  Real loss = 0;
  for (int i = 0; i < T; ++i) {
    Real ce = -q_gold * std::log(std::max(P(i, targets[i]), eps));
    if (smoothing > Real(0)) {
      for (int w = 0; w < V; ++w) {
        if (!legal[w] || w == targets[i]) continue;
        ce -= q_other * std::log(std::max(P(i, w), eps));
      }
    }
    loss += weights[i] * ce;
  }
  loss /= wsum;
  Mat<Real> val(1, 1);
  val(0, 0) = loss;
  int out = t.push(std::move(val), t.needs_grad(p));
  t.set_bwd(out, [out, p, targets, legal, smoothing, weights, wsum, q_gold, q_other,
                  eps](Tape<Real>& tp) {
    if (!tp.needs_grad(p)) return;
    const Real go = tp.g(out)(0, 0);
    const Mat<Real>& P2 = tp.v(p);
    Mat<Real>& gp = tp.g(p);
    for (int i = 0; i < P2.rows; ++i) {
      const Real wi = weights[i] / wsum * go;
      Real pg = P2(i, targets[i]);
      if (pg > eps) gp(i, targets[i]) -= wi * q_gold / pg;
      if (smoothing > Real(0)) {
        for (int w = 0; w < P2.cols; ++w) {
          if (!legal[w] || w == targets[i]) continue;
          Real pw = P2(i, w);
          if (pw > eps) gp(i, w) -= wi * q_other / pw;
        }
      }
    }
  });
  return out;
}

// Mean over rows of KL(student || teacher). Both rows are floored at
// prob_floor() and renormalized, which keeps the value exactly non-negative.
// stop_teacher cuts the gradient into the teacher distribution.
template <class Real>
int kl_rows(Tape<Real>& t, int ps, int pt, bool stop_teacher = false) {
  const auto &Ps = t.v(ps), &Pt = t.v(pt);
  if (!Ps.same_shape(Pt)) throw NumericalError("kl_rows: shape mismatch");
  const int T = Ps.rows, V = Ps.cols;
  const Real eps = prob_floor<Real>();
  Real total = 0;
  std::vector<Real> zp(T), zq(T), klrow(T);
  for (int i = 0; i < T; ++i) {
    Real sp = 0, sq = 0;
    for (int w = 0; w < V; ++w) {
      sp += std::max(Ps(i, w), eps);
      sq += std::max(Pt(i, w), eps);
    }
    zp[i] = sp;
    zq[i] = sq;
    Real kl = 0;
    for (int w = 0; w < V; ++w) {
      Real u = std::max(Ps(i, w), eps) / sp;
      Real v = std::max(Pt(i, w), eps) / sq;
      kl += u * (std::log(u) - std::log(v));
    }
    klrow[i] = kl;
    total += kl;
  }
  total /= T;
  Mat<Real> val(1, 1);
  val(0, 0) = total;
  bool ng = t.needs_grad(ps) || (!stop_teacher && t.needs_grad(pt));
  int out = t.push(std::move(val), ng);
  t.set_bwd(out, [out, ps, pt, stop_teacher, zp, zq, klrow, eps](Tape<Real>& tp) {
    const Real go = tp.g(out)(0, 0);
    const Mat<Real>& Ps2 = tp.v(ps);
    const Mat<Real>& Pt2 = tp.v(pt);
    const int T2 = Ps2.rows, V2 = Ps2.cols;
    const Real inv_t = Real(1) / T2;
    if (tp.needs_grad(ps)) {
      Mat<Real>& gs = tp.g(ps);
      for (int i = 0; i < T2; ++i)
        for (int w = 0; w < V2; ++w) {
          if (Ps2(i, w) <= eps) continue;
          Real u = std::max(Ps2(i, w), eps) / zp[i];
          Real v = std::max(Pt2(i, w), eps) / zq[i];
          gs(i, w) += go * inv_t * (std::log(u) - std::log(v) - klrow[i]) / zp[i];
        }
    }
    if (!stop_teacher && tp.needs_grad(pt)) {
      Mat<Real>& gt2 = tp.g(pt);
      for (int i = 0; i < T2; ++i)
        for (int w = 0; w < V2; ++w) {
          if (Pt2(i, w) <= eps) continue;
          Real u = std::max(Ps2(i, w), eps) / zp[i];
          Real vraw = std::max(Pt2(i, w), eps);
          gt2(i, w) += go * inv_t * (Real(1) / zq[i] - u / vraw);
        }
    }
  });
  return out;
}

}  // namespace ops
}  // namespace apdt
