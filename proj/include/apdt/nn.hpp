#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "apdt/tape.hpp"

namespace apdt {

// Named parameter bank with Adam state. Creation order is fixed by the model
// constructor, which makes initialization and serialization deterministic.
template <class Real>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Mat<Real> value, grad, m, v;
  };

  int add(const std::string& name, int rows, int cols) {
    Entry e;
    e.name = name;
    e.value = Mat<Real>::zeros(rows, cols);
    e.grad = Mat<Real>::zeros(rows, cols);
    e.m = Mat<Real>::zeros(rows, cols);
    e.v = Mat<Real>::zeros(rows, cols);
    items_.push_back(std::move(e));
    by_name_[name] = int(items_.size()) - 1;
    return int(items_.size()) - 1;
  }

  Mat<Real>& value(int id) { return items_[id].value; }
  const Mat<Real>& value(int id) const { return items_[id].value; }
  Mat<Real>& grad(int id) { return items_[id].grad; }
  const std::string& name(int id) const { return items_[id].name; }
  int find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? -1 : it->second;
  }
  int count() const { return int(items_.size()); }
  Entry& entry(int id) { return items_[id]; }
  const Entry& entry(int id) const { return items_[id]; }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& e : items_) n += e.value.size();
    return n;
  }

  void zero_grads() {
    for (auto& e : items_) e.grad.zero();
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& e : items_) s += double(frob_norm_sq(e.grad));
    return std::sqrt(s);
  }

  // Global-norm clipping: rescales, never changes direction.
  void clip_grads(double max_norm) {
    double n = grad_norm();
    if (n > max_norm && n > 0) {
      Real f = Real(max_norm / n);
      for (auto& e : items_)
        for (auto& x : e.grad.a) x *= f;
    }
  }

  void adam_step(Real lr, Real beta1, Real beta2, Real eps, std::int64_t step) {
    const Real bc1 = Real(1) - std::pow(beta1, Real(step));
    const Real bc2 = Real(1) - std::pow(beta2, Real(step));
    for (auto& e : items_) {
      for (size_t i = 0; i < e.value.a.size(); ++i) {
        Real g = e.grad.a[i];
        e.m.a[i] = beta1 * e.m.a[i] + (Real(1) - beta1) * g;
        e.v.a[i] = beta2 * e.v.a[i] + (Real(1) - beta2) * g * g;
        Real mhat = e.m.a[i] / bc1;
        Real vhat = e.v.a[i] / bc2;
        e.value.a[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  std::vector<Entry> items_;
  std::unordered_map<std::string, int> by_name_;
};

// Lazily binds store parameters into a tape (one node per parameter per tape).
template <class Real>
class Bind {
 public:
  Bind(Tape<Real>& tape, ParamStore<Real>& store)
      : tape_(&tape), store_(&store), node_(store.count(), -1) {}

  int operator()(int pid) {
    if (node_[pid] < 0)
      node_[pid] = tape_->param(&store_->value(pid), &store_->grad(pid));
    return node_[pid];
  }

  Tape<Real>& tape() { return *tape_; }

 private:
  Tape<Real>* tape_;
  ParamStore<Real>* store_;
  std::vector<int> node_;
};

template <class Real>
void init_uniform(Mat<Real>& m, Rng& rng, double lim) {
  for (auto& x : m.a) x = Real(rng.uniform(-lim, lim));
}

template <class Real>
void init_xavier(Mat<Real>& m, Rng& rng) {
  init_uniform(m, rng, std::sqrt(6.0 / (m.rows + m.cols)));
}

template <class Real>
void init_normal(Mat<Real>& m, Rng& rng, double stddev) {
  for (auto& x : m.a) x = Real(rng.normal(0.0, stddev));
}

enum class Act { gelu, relu };

template <class Real>
struct LinearP {
  int w = -1, b = -1;  // w is [in, out], applied as x * w + b

  static LinearP create(ParamStore<Real>& ps, const std::string& name, int in, int out,
                        Rng& rng) {
    LinearP p;
    p.w = ps.add(name + ".w", in, out);
    p.b = ps.add(name + ".b", 1, out);
    init_xavier(ps.value(p.w), rng);
    return p;
  }

  int apply(Bind<Real>& B, int x) const {
    auto& t = B.tape();
    return ops::add_rowvec(t, ops::matmul(t, x, B(w)), B(b));
  }
};

template <class Real>
struct LayerNormP {
  int gamma = -1, beta = -1;

  static LayerNormP create(ParamStore<Real>& ps, const std::string& name, int d) {
    LayerNormP p;
    p.gamma = ps.add(name + ".g", 1, d);
    p.beta = ps.add(name + ".b", 1, d);
    ps.value(p.gamma).fill(Real(1));
    return p;
  }

  int apply(Bind<Real>& B, int x) const {
    return ops::layer_norm(B.tape(), x, B(gamma), B(beta));
  }
};

template <class Real>
struct FfnP {
  LinearP<Real> l1, l2;

  static FfnP create(ParamStore<Real>& ps, const std::string& name, int d, int hidden,
                     Rng& rng) {
    FfnP p;
    p.l1 = LinearP<Real>::create(ps, name + ".l1", d, hidden, rng);
    p.l2 = LinearP<Real>::create(ps, name + ".l2", hidden, d, rng);
    return p;
  }

  int apply(Bind<Real>& B, int x, Act act) const {
    auto& t = B.tape();
    int h = l1.apply(B, x);
    h = act == Act::gelu ? ops::gelu(t, h) : ops::relu(t, h);
    return l2.apply(B, h);
  }
};

template <class Real>
struct MhaOut {
  int out = -1;       // [Tq, d]
  int attn_avg = -1;  // [Tq, Tk], head-averaged attention weights
};

template <class Real>
struct MhaP {
  LinearP<Real> q, k, v, o;

  static MhaP create(ParamStore<Real>& ps, const std::string& name, int d, Rng& rng) {
    MhaP p;
    p.q = LinearP<Real>::create(ps, name + ".q", d, d, rng);
    p.k = LinearP<Real>::create(ps, name + ".k", d, d, rng);
    p.v = LinearP<Real>::create(ps, name + ".v", d, d, rng);
    p.o = LinearP<Real>::create(ps, name + ".o", d, d, rng);
    return p;
  }

  // q_in attends over kv_in. Attention weights are never dropped out: the copy
  // mechanism reuses them and needs each row to stay a distribution.
  MhaOut<Real> apply(Bind<Real>& B, int q_in, int kv_in, int heads,
                     const std::vector<std::uint8_t>* key_mask, bool causal) const {
    auto& t = B.tape();
    const int d = t.v(q_in).cols;
    const int dk = d / heads;
    int Q = q.apply(B, q_in);
    int K = k.apply(B, kv_in);
    int V = v.apply(B, kv_in);
    std::vector<int> ctxs;
    int attn_sum = -1;
    const Real inv_sqrt_dk = Real(1) / std::sqrt(Real(dk));
    for (int h = 0; h < heads; ++h) {
      int qh = ops::slice_cols(t, Q, h * dk, (h + 1) * dk);
      int kh = ops::slice_cols(t, K, h * dk, (h + 1) * dk);
      int vh = ops::slice_cols(t, V, h * dk, (h + 1) * dk);
      int scores = ops::scale(t, ops::matmul_nt(t, qh, kh), inv_sqrt_dk);
      int attn = ops::softmax_rows(t, scores, key_mask, causal);
      attn_sum = h == 0 ? attn : ops::add(t, attn_sum, attn);
      ctxs.push_back(ops::matmul(t, attn, vh));
    }
    MhaOut<Real> r;
    r.attn_avg = heads == 1 ? attn_sum : ops::scale(t, attn_sum, Real(1) / heads);
    r.out = o.apply(B, ops::concat_cols(t, ctxs));
    return r;
  }
};

// Shared knobs threaded through every block forward.
template <class Real>
struct FwdCtx {
  int heads = 1;
  Real dropout = 0;
  Act act = Act::gelu;
  Rng* rng = nullptr;
  bool train = false;

  int drop(Tape<Real>& t, int x) const { return ops::dropout(t, x, dropout, rng, train); }
};

// Pre-norm encoder layer: x + Drop(MHA(LN(x))), then x + Drop(FFN(LN(x))).
template <class Real>
struct EncoderLayerP {
  MhaP<Real> mha;
  FfnP<Real> ffn;
  LayerNormP<Real> ln1, ln2;

  static EncoderLayerP create(ParamStore<Real>& ps, const std::string& name, int d,
                              int ffn_dim, Rng& rng) {
    EncoderLayerP p;
    p.mha = MhaP<Real>::create(ps, name + ".mha", d, rng);
    p.ffn = FfnP<Real>::create(ps, name + ".ffn", d, ffn_dim, rng);
    p.ln1 = LayerNormP<Real>::create(ps, name + ".ln1", d);
    p.ln2 = LayerNormP<Real>::create(ps, name + ".ln2", d);
    return p;
  }

  int apply(Bind<Real>& B, int x, const std::vector<std::uint8_t>* mask,
            const FwdCtx<Real>& c) const {
    auto& t = B.tape();
    int n1 = ln1.apply(B, x);
    auto a = mha.apply(B, n1, n1, c.heads, mask, false);
    x = ops::add(t, x, c.drop(t, a.out));
    x = ops::add(t, x, c.drop(t, ffn.apply(B, ln2.apply(B, x), c.act)));
    return x;
  }
};

template <class Real>
struct EncoderStackP {
  std::vector<EncoderLayerP<Real>> layers;

  static EncoderStackP create(ParamStore<Real>& ps, const std::string& name, int depth,
                              int d, int ffn_dim, Rng& rng) {
    EncoderStackP p;
    for (int l = 0; l < depth; ++l)
      p.layers.push_back(
          EncoderLayerP<Real>::create(ps, name + "." + std::to_string(l), d, ffn_dim, rng));
    return p;
  }

  // Returns one node per layer (layer 1..N outputs, index 0 = first layer).
  std::vector<int> apply(Bind<Real>& B, int x, const std::vector<std::uint8_t>* mask,
                         const FwdCtx<Real>& c) const {
    std::vector<int> outs;
    for (const auto& layer : layers) {
      x = layer.apply(B, x, mask, c);
      outs.push_back(x);
    }
    return outs;
  }
};

template <class Real>
struct DecoderOut {
  int states = -1;     // [T, d] top-layer states
  int cross_avg = -1;  // [T, S] final-layer cross attention (head-averaged)
};

template <class Real>
struct DecoderLayerP {
  MhaP<Real> self_mha, cross_mha;
  FfnP<Real> ffn;
  LayerNormP<Real> ln1, ln2, ln3;

  static DecoderLayerP create(ParamStore<Real>& ps, const std::string& name, int d,
                              int ffn_dim, Rng& rng) {
    DecoderLayerP p;
    p.self_mha = MhaP<Real>::create(ps, name + ".self", d, rng);
    p.cross_mha = MhaP<Real>::create(ps, name + ".cross", d, rng);
    p.ffn = FfnP<Real>::create(ps, name + ".ffn", d, ffn_dim, rng);
    p.ln1 = LayerNormP<Real>::create(ps, name + ".ln1", d);
    p.ln2 = LayerNormP<Real>::create(ps, name + ".ln2", d);
    p.ln3 = LayerNormP<Real>::create(ps, name + ".ln3", d);
    return p;
  }
};

template <class Real>
struct DecoderStackP {
  std::vector<DecoderLayerP<Real>> layers;

  static DecoderStackP create(ParamStore<Real>& ps, const std::string& name, int depth,
                              int d, int ffn_dim, Rng& rng) {
    DecoderStackP p;
    for (int l = 0; l < depth; ++l)
      p.layers.push_back(
          DecoderLayerP<Real>::create(ps, name + "." + std::to_string(l), d, ffn_dim, rng));
    return p;
  }

  // Causal self-attention over x, cross-attention over memory.
  DecoderOut<Real> apply(Bind<Real>& B, int x, int memory,
                         const std::vector<std::uint8_t>* mem_mask,
                         const FwdCtx<Real>& c) const {
    auto& t = B.tape();
    int cross_avg = -1;
    for (const auto& layer : layers) {
      int n1 = layer.ln1.apply(B, x);
      auto sa = layer.self_mha.apply(B, n1, n1, c.heads, nullptr, true);
      x = ops::add(t, x, c.drop(t, sa.out));
      auto ca = layer.cross_mha.apply(B, layer.ln2.apply(B, x), memory, c.heads, mem_mask,
                                      false);
      x = ops::add(t, x, c.drop(t, ca.out));
      x = ops::add(t, x, c.drop(t, layer.ffn.apply(B, layer.ln3.apply(B, x), c.act)));
      cross_avg = ca.attn_avg;
    }
    DecoderOut<Real> r;
    r.states = x;
    r.cross_avg = cross_avg;
    return r;
  }
};

}  // namespace apdt
