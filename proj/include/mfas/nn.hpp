#pragma once

#include <random>
#include <string>
#include <vector>

#include "mfas/tape.hpp"

namespace mfas {

using ParamRefs = std::vector<Param*>;

struct Linear {
  Param w, b;

  Linear() = default;
  Linear(const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng);
  Var forward(Tape& t, Var x) { return t.add_bias(t.matmul(x, t.param(w)), t.param(b)); }
  void collect(ParamRefs& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct LayerNorm {
  Param gain, bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int64_t dim);
  Var forward(Tape& t, Var x) {
    return t.layer_norm_last(x, t.param(gain), t.param(bias));
  }
  void collect(ParamRefs& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

// Scaled dot-product attention over the frame axis, optionally multi-head by
// channel split. q, k, v: [B, T, D].
Var attend(Tape& t, Var q, Var k, Var v, int heads);

struct MultiHeadSelfAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(const std::string& name, int64_t dim, int heads,
                         std::mt19937_64& rng);
  Var forward(Tape& t, Var x);
  void collect(ParamRefs& out);
};

struct TransformerLayer {
  LayerNorm ln1, ln2;
  MultiHeadSelfAttention attn;
  Linear ff1, ff2;

  TransformerLayer() = default;
  TransformerLayer(const std::string& name, int64_t dim, int64_t ffn_dim, int heads,
                   std::mt19937_64& rng);
  // pre-LN residual block
  Var forward(Tape& t, Var x);
  void collect(ParamRefs& out);
};

struct AdamW {
  double lr = 1e-5;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.01;

  explicit AdamW(ParamRefs params, double lr = 1e-5, double weight_decay = 0.01);
  void step();
  void zero_grad();
  const ParamRefs& params() const { return params_; }

 private:
  ParamRefs params_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

// Plain gradient descent, used for the architecture weights.
struct Sgd {
  double lr = 5.0;

  explicit Sgd(ParamRefs params, double lr = 5.0) : lr(lr), params_(std::move(params)) {}
  void step() {
    for (Param* p : params_)
      for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] -= lr * p->grad[i];
  }
  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }
  const ParamRefs& params() const { return params_; }

 private:
  ParamRefs params_;
};

}  // namespace mfas
