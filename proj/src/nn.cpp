#include "mfas/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mfas {

Linear::Linear(const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng)
    : w(name + ".w", Tensor::randn({in, out}, std::sqrt(2.0 / static_cast<double>(in + out)), rng)),
      b(name + ".b", Tensor::zeros({out})) {}

LayerNorm::LayerNorm(const std::string& name, int64_t dim)
    : gain(name + ".gain", Tensor::full({dim}, 1.0)),
      bias(name + ".bias", Tensor::zeros({dim})) {}

Var attend(Tape& t, Var q, Var k, Var v, int heads) {
  const Tensor& qv = t.val(q);
  if (qv.ndim() != 3) throw std::invalid_argument("attend: inputs must be [B,T,D]");
  int64_t d = qv.shape[2];
  if (heads < 1 || d % heads != 0)
    throw std::invalid_argument("attend: dim not divisible by heads");
  int64_t dh = d / heads;
  Var out;
  for (int h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : t.slice_last(q, h * dh, (h + 1) * dh);
    Var kh = heads == 1 ? k : t.slice_last(k, h * dh, (h + 1) * dh);
    Var vh = heads == 1 ? v : t.slice_last(v, h * dh, (h + 1) * dh);
    Var scores = t.scale(t.bmm(qh, t.transpose12(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var oh = t.bmm(t.softmax_last(scores), vh);
    out = (h == 0) ? oh : t.concat_last(out, oh);
  }
  return out;
}

MultiHeadSelfAttention::MultiHeadSelfAttention(const std::string& name, int64_t dim,
                                               int heads, std::mt19937_64& rng)
    : wq(name + ".q", dim, dim, rng),
      wk(name + ".k", dim, dim, rng),
      wv(name + ".v", dim, dim, rng),
      wo(name + ".o", dim, dim, rng),
      heads(heads) {}

Var MultiHeadSelfAttention::forward(Tape& t, Var x) {
  Var q = wq.forward(t, x), k = wk.forward(t, x), v = wv.forward(t, x);
  return wo.forward(t, attend(t, q, k, v, heads));
}

void MultiHeadSelfAttention::collect(ParamRefs& out) {
  wq.collect(out);
  wk.collect(out);
  wv.collect(out);
  wo.collect(out);
}

TransformerLayer::TransformerLayer(const std::string& name, int64_t dim, int64_t ffn_dim,
                                   int heads, std::mt19937_64& rng)
    : ln1(name + ".ln1", dim),
      ln2(name + ".ln2", dim),
      attn(name + ".attn", dim, heads, rng),
      ff1(name + ".ff1", dim, ffn_dim, rng),
      ff2(name + ".ff2", ffn_dim, dim, rng) {}

Var TransformerLayer::forward(Tape& t, Var x) {
  Var h = t.add(x, attn.forward(t, ln1.forward(t, x)));
  Var f = ff2.forward(t, t.gelu(ff1.forward(t, ln2.forward(t, h))));
  return t.add(h, f);
}

void TransformerLayer::collect(ParamRefs& out) {
  ln1.collect(out);
  ln2.collect(out);
  attn.collect(out);
  ff1.collect(out);
  ff2.collect(out);
}

AdamW::AdamW(ParamRefs params, double lr, double weight_decay)
    : lr(lr), weight_decay(weight_decay), params_(std::move(params)) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Param* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape));
    v_.push_back(Tensor::zeros(p->value.shape));
  }
}

void AdamW::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Param& p = *params_[pi];
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      double g = p.grad[i];
      m_[pi][i] = beta1 * m_[pi][i] + (1 - beta1) * g;
      v_[pi][i] = beta2 * v_[pi][i] + (1 - beta2) * g * g;
      double mhat = m_[pi][i] / bc1, vhat = v_[pi][i] / bc2;
      p.value[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.value[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

}  // namespace mfas
