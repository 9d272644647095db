#pragma once

#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "mfas/tensor.hpp"

namespace mfas {

// A named trainable tensor. Gradients accumulate into `grad` when a Tape
// that references the parameter runs backward().
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor::zeros(value.shape);
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// One (batch, frame) position, used for masked-loss row selection.
struct FramePos {
  int64_t batch;
  int64_t t;
};

// Reverse-mode tape. Each forward op records a closure that routes the
// output gradient to its inputs. One tape per training step.
class Tape {
 public:
  Var leaf(Tensor value);
  Var param(Param& p);

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  Tensor& grad(Var v);
  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. `loss` must be
  // a single-element tensor.
  void backward(Var loss);

  // ---- elementwise ----
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var add_bias(Var x, Var b);   // x: [..., D], b: [D]
  Var relu(Var x);
  Var gelu(Var x);
  Var tanh_(Var x);
  Var sigmoid_(Var x);
  Var log_(Var x);
  Var exp_(Var x);
  Var dropout(Var x, double p, std::mt19937_64& rng);  // identity when p == 0

  // ---- linear algebra ----
  Var matmul(Var x, Var w);          // x: [..., K] x w: [K, N] -> [..., N]
  Var bmm(Var a, Var b);             // [B,M,K] x [B,K,N] -> [B,M,N]
  Var transpose12(Var a);            // [B,M,N] -> [B,N,M]

  // ---- normalization / reshaping ----
  Var softmax_last(Var x);
  Var layer_norm_last(Var x, Var gain, Var bias, double eps = 1e-5);
  Var reshape(Var x, std::vector<int64_t> shape);
  Var concat_last(Var a, Var b);
  Var slice_last(Var x, int64_t from, int64_t to);
  Var row(Var x, int64_t i);         // select index i along axis 0
  Var slice_axis0(Var x, int64_t from, int64_t to);
  Var add_broadcast0(Var x, Var p);  // p's shape == x's shape without axis 0
  Var index_scalar(Var x, int64_t i);
  Var mul_scalar(Var x, Var s);      // s: [1]
  Var detach(Var x);

  // ---- reductions ----
  Var sum_all(Var x);
  Var mean_all(Var x);
  Var mean_axis0(Var x);

  // ---- convolution (im2col + GEMM), channel-last layout ----
  Var conv1d(Var x, Var w, Var b, int64_t kernel, int64_t stride);
  // x: [B,H,W,Ci], w: [kh*kw*Ci, Co], b: [Co]
  Var conv2d(Var x, Var w, Var b, int64_t kh, int64_t kw, int64_t stride);

  // ---- masked-pretraining helpers ----
  Var rows_select(Var x, const std::vector<FramePos>& pos);       // -> [M, D]
  Var mask_replace(Var x, const std::vector<FramePos>& pos, Var token);
  Var one_hot_st(Var soft);          // forward argmax one-hot, backward identity
  Var cosine_rows(Var x, Var c);     // x: [M,D], c: [M,C,D] -> [M,C]
  Var gather_rows(Var x, std::vector<int64_t> idx);  // x: [M,D] -> [K,D]

  // ---- losses ----
  Var bce_with_logits_mean(Var logits, const Tensor& labels);
  Var cross_entropy_mean(Var logits, const std::vector<int>& labels);
  Var ctc_loss(Var logits, const std::vector<int>& targets, int blank = 0);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched
    bool needs_grad = false;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;

  Var make(Tensor value, bool needs_grad, std::function<void(Tape&)> back);
  Tensor& ensure_grad(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }
};

}  // namespace mfas
