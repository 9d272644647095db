#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "mfas/nn.hpp"

using namespace mfas;
using mfas::testutil::gradcheck;

TEST_CASE("attend: singleton frame axis returns the value row") {
  std::mt19937_64 rng(1);
  Tape t;
  Var q = t.leaf(Tensor::randn({2, 1, 4}, 1.0, rng));
  Var k = t.leaf(Tensor::randn({2, 1, 4}, 1.0, rng));
  Tensor vv = Tensor::randn({2, 1, 4}, 1.0, rng);
  Var v = t.leaf(vv);
  const Tensor& out = t.val(attend(t, q, k, v, 1));
  for (int64_t i = 0; i < vv.numel(); ++i) CHECK(out[i] == doctest::Approx(vv[i]));
}

TEST_CASE("attend: zero query yields mean of values over frames") {
  std::mt19937_64 rng(2);
  Tape t;
  Var q = t.leaf(Tensor::zeros({1, 3, 4}));
  Var k = t.leaf(Tensor::randn({1, 3, 4}, 1.0, rng));
  Tensor vv = Tensor::randn({1, 3, 4}, 1.0, rng);
  Var v = t.leaf(vv);
  const Tensor& out = t.val(attend(t, q, k, v, 1));
  for (int64_t d = 0; d < 4; ++d) {
    double mean = (vv.at(0, 0, d) + vv.at(0, 1, d) + vv.at(0, 2, d)) / 3.0;
    for (int64_t tt = 0; tt < 3; ++tt)
      CHECK(out.at(0, tt, d) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("attend: multi-head output matches per-chunk single-head") {
  std::mt19937_64 rng(3);
  Tensor qv = Tensor::randn({1, 3, 4}, 1.0, rng);
  Tensor kv = Tensor::randn({1, 3, 4}, 1.0, rng);
  Tensor vv = Tensor::randn({1, 3, 4}, 1.0, rng);
  Tape t;
  const Tensor& multi = t.val(attend(t, t.leaf(qv), t.leaf(kv), t.leaf(vv), 2));
  // manual: heads are channel halves
  for (int h = 0; h < 2; ++h) {
    Tensor qh({1, 3, 2}), kh({1, 3, 2}), vh({1, 3, 2});
    for (int64_t tt = 0; tt < 3; ++tt)
      for (int64_t d = 0; d < 2; ++d) {
        qh.at(0, tt, d) = qv.at(0, tt, h * 2 + d);
        kh.at(0, tt, d) = kv.at(0, tt, h * 2 + d);
        vh.at(0, tt, d) = vv.at(0, tt, h * 2 + d);
      }
    Tape t2;
    const Tensor& single = t2.val(attend(t2, t2.leaf(qh), t2.leaf(kh), t2.leaf(vh), 1));
    for (int64_t tt = 0; tt < 3; ++tt)
      for (int64_t d = 0; d < 2; ++d)
        CHECK(multi.at(0, tt, h * 2 + d) == doctest::Approx(single.at(0, tt, d)));
  }
}

TEST_CASE("gradcheck: transformer layer") {
  std::mt19937_64 rng(4);
  TransformerLayer layer("l", 4, 8, 2, rng);
  Param x("x", Tensor::randn({1, 3, 4}, 0.5, rng));
  ParamRefs refs;
  layer.collect(refs);
  refs.push_back(&x);
  double err = gradcheck(refs, [&](Tape& t) {
    Var y = layer.forward(t, t.param(x));
    return t.mean_all(t.mul(y, y));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("AdamW drives a quadratic toward its minimum") {
  Param p("p", Tensor({2}, {3.0, -2.0}));
  AdamW opt({&p}, 0.1, 0.0);
  for (int i = 0; i < 400; ++i) {
    opt.zero_grad();
    Tape t;
    Var x = t.param(p);
    Var loss = t.mean_all(t.mul(x, x));
    t.backward(loss);
    opt.step();
  }
  CHECK(std::abs(p.value[0]) < 1e-2);
  CHECK(std::abs(p.value[1]) < 1e-2);
}

TEST_CASE("Sgd step is exactly value -= lr * grad") {
  Param p("p", Tensor({2}, {1.0, 2.0}));
  p.grad = Tensor({2}, {0.5, -0.25});
  Sgd opt({&p}, 2.0);
  opt.step();
  CHECK(p.value[0] == doctest::Approx(0.0));
  CHECK(p.value[1] == doctest::Approx(2.5));
}

TEST_CASE("optimizers only touch their own parameter sets") {
  std::mt19937_64 rng(5);
  Param a("a", Tensor::randn({3}, 1.0, rng));
  Param b("b", Tensor::randn({3}, 1.0, rng));
  Tensor a0 = a.value, b0 = b.value;
  AdamW model_opt({&a}, 0.1, 0.0);
  Sgd alpha_opt({&b}, 0.5);
  a.grad = Tensor::full({3}, 1.0);
  b.grad = Tensor::full({3}, 1.0);
  model_opt.step();
  CHECK(b.value.data == b0.data);
  alpha_opt.step();
  CHECK(a.value.data != a0.data);
  CHECK(b.value.data != b0.data);
}
