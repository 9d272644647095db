#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mfas/tape.hpp"

using namespace mfas;
using mfas::testutil::gradcheck;

namespace {
Param make_param(const char* name, std::vector<int64_t> shape, unsigned seed) {
  std::mt19937_64 rng(seed);
  return Param(name, Tensor::randn(std::move(shape), 0.5, rng));
}
}  // namespace

TEST_CASE("add/mul/scale forward values") {
  Tape t;
  Var a = t.leaf(Tensor({2}, {1.0, 2.0}));
  Var b = t.leaf(Tensor({2}, {3.0, 4.0}));
  CHECK(t.val(t.add(a, b))[0] == 4.0);
  CHECK(t.val(t.add(a, b))[1] == 6.0);
  CHECK(t.val(t.mul(a, b))[1] == 8.0);
  CHECK(t.val(t.scale(a, -2.0))[0] == -2.0);
}

TEST_CASE("matmul against hand computation") {
  Tape t;
  Var x = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  Var w = t.leaf(Tensor({2, 2}, {5, 6, 7, 8}));
  const Tensor& y = t.val(t.matmul(x, w));
  CHECK(y.at(0, 0) == 19);
  CHECK(y.at(0, 1) == 22);
  CHECK(y.at(1, 0) == 43);
  CHECK(y.at(1, 1) == 50);
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Tape t;
  Var x = t.leaf(Tensor({2, 3}, {0.3, -1.0, 2.0, 100.3, 99.0, 102.0}));
  const Tensor& y = t.val(t.softmax_last(x));
  for (int64_t i = 0; i < 2; ++i) {
    double s = y.at(i, 0) + y.at(i, 1) + y.at(i, 2);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // rows differ only by a constant 100 shift
  for (int64_t j = 0; j < 3; ++j)
    CHECK(y.at(0, j) == doctest::Approx(y.at(1, j)).epsilon(1e-12));
}

TEST_CASE("gradcheck: elementwise chain") {
  Param p = make_param("p", {2, 3}, 1);
  double err = gradcheck({&p}, [&](Tape& t) {
    Var x = t.param(p);
    Var y = t.mul(t.tanh_(x), t.sigmoid_(x));
    return t.mean_all(t.mul(y, y));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("gradcheck: gelu/relu/exp/log") {
  Param p("p", Tensor({4}, {0.5, 1.5, 2.5, 0.25}));
  double err = gradcheck({&p}, [&](Tape& t) {
    Var x = t.param(p);
    Var y = t.add(t.gelu(x), t.relu(x));
    return t.sum_all(t.log_(t.exp_(y)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("gradcheck: matmul + bias + softmax") {
  Param w = make_param("w", {3, 4}, 2);
  Param b = make_param("b", {4}, 3);
  Param x = make_param("x", {2, 3}, 4);
  double err = gradcheck({&w, &b, &x}, [&](Tape& t) {
    Var y = t.softmax_last(t.add_bias(t.matmul(t.param(x), t.param(w)), t.param(b)));
    return t.mean_all(t.mul(y, y));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck: bmm and transpose") {
  Param a = make_param("a", {2, 3, 4}, 5);
  Param b = make_param("b", {2, 3, 4}, 6);
  double err = gradcheck({&a, &b}, [&](Tape& t) {
    Var s = t.bmm(t.param(a), t.transpose12(t.param(b)));
    return t.mean_all(t.mul(s, s));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck: layer norm") {
  Param x = make_param("x", {3, 5}, 7);
  Param g = make_param("g", {5}, 8);
  Param b = make_param("b", {5}, 9);
  double err = gradcheck({&x, &g, &b}, [&](Tape& t) {
    Var y = t.layer_norm_last(t.param(x), t.param(g), t.param(b));
    return t.mean_all(t.mul(y, y));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck: conv1d") {
  Param x = make_param("x", {2, 9, 3}, 10);
  Param w = make_param("w", {2 * 3, 4}, 11);
  Param b = make_param("b", {4}, 12);
  double err = gradcheck({&x, &w, &b}, [&](Tape& t) {
    Var y = t.conv1d(t.param(x), t.param(w), t.param(b), 2, 2);
    return t.mean_all(t.mul(y, y));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck: conv2d") {
  Param x = make_param("x", {1, 6, 5, 2}, 13);
  Param w = make_param("w", {3 * 3 * 2, 3}, 14);
  Param b = make_param("b", {3}, 15);
  double err = gradcheck({&x, &w, &b}, [&](Tape& t) {
    Var y = t.conv2d(t.param(x), t.param(w), t.param(b), 3, 3, 2);
    return t.mean_all(t.mul(y, y));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck: concat/slice/reshape/reductions") {
  Param a = make_param("a", {2, 3}, 16);
  Param b = make_param("b", {2, 2}, 17);
  double err = gradcheck({&a, &b}, [&](Tape& t) {
    Var c = t.concat_last(t.param(a), t.param(b));
    Var s = t.slice_last(c, 1, 4);
    Var r = t.reshape(s, {3, 2});
    return t.add(t.mean_all(t.mul(r, r)), t.mean_all(t.mean_axis0(c)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("gradcheck: rows_select and mask_replace") {
  Param x = make_param("x", {2, 4, 3}, 18);
  Param tok = make_param("tok", {3}, 19);
  std::vector<FramePos> pos = {{0, 1}, {1, 3}, {1, 0}};
  double err = gradcheck({&x, &tok}, [&](Tape& t) {
    Var m = t.mask_replace(t.param(x), pos, t.param(tok));
    Var sel = t.rows_select(m, pos);
    return t.add(t.mean_all(t.mul(m, m)), t.mean_all(t.mul(sel, sel)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("mask_replace blocks gradient to replaced rows of x") {
  Param x = make_param("x", {1, 3, 2}, 20);
  Param tok = make_param("tok", {2}, 21);
  x.zero_grad();
  tok.zero_grad();
  Tape t;
  std::vector<FramePos> pos = {{0, 1}};
  Var m = t.mask_replace(t.param(x), pos, t.param(tok));
  t.backward(t.sum_all(m));
  CHECK(x.grad.at(0, 1, 0) == 0.0);
  CHECK(x.grad.at(0, 1, 1) == 0.0);
  CHECK(x.grad.at(0, 0, 0) == 1.0);
  CHECK(tok.grad[0] == 1.0);
}

TEST_CASE("gradcheck: cosine_rows") {
  Param x = make_param("x", {3, 4}, 22);
  Param c = make_param("c", {3, 2, 4}, 23);
  double err = gradcheck({&x, &c}, [&](Tape& t) {
    Var s = t.cosine_rows(t.param(x), t.param(c));
    return t.mean_all(t.mul(s, s));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("gradcheck: bce and cross entropy") {
  Param l = make_param("l", {2, 3}, 24);
  Tensor labels({2, 3}, {1, 0, 0, 0, 1, 0});
  double err = gradcheck({&l}, [&](Tape& t) {
    return t.bce_with_logits_mean(t.param(l), labels);
  });
  CHECK(err < 1e-6);

  std::vector<int> cls = {2, 0};
  err = gradcheck({&l}, [&](Tape& t) {
    return t.cross_entropy_mean(t.param(l), cls);
  });
  CHECK(err < 1e-6);
}

TEST_CASE("detach cuts gradient flow") {
  Param x = make_param("x", {3}, 25);
  x.zero_grad();
  Tape t;
  Var v = t.param(x);
  Var loss = t.sum_all(t.mul(t.detach(v), v));
  t.backward(loss);
  for (int64_t i = 0; i < 3; ++i) CHECK(x.grad[i] == doctest::Approx(x.value[i]));
}

TEST_CASE("one_hot_st: forward hard, backward identity") {
  Param p("p", Tensor({2, 3}, {0.1, 0.7, 0.2, 0.5, 0.2, 0.3}));
  p.zero_grad();
  Tape t;
  Var h = t.one_hot_st(t.param(p));
  CHECK(t.val(h).at(0, 1) == 1.0);
  CHECK(t.val(h).at(0, 0) == 0.0);
  CHECK(t.val(h).at(1, 0) == 1.0);
  t.backward(t.sum_all(t.mul(h, h)));
  // d(sum h^2)/dsoft via ST: 2*h passed straight through
  CHECK(p.grad.at(0, 1) == 2.0);
  CHECK(p.grad.at(0, 0) == 0.0);
}

TEST_CASE("ctc: empty target equals all-blank log prob") {
  Tape t;
  Tensor logits({3, 4});
  std::mt19937_64 rng(1);
  logits = Tensor::randn({3, 4}, 1.0, rng);
  Var lv = t.leaf(logits);
  Var loss = t.ctc_loss(lv, {});
  // -sum_t log softmax(blank)
  double expect = 0;
  for (int64_t tt = 0; tt < 3; ++tt) {
    double mx = -1e300, s = 0;
    for (int64_t v = 0; v < 4; ++v) mx = std::max(mx, logits.at(tt, v));
    for (int64_t v = 0; v < 4; ++v) s += std::exp(logits.at(tt, v) - mx);
    expect -= logits.at(tt, 0) - (mx + std::log(s));
  }
  CHECK(t.val(loss)[0] == doctest::Approx(expect).epsilon(1e-10));
}

namespace {
// Brute-force CTC: sum path probabilities over every alignment of length T
// that collapses to the target.
double ctc_brute(const Tensor& logits, const std::vector<int>& target, int blank) {
  int64_t T = logits.shape[0], V = logits.shape[1];
  Tensor p(logits.shape);
  for (int64_t t = 0; t < T; ++t) {
    double mx = -1e300, s = 0;
    for (int64_t v = 0; v < V; ++v) mx = std::max(mx, logits.at(t, v));
    for (int64_t v = 0; v < V; ++v) s += std::exp(logits.at(t, v) - mx);
    for (int64_t v = 0; v < V; ++v) p.at(t, v) = std::exp(logits.at(t, v) - mx) / s;
  }
  double total = 0;
  std::vector<int> path(static_cast<size_t>(T), 0);
  std::function<void(int64_t, double)> rec = [&](int64_t t, double prob) {
    if (t == T) {
      std::vector<int> collapsed;
      int prev = -1;
      for (int s : path) {
        if (s != blank && s != prev) collapsed.push_back(s);
        prev = s;
      }
      if (collapsed == target) total += prob;
      return;
    }
    for (int v = 0; v < V; ++v) {
      path[static_cast<size_t>(t)] = v;
      rec(t + 1, prob * p.at(t, v));
    }
  };
  rec(0, 1.0);
  return -std::log(total);
}
}  // namespace

TEST_CASE("ctc matches brute-force alignment enumeration") {
  std::mt19937_64 rng(7);
  Tensor logits = Tensor::randn({3, 3}, 1.0, rng);
  std::vector<int> target = {1, 2};
  double brute = ctc_brute(logits, target, 0);
  Tape t;
  double dp = t.val(t.ctc_loss(t.leaf(logits), target))[0];
  CHECK(dp == doctest::Approx(brute).epsilon(1e-10));

  // longer case with repeats
  Tensor l2 = Tensor::randn({5, 3}, 1.0, rng);
  std::vector<int> t2 = {1, 1};
  Tape t3;
  CHECK(t3.val(t3.ctc_loss(t3.leaf(l2), t2))[0] ==
        doctest::Approx(ctc_brute(l2, t2, 0)).epsilon(1e-10));
}

TEST_CASE("gradcheck: ctc loss") {
  Param l = make_param("l", {4, 3}, 30);
  std::vector<int> target = {2, 1};
  double err = gradcheck({&l}, [&](Tape& t) {
    return t.ctc_loss(t.param(l), target);
  });
  CHECK(err < 1e-5);
}
