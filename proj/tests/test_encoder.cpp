#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <random>

#include "mfas/checkpoint.hpp"
#include "mfas/encoder.hpp"

using namespace mfas;

namespace {
EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.conv_channels = 4;
  cfg.model_dim = 4;
  cfg.ffn_dim = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 4;
  cfg.max_frames = 160;
  return cfg;
}
}  // namespace

TEST_CASE("48000 samples produce exactly 149 frames") {
  EncoderConfig cfg;
  CHECK(cfg.output_frames(48000) == 149);

  SpeechEncoder enc(tiny_config(), 1);
  Tape t;
  std::mt19937_64 rng(2);
  Var x = enc.encode_frames(t, Tensor::randn({1, 48000}, 0.1, rng));
  CHECK(t.val(x).shape == std::vector<int64_t>({1, 149, 4}));
}

TEST_CASE("stride product 320: frame count slope for receptive-field offsets") {
  EncoderConfig cfg;
  int64_t rf = cfg.receptive_field();
  for (int64_t n = 0; n <= 8; ++n)
    CHECK(cfg.output_frames(320 * n + rf) == n + 1);
}

TEST_CASE("frame-count formula matches per-stage brute force on random configs") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    EncoderConfig cfg = tiny_config();
    cfg.conv_strides.clear();
    cfg.conv_kernels.clear();
    int stages = 2 + static_cast<int>(rng() % 3);
    for (int i = 0; i < stages; ++i) {
      cfg.conv_strides.push_back(1 + static_cast<int64_t>(rng() % 3));
      cfg.conv_kernels.push_back(2 + static_cast<int64_t>(rng() % 4));
    }
    int64_t len = cfg.receptive_field() + static_cast<int64_t>(rng() % 64);
    // brute force: run the actual convolution stack and count output frames
    SpeechEncoder enc(cfg, 4);
    Tape t;
    Var x = enc.encode_frames(t, Tensor::randn({1, len}, 0.1, rng));
    CHECK(t.val(x).shape[1] == cfg.output_frames(len));
  }
}

TEST_CASE("all-zero segment yields finite output") {
  SpeechEncoder enc(tiny_config(), 5);
  Tape t;
  Var x = enc.encode_frames(t, Tensor::zeros({1, 48000}));
  auto bundle = enc.transform_with_taps(t, x);
  CHECK(t.val(bundle.target()).all_finite());
}

TEST_CASE("input shorter than receptive field rejected") {
  SpeechEncoder enc(tiny_config(), 6);
  Tape t;
  CHECK_THROWS_AS(enc.encode_frames(t, Tensor::zeros({1, 100})), InputError);
}

TEST_CASE("apply_mask substitutes exactly the masked rows") {
  SpeechEncoder enc(tiny_config(), 7);
  std::mt19937_64 rng(8);
  Tensor xv = Tensor::randn({1, 3, 4}, 1.0, rng);
  Tape t;
  Var x = t.leaf(xv);

  MaskSpec empty;
  empty.indices = {{}};
  CHECK(t.val(enc.apply_mask(t, x, empty)).data == xv.data);

  MaskSpec one;
  one.indices = {{1}};
  const Tensor& masked = t.val(enc.apply_mask(t, x, one));
  for (int64_t d = 0; d < 4; ++d) {
    CHECK(masked.at(0, 0, d) == xv.at(0, 0, d));
    CHECK(masked.at(0, 1, d) == enc.mask_token().value[d]);
    CHECK(masked.at(0, 2, d) == xv.at(0, 2, d));
  }

  MaskSpec all;
  all.indices = {{0, 1, 2}};
  const Tensor& allm = t.val(enc.apply_mask(t, x, all));
  for (int64_t tt = 0; tt < 3; ++tt)
    for (int64_t d = 0; d < 4; ++d)
      CHECK(allm.at(0, tt, d) == enc.mask_token().value[d]);

  MaskSpec bad;
  bad.indices = {{5}};
  CHECK_THROWS_AS(enc.apply_mask(t, x, bad), InputError);
}

TEST_CASE("sample_mask boundaries and determinism") {
  MaskSpec none = sample_mask(2, 10, 0.0, 3, 42);
  CHECK(none.total() == 0);
  MaskSpec all = sample_mask(2, 10, 1.0, 1, 42);
  CHECK(all.total() == 20);
  MaskSpec a = sample_mask(3, 50, 0.2, 4, 123);
  MaskSpec b = sample_mask(3, 50, 0.2, 4, 123);
  CHECK(a.indices == b.indices);
  MaskSpec c = sample_mask(3, 50, 0.2, 4, 124);
  CHECK(a.indices != c.indices);
}

TEST_CASE("tap bundle: k taps, deep is layer k/2, shapes match") {
  SpeechEncoder enc(tiny_config(), 9);
  std::mt19937_64 rng(10);
  Tape t;
  Var x = t.leaf(Tensor::randn({2, 5, 4}, 1.0, rng));
  auto bundle = enc.transform_with_taps(t, x);
  REQUIRE(bundle.taps.size() == 4);
  CHECK(bundle.deep().id == bundle.taps[1].id);  // X_e^2 for k = 4
  for (const Var& tap : bundle.taps)
    CHECK(t.val(tap).shape == std::vector<int64_t>({2, 5, 4}));
}

TEST_CASE("deterministic forward: two passes are bitwise identical") {
  SpeechEncoder enc(tiny_config(), 11);
  std::mt19937_64 rng(12);
  Tensor seg = Tensor::randn({1, 48000}, 0.1, rng);
  Tape t1, t2;
  auto b1 = enc.transform_with_taps(t1, enc.encode_frames(t1, seg));
  auto b2 = enc.transform_with_taps(t2, enc.encode_frames(t2, seg));
  CHECK(t1.val(b1.target()).data == t2.val(b2.target()).data);
}

TEST_CASE("mask locality: mask-token gradient nonzero iff frames are masked") {
  SpeechEncoder enc(tiny_config(), 13);
  std::mt19937_64 rng(14);
  Tensor seg = Tensor::randn({1, 2000}, 0.5, rng);

  auto run = [&](const MaskSpec& spec) {
    for (Param* p : enc.params()) p->zero_grad();
    Tape t;
    Var x = enc.encode_frames(t, seg);
    Var masked = enc.apply_mask(t, x, spec);
    auto bundle = enc.transform_with_taps(t, masked);
    Var target = t.detach(x);
    Var diff = t.sub(bundle.target(), target);
    t.backward(t.mean_all(t.mul(diff, diff)));
    double norm = 0;
    for (double g : enc.mask_token().grad.data) norm += g * g;
    return norm;
  };

  MaskSpec none;
  none.indices = {{}};
  CHECK(run(none) == 0.0);

  MaskSpec some;
  some.indices = {{1, 2}};
  CHECK(run(some) > 0.0);
}

TEST_CASE("checkpoint round trip restores encoder weights exactly") {
  SpeechEncoder enc(tiny_config(), 15);
  Checkpoint ck;
  ck.kind = "encoder";
  ck.config = enc.config().to_json();
  ck.put_params(enc.params());
  ck.save("test_enc.ckpt");

  Checkpoint loaded = Checkpoint::load("test_enc.ckpt");
  CHECK(loaded.kind == "encoder");
  SpeechEncoder enc2(EncoderConfig::from_json(loaded.config), 999);
  loaded.restore_params(enc2.params());
  ParamRefs a = enc.params(), b = enc2.params();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value.data == b[i]->value.data);
  std::remove("test_enc.ckpt");
}
