#pragma once

#include <json.hpp>

#include "mfas/errors.hpp"
#include "mfas/nn.hpp"

namespace mfas {

struct EncoderConfig {
  std::vector<int64_t> conv_strides = {5, 2, 2, 2, 2, 2, 2};
  std::vector<int64_t> conv_kernels = {10, 3, 3, 3, 3, 2, 2};
  int64_t conv_channels = 512;
  int64_t n_layers = 4;     // k
  int64_t model_dim = 512;  // D_m
  int64_t ffn_dim = 2048;
  int n_heads = 8;
  int64_t max_frames = 512;  // positional table capacity
  double mask_prob = 0.065;
  int64_t mask_span = 10;

  void validate() const;
  int64_t receptive_field() const;
  int64_t output_frames(int64_t input_len) const;  // cascaded conv recurrence

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Frame positions to mask, one index list per batch element.
struct MaskSpec {
  std::vector<std::vector<int64_t>> indices;

  std::vector<FramePos> positions() const;
  int64_t total() const;
};

MaskSpec sample_mask(int64_t batch, int64_t T, double mask_prob, int64_t span,
                     uint64_t seed);

// All k transformer layer outputs plus the raw/deep/target taps.
struct LayerTapBundle {
  std::vector<Var> taps;  // [X_e^1 .. X_e^k]

  Var raw() const { return taps.front(); }
  Var deep() const { return taps[taps.size() / 2 - 1]; }  // X_e^{k/2}
  Var target() const { return taps.back(); }
};

// Conv front-end per Table-2-style config plus a k-layer transformer with
// per-layer output taps.
class SpeechEncoder {
 public:
  SpeechEncoder(EncoderConfig cfg, uint64_t seed);

  // segments: [B, L] raw samples -> [B, T, D_m]
  Var encode_frames(Tape& t, const Tensor& segments);
  Var apply_mask(Tape& t, Var x, const MaskSpec& spec);
  LayerTapBundle transform_with_taps(Tape& t, Var x);

  const EncoderConfig& config() const { return cfg_; }
  ParamRefs params();
  Param& mask_token() { return mask_token_; }

 private:
  EncoderConfig cfg_;
  struct ConvStage {
    Linear w;  // [kernel * Cin, Cout] weight plus bias, applied as conv
    LayerNorm norm;
  };
  std::vector<ConvStage> conv_;
  Linear proj_;
  Param pos_;
  Param mask_token_;
  std::vector<TransformerLayer> layers_;
};

}  // namespace mfas
