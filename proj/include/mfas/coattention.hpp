#pragma once

#include <json.hpp>

#include "mfas/audio.hpp"
#include "mfas/encoder.hpp"

namespace mfas {

struct HeadConfig {
  int64_t n_guides = 4;  // N
  std::vector<int64_t> mlp_hidden = {256};
  int64_t n_classes = 4;
  bool with_vad_head = false;
  double dropout = 0.1;
  // spectrogram encoder stages: one channel entry per conv block
  std::vector<int64_t> conv_channels = {16, 32, 64, 64, 32};
  int64_t conv_kernel = 3;
  int64_t conv_stride = 2;
  int64_t spec_h = kSpecFrames;
  int64_t spec_w = kSpecBins;

  void validate() const;
  // spatial extent after the conv stack
  std::pair<int64_t, int64_t> conv_output_hw() const;

  nlohmann::json to_json() const;
  static HeadConfig from_json(const nlohmann::json& j);
};

struct GuideVectors {
  Var x_s;            // [B, 2*N*T]
  Var x_s1, x_s2;     // [B, N, T] each
};

struct HeadOutput {
  Var logits;  // [B, n_classes]
  Var vad;     // [B, 3] when enabled, invalid otherwise
};

// Softmax over the frame axis of each guide row, then convex pooling of the
// frames: out[b,n] = sum_t softmax(guide[b,n])_t * frames[b,t].
Var coattend(Tape& t, Var guide, Var frames);

inline Var detach_for_probe(Tape& t, Var x) { return t.detach(x); }

// Conv spectrogram encoder -> guide vectors, dual pooled streams -> MLP.
class CoattentionHead {
 public:
  CoattentionHead(HeadConfig cfg, int64_t model_dim, int64_t n_frames, uint64_t seed);

  // spec: [B, spec_h, spec_w]
  GuideVectors encode_guides(Tape& t, Var spec);
  HeadOutput classify(Tape& t, Var e_pooled, Var o_pooled, std::mt19937_64& rng,
                      bool train);

  const HeadConfig& config() const { return cfg_; }
  int64_t n_frames() const { return n_frames_; }
  ParamRefs params();

 private:
  HeadConfig cfg_;
  int64_t model_dim_, n_frames_;
  std::vector<Linear> conv_;  // weights as [k*k*Ci, Co]
  Linear guide_proj_;         // flattened conv features -> 2*N*T
  std::vector<Linear> mlp_;
  Linear class_out_;
  Linear vad_out_;
};

}  // namespace mfas
