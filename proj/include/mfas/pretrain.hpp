#pragma once

#include <json.hpp>

#include "mfas/encoder.hpp"

namespace mfas {

struct CodebookConfig {
  int64_t n_books = 2;  // B
  int64_t n_words = 2;  // W
  int64_t n_negatives = 10;
  double temp_start = 2.0, temp_end = 0.5;
  double diversity_weight = 0.1;
  double logit_scale = 10.0;  // cosine similarities are in [-1,1]

  int64_t n_units() const {  // N_q = W^B
    int64_t n = 1;
    for (int64_t i = 0; i < n_books; ++i) n *= n_words;
    return n;
  }
  nlohmann::json to_json() const;
  static CodebookConfig from_json(const nlohmann::json& j);
};

struct ContinuousTargetConfig {
  int64_t n_layers = 2;  // L_c
  double ema_decay = 0.999;
  bool normalize_targets = true;

  nlohmann::json to_json() const;
  static ContinuousTargetConfig from_json(const nlohmann::json& j);
};

struct CtcConfig {
  int64_t vocab_size = 13;  // 12 symbols + blank
};

// Gumbel-softmax product quantizer: one codebook of n_words sub-codewords per
// book, concatenated into a D_m-dimensional composite target.
class Quantizer {
 public:
  Quantizer(CodebookConfig cfg, int64_t model_dim, uint64_t seed);

  struct Result {
    Var positives;               // [M, D_m]
    std::vector<Var> soft_probs; // per book, [M, W]
  };
  // x: unmasked frame features [B,T,D]; one composite codeword per masked frame
  Result quantize_targets(Tape& t, Var x, const MaskSpec& spec, double temperature,
                          std::mt19937_64& gumbel_rng);
  // weight * (1 - perplexity / N_q), perplexity from the mean soft assignments
  Var diversity_penalty(Tape& t, const std::vector<Var>& soft_probs);

  const CodebookConfig& config() const { return cfg_; }
  ParamRefs params();

 private:
  CodebookConfig cfg_;
  int64_t code_dim_;
  Linear logits_proj_;          // D_m -> B*W
  std::vector<Param> books_;    // each [W, code_dim]
};

// BCE-with-logits over cosine similarities between reconstructions at masked
// positions and {positive, sampled negative} codewords.
Var quantized_contrastive_loss(Tape& t, Var x_hat, Var positives, const MaskSpec& spec,
                               const CodebookConfig& cfg, std::mt19937_64& rng);

// EMA copy of the student encoder.
struct TeacherState {
  std::unique_ptr<SpeechEncoder> encoder;
  double tau = 0.999;

  static TeacherState init_from(SpeechEncoder& student, double tau, uint64_t seed);
};

// teacher <- tau * teacher + (1 - tau) * student, elementwise
void update_teacher(TeacherState& teacher, SpeechEncoder& student);
void update_teacher(ParamRefs teacher_params, ParamRefs student_params, double tau);

// Teacher forward on the unmasked segments; mean of the last L_c taps, each
// frame optionally instance-normalized first. Detached.
Var continuous_targets(Tape& t, TeacherState& teacher, const Tensor& segments,
                       const ContinuousTargetConfig& cfg);

// MSE over masked positions only; zero loss when nothing is masked.
Var continuous_loss(Tape& t, Var x_hat, Var y, const MaskSpec& spec);

// Linear head to vocab logits plus mean CTC loss over the batch.
class CtcHead {
 public:
  CtcHead(CtcConfig cfg, int64_t model_dim, uint64_t seed);
  Var loss(Tape& t, Var taps_last, const std::vector<std::vector<int>>& targets);
  Var logits(Tape& t, Var taps_last);
  const CtcConfig& config() const { return cfg_; }
  ParamRefs params();

 private:
  CtcConfig cfg_;
  Linear proj_;
};

}  // namespace mfas
