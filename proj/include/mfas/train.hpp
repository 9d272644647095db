#pragma once

#include "mfas/checkpoint.hpp"
#include "mfas/coattention.hpp"
#include "mfas/data.hpp"
#include "mfas/fusion.hpp"
#include "mfas/pretrain.hpp"

namespace mfas {

struct RunConfig {
  std::string manifest;
  std::string out_dir;
  std::string objective = "quantized";  // quantized | continuous | ctc
  double model_lr = 1e-5;
  double alpha_lr = 5.0;
  double probe_lr = 1e-3;
  int64_t batch_size = 8;
  int64_t epochs = 10;
  uint64_t seed = 1;
  bool probe = false;          // train the detached emotion probe alongside
  double holdout_frac = 0.2;   // validation share for alpha updates and probing
  std::string cv = "session";  // session | speaker

  EncoderConfig encoder;
  CodebookConfig codebook;
  ContinuousTargetConfig continuous;
  CtcConfig ctc;
  HeadConfig head;
  FusionCellConfig fusion;

  void validate() const;
  CvStrategy cv_strategy() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
  std::vector<double> epoch_loss;
  std::vector<MetricsReport> probe_reports;  // one per epoch when probing
  std::string checkpoint_path;
};

// Masked pretraining under the configured objective; optionally trains the
// stop-gradient emotion probe and reports its held-out metrics per epoch.
PretrainResult run_pretrain(const RunConfig& cfg);

// Frozen per-segment features for the search and derive phases.
struct SegmentFeatures {
  size_t record_index = 0;
  std::array<Tensor, kNumLevels> taps;  // speech extractor, [T, D] per level
  Tensor x_t;                           // text extractor target tap, [T, D]
  Tensor spec;                          // [spec_h, spec_w]
};

std::vector<SegmentFeatures> extract_features(const std::vector<ManifestRecord>& records,
                                              const std::string& speech_ckpt,
                                              const std::string& text_ckpt);

struct SearchResult {
  FusionStrategy strategy;
  std::vector<nlohmann::json> alpha_history;
  std::map<Level, LevelScore> level_scores;
  std::string strategy_path;
};

// Alternating first-order search: model weights on training batches with the
// adaptive optimizer, alpha on held-out batches with plain gradient descent.
SearchResult run_search(const RunConfig& cfg, const std::string& speech_ckpt,
                        const std::string& text_ckpt);

struct EvalReport {
  std::vector<std::pair<std::string, MetricsReport>> per_fold;
  MetricsReport mean;

  nlohmann::json to_json() const;
};

// Retrains the derived single-path model per cross-validation fold and
// evaluates each held-out fold.
EvalReport run_derive_train_eval(const RunConfig& cfg, const FusionStrategy& strategy,
                                 const std::string& speech_ckpt,
                                 const std::string& text_ckpt);

struct DeriveResult {
  std::string meta_path;  // strategy plus per-fold checkpoint listing
  std::vector<std::string> fold_checkpoints;
};

// Trains the derived single-path model per fold and saves each fold's fusion
// and head weights; evaluation is a separate pass over the saved models.
DeriveResult run_derive_train(const RunConfig& cfg, const FusionStrategy& strategy,
                              const std::string& speech_ckpt, const std::string& text_ckpt);

EvalReport run_eval(const RunConfig& cfg, const std::string& derived_meta,
                    const std::string& speech_ckpt, const std::string& text_ckpt);

struct FoldStrategy {
  std::string fold_name;
  FusionStrategy strategy;
  Tensor alpha;  // [3, 8] final logits
};

// Figure-3-style grid: one group per fold, rows target/deep/raw, eight
// operation columns, chosen cells filled. Deterministic SVG bytes.
void export_strategy_grid(const std::vector<FoldStrategy>& folds, const std::string& path);

}  // namespace mfas
