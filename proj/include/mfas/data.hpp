#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfas/audio.hpp"
#include "mfas/errors.hpp"

namespace mfas {

inline constexpr int kNumClasses = 4;

// 4-way inventory; "excited" folds into happy at ingest.
int class_from_name(const std::string& name);
const char* class_name(int klass);

struct ManifestRecord {
  std::string audio_path;
  std::string utterance_id;
  std::string speaker_id;
  std::string session_id;
  int klass = 0;
  double v = 0, a = 0, d = 0;
  std::vector<int> transcript_tokens;

  nlohmann::json to_json() const;
  static ManifestRecord from_json(const nlohmann::json& j);
};

// One record per line; duplicate ids and unknown classes are rejected and
// referenced audio must exist on disk.
std::vector<ManifestRecord> load_manifest(const std::string& path);
void save_manifest(const std::vector<ManifestRecord>& records, const std::string& path);

struct ToyConfig {
  int64_t n_utterances = 40;
  uint64_t seed = 1;
  std::string out_dir;
  // class signal lives only in the token motif; pitch and energy are random
  bool rigged_text_only = false;
  double duration_s = 1.5;
  double noise_level = 0.02;
};

// Synthesizes 16 kHz utterances over 10 speakers in 5 sessions. Class is
// encoded in the pitch contour and in a planted 3-token motif rendered as
// tone bursts; A is an exact affine function of the mean pitch parameter.
std::vector<ManifestRecord> generate_toy_dataset(const ToyConfig& cfg);

enum class CvStrategy { LeaveOneSession, LeaveOneSpeaker };

struct CvFold {
  std::string held_out_key;
  std::vector<size_t> train_indices;
  std::vector<size_t> test_indices;
};

struct CvPlan {
  CvStrategy strategy;
  std::vector<CvFold> folds;
};

CvPlan make_cv_plan(const std::vector<ManifestRecord>& records, CvStrategy strategy);

// Deterministic stratified split of `indices`; the second part gets
// ~holdout_frac of each class.
std::pair<std::vector<size_t>, std::vector<size_t>> stratified_split(
    const std::vector<ManifestRecord>& records, const std::vector<size_t>& indices,
    double holdout_frac, uint64_t seed);

struct MetricsReport {
  double ua = 0, wa = 0;
  double mse_v = 0, mse_a = 0, mse_d = 0;
  bool has_mse = false;

  nlohmann::json to_json() const;
};

// UA is the mean per-class recall over classes present in the labels; WA is
// plain accuracy. Regression columns are per-dimension mean squared errors.
MetricsReport compute_metrics(const std::vector<int>& predictions,
                              const std::vector<int>& labels,
                              const std::vector<std::array<double, 3>>* vad_pred = nullptr,
                              const std::vector<std::array<double, 3>>* vad_true = nullptr);

}  // namespace mfas
