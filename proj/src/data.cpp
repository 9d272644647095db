#include "mfas/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>

namespace fs = std::filesystem;

namespace mfas {

namespace {
const char* kClassNames[kNumClasses] = {"angry", "sad", "happy", "neutral"};
}

int class_from_name(const std::string& name) {
  if (name == "excited") return class_from_name("happy");
  for (int i = 0; i < kNumClasses; ++i)
    if (name == kClassNames[i]) return i;
  throw DataError("unknown emotion class: " + name);
}

const char* class_name(int klass) {
  if (klass < 0 || klass >= kNumClasses) throw DataError("class index out of range");
  return kClassNames[klass];
}

nlohmann::json ManifestRecord::to_json() const {
  nlohmann::json j = {{"audio_path", audio_path}, {"utterance_id", utterance_id},
                      {"speaker_id", speaker_id}, {"session_id", session_id},
                      {"class", class_name(klass)}, {"v", v},
                      {"a", a},                   {"d", d}};
  if (!transcript_tokens.empty()) j["transcript_tokens"] = transcript_tokens;
  return j;
}

ManifestRecord ManifestRecord::from_json(const nlohmann::json& j) {
  ManifestRecord r;
  r.audio_path = j.at("audio_path").get<std::string>();
  r.utterance_id = j.at("utterance_id").get<std::string>();
  r.speaker_id = j.at("speaker_id").get<std::string>();
  r.session_id = j.at("session_id").get<std::string>();
  r.klass = class_from_name(j.at("class").get<std::string>());
  r.v = j.value("v", 0.0);
  r.a = j.value("a", 0.0);
  r.d = j.value("d", 0.0);
  if (j.contains("transcript_tokens"))
    r.transcript_tokens = j.at("transcript_tokens").get<std::vector<int>>();
  if (r.speaker_id.empty() || r.session_id.empty())
    throw DataError("record " + r.utterance_id + ": empty speaker or session");
  return r;
}

std::vector<ManifestRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  fs::path base = fs::path(path).parent_path();

  std::vector<ManifestRecord> records;
  std::set<std::string> seen;
  std::vector<std::string> missing;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestRecord r;
    try {
      r = ManifestRecord::from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen.insert(r.utterance_id).second)
      throw DataError(path + ":" + std::to_string(line_no) + ": duplicate utterance_id " +
                      r.utterance_id);
    fs::path audio = fs::path(r.audio_path);
    if (audio.is_relative()) audio = base / audio;
    r.audio_path = audio.string();
    if (!fs::exists(audio)) missing.push_back(r.audio_path);
    records.push_back(std::move(r));
  }
  if (!missing.empty()) {
    std::string msg = "missing audio files:";
    for (const std::string& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }
  if (records.empty()) std::cerr << "warning: manifest " << path << " is empty\n";
  return records;
}

void save_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path);
  for (const ManifestRecord& r : records) out << r.to_json().dump() << "\n";
}

std::vector<ManifestRecord> generate_toy_dataset(const ToyConfig& cfg) {
  if (cfg.n_utterances < 40) throw InputError("toy dataset needs at least 40 utterances");
  if (cfg.out_dir.empty()) throw InputError("toy dataset needs an output directory");
  fs::create_directories(fs::path(cfg.out_dir) / "audio");

  int64_t n_samples = static_cast<int64_t>(cfg.duration_s * kSampleRate);
  std::vector<ManifestRecord> records;
  std::ofstream params_out(fs::path(cfg.out_dir) / "toy_params.jsonl");
  for (int64_t u = 0; u < cfg.n_utterances; ++u) {
    std::mt19937_64 rng(cfg.seed * 1000003 + static_cast<uint64_t>(u));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    int klass = static_cast<int>(u % kNumClasses);
    int speaker = static_cast<int>(u % 10);
    int session = speaker / 2;

    // planted parameters; class drives them unless the task is rigged
    double f0_mean, slope, amp;
    if (cfg.rigged_text_only) {
      f0_mean = 110.0 + 180.0 * unit(rng);
      slope = -0.4 + 0.8 * unit(rng);
      amp = 0.15 + 0.20 * unit(rng);
    } else {
      static const double kSlopes[kNumClasses] = {0.3, -0.3, 0.0, 0.15};
      f0_mean = 110.0 + 45.0 * klass + 20.0 * (unit(rng) - 0.5);
      slope = kSlopes[klass];
      amp = 0.15 + 0.05 * klass + 0.04 * (unit(rng) - 0.5);
    }

    ManifestRecord r;
    r.utterance_id = "u" + std::to_string(u);
    r.audio_path = "audio/" + r.utterance_id + ".wav";
    r.speaker_id = "spk" + std::to_string(speaker);
    r.session_id = "ses" + std::to_string(session);
    r.klass = klass;
    r.a = (f0_mean - 100.0) / 200.0;  // exact affine in the pitch parameter
    r.v = (amp - 0.1) / 0.4;
    r.d = 0.5 + slope;
    for (int rep = 0; rep < 2; ++rep)
      for (int k = 0; k < 3; ++k) r.transcript_tokens.push_back(3 * klass + k + 1);

    // voiced carrier: three-harmonic chirp following the pitch contour
    Waveform w;
    w.samples.assign(static_cast<size_t>(n_samples), 0.0);
    double phase = 0.0;
    for (int64_t i = 0; i < n_samples; ++i) {
      double tt = static_cast<double>(i) / kSampleRate;
      double f0 = f0_mean * (1.0 + slope * (tt / cfg.duration_s - 0.5));
      phase += 2.0 * M_PI * f0 / kSampleRate;
      double s = 0.0, h_amp = 1.0;
      for (int h = 1; h <= 3; ++h, h_amp *= 0.5) s += h_amp * std::sin(phase * h);
      w.samples[static_cast<size_t>(i)] = amp * s / 1.75;
    }

    // the token motif as tone bursts spread across the utterance
    int64_t burst = static_cast<int64_t>(0.12 * kSampleRate);
    int64_t n_tok = static_cast<int64_t>(r.transcript_tokens.size());
    for (int64_t ti = 0; ti < n_tok; ++ti) {
      int tok = r.transcript_tokens[static_cast<size_t>(ti)];
      double freq = 400.0 + 150.0 * tok;
      int64_t start = (n_samples - burst) * ti / std::max<int64_t>(n_tok - 1, 1);
      for (int64_t i = 0; i < burst && start + i < n_samples; ++i) {
        double env = std::sin(M_PI * static_cast<double>(i) / static_cast<double>(burst));
        w.samples[static_cast<size_t>(start + i)] +=
            0.2 * env * std::sin(2.0 * M_PI * freq * static_cast<double>(i) / kSampleRate);
      }
    }

    std::normal_distribution<double> noise(0.0, cfg.noise_level);
    double peak = 0.0;
    for (double& s : w.samples) {
      s += noise(rng);
      peak = std::max(peak, std::abs(s));
    }
    if (peak > 0.9)
      for (double& s : w.samples) s *= 0.9 / peak;

    write_wav((fs::path(cfg.out_dir) / r.audio_path).string(), w);
    // planted parameters, for probes that need the ground-truth drivers
    params_out << nlohmann::json{{"utterance_id", r.utterance_id},
                                 {"f0_mean", f0_mean},
                                 {"slope", slope},
                                 {"amp", amp}}
                      .dump()
               << "\n";
    records.push_back(std::move(r));
  }
  save_manifest(records, (fs::path(cfg.out_dir) / "manifest.jsonl").string());
  return records;
}

CvPlan make_cv_plan(const std::vector<ManifestRecord>& records, CvStrategy strategy) {
  std::set<std::string> keys;
  auto key_of = [&](const ManifestRecord& r) -> const std::string& {
    return strategy == CvStrategy::LeaveOneSession ? r.session_id : r.speaker_id;
  };
  for (const ManifestRecord& r : records) keys.insert(key_of(r));
  if (keys.size() < 2) throw ConfigError("cross-validation needs at least 2 distinct keys");

  CvPlan plan;
  plan.strategy = strategy;
  for (const std::string& key : keys) {
    CvFold fold;
    fold.held_out_key = key;
    for (size_t i = 0; i < records.size(); ++i)
      (key_of(records[i]) == key ? fold.test_indices : fold.train_indices).push_back(i);
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

std::pair<std::vector<size_t>, std::vector<size_t>> stratified_split(
    const std::vector<ManifestRecord>& records, const std::vector<size_t>& indices,
    double holdout_frac, uint64_t seed) {
  std::vector<std::vector<size_t>> by_class(kNumClasses);
  for (size_t i : indices) by_class[static_cast<size_t>(records[i].klass)].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<size_t> train, held;
  for (auto& group : by_class) {
    std::shuffle(group.begin(), group.end(), rng);
    size_t n_held = group.size() >= 2
                        ? std::max<size_t>(1, static_cast<size_t>(
                                                  std::lround(holdout_frac * group.size())))
                        : 0;
    for (size_t i = 0; i < group.size(); ++i)
      (i < n_held ? held : train).push_back(group[i]);
  }
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());
  return {train, held};
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = {{"ua", ua}, {"wa", wa}};
  if (has_mse) {
    j["mse_v"] = mse_v;
    j["mse_a"] = mse_a;
    j["mse_d"] = mse_d;
  }
  return j;
}

MetricsReport compute_metrics(const std::vector<int>& predictions,
                              const std::vector<int>& labels,
                              const std::vector<std::array<double, 3>>* vad_pred,
                              const std::vector<std::array<double, 3>>* vad_true) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw InputError("compute_metrics: need equal, nonempty prediction and label lists");
  std::array<int64_t, kNumClasses> total{}, correct{};
  int64_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    int y = labels[i], p = predictions[i];
    if (y < 0 || y >= kNumClasses || p < 0 || p >= kNumClasses)
      throw InputError("compute_metrics: class index out of range");
    total[static_cast<size_t>(y)]++;
    if (p == y) {
      correct[static_cast<size_t>(y)]++;
      ++hits;
    }
  }
  MetricsReport m;
  m.wa = static_cast<double>(hits) / static_cast<double>(labels.size());
  double recall_sum = 0;
  int present = 0;
  for (int c = 0; c < kNumClasses; ++c)
    if (total[static_cast<size_t>(c)] > 0) {
      recall_sum += static_cast<double>(correct[static_cast<size_t>(c)]) /
                    static_cast<double>(total[static_cast<size_t>(c)]);
      ++present;
    }
  m.ua = recall_sum / present;

  if (vad_pred && vad_true) {
    if (vad_pred->size() != vad_true->size() || vad_pred->empty())
      throw InputError("compute_metrics: regression list size mismatch");
    double se[3] = {0, 0, 0};
    for (size_t i = 0; i < vad_pred->size(); ++i)
      for (int k = 0; k < 3; ++k) {
        double d = (*vad_pred)[i][static_cast<size_t>(k)] -
                   (*vad_true)[i][static_cast<size_t>(k)];
        se[k] += d * d;
      }
    m.mse_v = se[0] / static_cast<double>(vad_pred->size());
    m.mse_a = se[1] / static_cast<double>(vad_pred->size());
    m.mse_d = se[2] / static_cast<double>(vad_pred->size());
    m.has_mse = true;
  }
  return m;
}

}  // namespace mfas
