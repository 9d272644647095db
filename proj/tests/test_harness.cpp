#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mfas/train.hpp"

using namespace mfas;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mfas_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

EncoderConfig toy_encoder() {
  EncoderConfig e;  // production conv geometry, slim dimensions
  e.conv_channels = 8;
  e.n_layers = 2;
  e.model_dim = 16;
  e.ffn_dim = 32;
  e.n_heads = 2;
  e.max_frames = 160;
  return e;
}

HeadConfig toy_head() {
  HeadConfig h;
  h.n_guides = 2;
  h.mlp_hidden = {16};
  h.dropout = 0.0;
  h.conv_channels = {2, 4, 4, 4, 4};
  return h;
}

// counting-based recount, written independently of compute_metrics
MetricsReport recount(const std::vector<int>& pred, const std::vector<int>& labels) {
  int64_t confusion[kNumClasses][kNumClasses] = {};
  for (size_t i = 0; i < labels.size(); ++i) confusion[labels[i]][pred[i]]++;
  MetricsReport m;
  int64_t diag = 0, all = 0;
  int present = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    int64_t row = 0;
    for (int p = 0; p < kNumClasses; ++p) row += confusion[c][p];
    diag += confusion[c][c];
    all += row;
    if (row > 0) {
      m.ua += static_cast<double>(confusion[c][c]) / static_cast<double>(row);
      ++present;
    }
  }
  m.ua /= present;
  m.wa = static_cast<double>(diag) / static_cast<double>(all);
  return m;
}

}  // namespace

TEST_CASE("class names: four-way inventory with the excited merge") {
  CHECK(class_from_name("angry") == 0);
  CHECK(class_from_name("sad") == 1);
  CHECK(class_from_name("happy") == 2);
  CHECK(class_from_name("neutral") == 3);
  CHECK(class_from_name("excited") == class_from_name("happy"));
  CHECK_THROWS_AS(class_from_name("bored"), DataError);
  CHECK(std::string(class_name(2)) == "happy");
}

TEST_CASE("manifest round trip, excited remap, and rejection paths") {
  fs::path dir = fresh_dir("manifest");
  Waveform w;
  w.samples.assign(1600, 0.1);
  write_wav((dir / "a.wav").string(), w);
  write_wav((dir / "b.wav").string(), w);

  std::ofstream out(dir / "manifest.jsonl");
  out << R"({"audio_path":"a.wav","utterance_id":"u1","speaker_id":"s1","session_id":"x1","class":"excited","v":0.1,"a":0.2,"d":0.3})"
      << "\n";
  out << R"({"audio_path":"b.wav","utterance_id":"u2","speaker_id":"s2","session_id":"x1","class":"sad","transcript_tokens":[1,2]})"
      << "\n";
  out.close();

  auto records = load_manifest((dir / "manifest.jsonl").string());
  REQUIRE(records.size() == 2);
  CHECK(records[0].klass == class_from_name("happy"));
  CHECK(records[0].a == 0.2);
  CHECK(records[1].transcript_tokens == std::vector<int>{1, 2});
  CHECK(fs::path(records[0].audio_path).is_absolute());

  {
    std::ofstream bad(dir / "dup.jsonl");
    bad << records[0].to_json().dump() << "\n" << records[0].to_json().dump() << "\n";
  }
  CHECK_THROWS_AS(load_manifest((dir / "dup.jsonl").string()), DataError);

  {
    std::ofstream bad(dir / "parse.jsonl");
    bad << "{not json}\n";
  }
  try {
    load_manifest((dir / "parse.jsonl").string());
    FAIL("expected parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":1:") != std::string::npos);
  }

  {
    std::ofstream bad(dir / "missing.jsonl");
    bad << R"({"audio_path":"ghost.wav","utterance_id":"u9","speaker_id":"s","session_id":"x","class":"sad"})"
        << "\n";
  }
  CHECK_THROWS_AS(load_manifest((dir / "missing.jsonl").string()), DataError);

  { std::ofstream empty(dir / "empty.jsonl"); }
  CHECK(load_manifest((dir / "empty.jsonl").string()).empty());
}

TEST_CASE("toy dataset: determinism, balance, and the planted affine arousal") {
  ToyConfig cfg;
  cfg.n_utterances = 40;
  cfg.seed = 7;
  cfg.out_dir = fresh_dir("toy1").string();
  auto records = generate_toy_dataset(cfg);
  REQUIRE(records.size() == 40);

  ToyConfig cfg2 = cfg;
  cfg2.out_dir = fresh_dir("toy2").string();
  generate_toy_dataset(cfg2);
  for (int u = 0; u < 40; u += 9)
    CHECK(read_file(fs::path(cfg.out_dir) / "audio" / ("u" + std::to_string(u) + ".wav")) ==
          read_file(fs::path(cfg2.out_dir) / "audio" / ("u" + std::to_string(u) + ".wav")));

  std::array<int, kNumClasses> counts{};
  std::set<std::string> speakers, sessions;
  for (const auto& r : records) {
    counts[static_cast<size_t>(r.klass)]++;
    speakers.insert(r.speaker_id);
    sessions.insert(r.session_id);
    REQUIRE(r.transcript_tokens.size() == 6);
    for (int tok : r.transcript_tokens) {
      CHECK(tok >= 3 * r.klass + 1);
      CHECK(tok <= 3 * r.klass + 3);
    }
  }
  int lo = *std::min_element(counts.begin(), counts.end());
  int hi = *std::max_element(counts.begin(), counts.end());
  CHECK(hi - lo <= 1);
  CHECK(speakers.size() == 10);
  CHECK(sessions.size() == 5);

  // least-squares fit of A on the planted pitch parameter is (near) exact
  std::map<std::string, double> f0;
  std::ifstream params(fs::path(cfg.out_dir) / "toy_params.jsonl");
  std::string line;
  while (std::getline(params, line)) {
    auto j = nlohmann::json::parse(line);
    f0[j.at("utterance_id")] = j.at("f0_mean").get<double>();
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : records) {
    double x = f0.at(r.utterance_id);
    sx += x;
    sy += r.a;
    sxx += x * x;
    sxy += x * r.a;
  }
  double n = 40.0;
  double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  double intercept = (sy - slope * sx) / n;
  double mse = 0;
  for (const auto& r : records) {
    double e = r.a - (slope * f0.at(r.utterance_id) + intercept);
    mse += e * e / n;
  }
  CHECK(mse < 0.05);

  ToyConfig small = cfg;
  small.n_utterances = 12;
  CHECK_THROWS_AS(generate_toy_dataset(small), InputError);
}

TEST_CASE("cross-validation plans partition the dataset") {
  ToyConfig cfg;
  cfg.n_utterances = 40;
  cfg.seed = 3;
  cfg.out_dir = fresh_dir("toycv").string();
  auto records = generate_toy_dataset(cfg);

  for (CvStrategy strat : {CvStrategy::LeaveOneSession, CvStrategy::LeaveOneSpeaker}) {
    CvPlan plan = make_cv_plan(records, strat);
    CHECK(plan.folds.size() == (strat == CvStrategy::LeaveOneSession ? 5u : 10u));
    std::vector<int> seen(records.size(), 0);
    for (const CvFold& fold : plan.folds) {
      for (size_t i : fold.test_indices) seen[i]++;
      CHECK(fold.train_indices.size() + fold.test_indices.size() == records.size());
    }
    for (int s : seen) CHECK(s == 1);  // pairwise disjoint, full cover
  }

  std::vector<ManifestRecord> one_key(records.begin(), records.begin() + 2);
  one_key[1].session_id = one_key[0].session_id;
  one_key[1].speaker_id = one_key[0].speaker_id;
  CHECK_THROWS_AS(make_cv_plan(one_key, CvStrategy::LeaveOneSession), ConfigError);
}

TEST_CASE("stratified split is a deterministic class-balanced partition") {
  ToyConfig cfg;
  cfg.n_utterances = 40;
  cfg.seed = 4;
  cfg.out_dir = fresh_dir("toysplit").string();
  auto records = generate_toy_dataset(cfg);
  std::vector<size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);

  auto [train, held] = stratified_split(records, idx, 0.2, 99);
  CHECK(train.size() + held.size() == records.size());
  std::set<size_t> uni(train.begin(), train.end());
  uni.insert(held.begin(), held.end());
  CHECK(uni.size() == records.size());
  std::array<int, kNumClasses> held_counts{};
  for (size_t i : held) held_counts[static_cast<size_t>(records[i].klass)]++;
  for (int c : held_counts) CHECK(c == 2);  // 20% of 10 per class

  auto [train2, held2] = stratified_split(records, idx, 0.2, 99);
  CHECK(train == train2);
  CHECK(held == held2);
}

TEST_CASE("metrics: worked example, boundaries, and the recount oracle") {
  // class 0: 2/3 correct, class 1: 1/1 correct
  MetricsReport m = compute_metrics({0, 0, 1, 1}, {0, 0, 0, 1});
  CHECK(m.ua == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(m.wa == doctest::Approx(0.75).epsilon(1e-12));

  MetricsReport perfect = compute_metrics({2, 3, 1}, {2, 3, 1});
  CHECK(perfect.ua == 1.0);
  CHECK(perfect.wa == 1.0);

  CHECK_THROWS_AS(compute_metrics({}, {}), InputError);
  CHECK_THROWS_AS(compute_metrics({0}, {0, 1}), InputError);
  CHECK_THROWS_AS(compute_metrics({7}, {0}), InputError);

  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    std::uniform_int_distribution<int> len(1, 50), cls(0, kNumClasses - 1);
    int n = len(rng);
    std::vector<int> pred, labels;
    for (int i = 0; i < n; ++i) {
      pred.push_back(cls(rng));
      labels.push_back(cls(rng));
    }
    MetricsReport a = compute_metrics(pred, labels);
    MetricsReport b = recount(pred, labels);
    CHECK(std::abs(a.ua - b.ua) <= 1e-12);
    CHECK(std::abs(a.wa - b.wa) <= 1e-12);
  }

  std::vector<std::array<double, 3>> vp = {{0.5, 0.5, 0.5}}, vt = {{0.0, 0.5, 1.5}};
  MetricsReport r = compute_metrics({0}, {0}, &vp, &vt);
  CHECK(r.has_mse);
  CHECK(r.mse_v == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(r.mse_a == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.mse_d == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("run config serialization keeps the paper's optimizer split") {
  RunConfig cfg;
  CHECK(cfg.model_lr == 1e-5);
  CHECK(cfg.alpha_lr == 5.0);
  cfg.objective = "continuous";
  cfg.encoder = toy_encoder();
  cfg.head = toy_head();
  cfg.seed = 31;
  RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.objective == "continuous");
  CHECK(back.encoder.model_dim == 16);
  CHECK(back.head.conv_channels == toy_head().conv_channels);
  CHECK(back.seed == 31);

  RunConfig bad = cfg;
  bad.objective = "masked";
  bad.manifest = "m.jsonl";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("strategy grid export is deterministic and rejects empty input") {
  fs::path dir = fresh_dir("grid");
  CHECK_THROWS_AS(export_strategy_grid({}, (dir / "g.svg").string()), InputError);
  CHECK(!fs::exists(dir / "g.svg"));

  std::vector<FoldStrategy> folds;
  for (int f = 0; f < 10; ++f) {
    FoldStrategy fsy;
    fsy.fold_name = "fold" + std::to_string(f);
    fsy.strategy.op_per_level = {OperationId::Sum, OperationId::AttentionR,
                                 OperationId::Ism};
    fsy.strategy.selected_level = Level::Target;
    fsy.alpha = Tensor::zeros({kNumLevels, kNumOps});
    folds.push_back(std::move(fsy));
  }
  export_strategy_grid(folds, (dir / "grid.svg").string());
  export_strategy_grid(folds, (dir / "grid2.svg").string());
  std::string svg = read_file(dir / "grid.svg");
  CHECK(svg == read_file(dir / "grid2.svg"));
  CHECK(svg.find("<svg") == 0);
  size_t rects = 0, pos = 0;
  while ((pos = svg.find("<rect", pos)) != std::string::npos) {
    ++rects;
    ++pos;
  }
  CHECK(rects == 10u * kNumLevels * kNumOps);
  CHECK(svg.find("fold9") != std::string::npos);
  CHECK(svg.find("#cc2222") != std::string::npos);  // highlighted best strategy
}

TEST_CASE("pretrain smoke: one quantized epoch trains and checkpoints") {
  ToyConfig toy;
  toy.n_utterances = 40;
  toy.seed = 11;
  toy.out_dir = fresh_dir("pretrain_smoke").string();
  generate_toy_dataset(toy);

  RunConfig cfg;
  cfg.manifest = toy.out_dir + "/manifest.jsonl";
  cfg.out_dir = toy.out_dir + "/run";
  cfg.objective = "quantized";
  cfg.encoder = toy_encoder();
  cfg.head = toy_head();
  cfg.codebook.n_books = 2;
  cfg.codebook.n_words = 4;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.model_lr = 1e-3;
  cfg.seed = 5;

  PretrainResult res = run_pretrain(cfg);
  REQUIRE(res.epoch_loss.size() == 1);
  CHECK(std::isfinite(res.epoch_loss[0]));
  CHECK(fs::exists(res.checkpoint_path));

  Checkpoint ck = Checkpoint::load(res.checkpoint_path);
  CHECK(ck.kind == "mfas.encoder");
  CHECK(ck.config.at("objective") == "quantized");
  CHECK(ck.tensors.count("enc.mask_token") == 1);
}
