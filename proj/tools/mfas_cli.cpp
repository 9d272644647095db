#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mfas/train.hpp"

namespace fs = std::filesystem;
using namespace mfas;

namespace {

RunConfig load_run_config(const std::string& config_path) {
  if (config_path.empty()) return RunConfig{};
  std::ifstream in(config_path);
  if (!in) throw ConfigError("cannot open config: " + config_path);
  try {
    return RunConfig::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + config_path + ": " + e.what());
  }
}

// flag overrides are registered on top of whatever the config file set
void add_run_overrides(CLI::App* cmd, std::string& config_path, RunConfig& cfg) {
  cmd->add_option("--config", config_path, "run configuration file (JSON)");
  cmd->add_option("--manifest", cfg.manifest, "dataset manifest (JSONL)");
  cmd->add_option("--out-dir", cfg.out_dir, "output directory");
  cmd->add_option("--objective", cfg.objective, "quantized | continuous | ctc");
  cmd->add_option("--epochs", cfg.epochs, "training epochs");
  cmd->add_option("--batch-size", cfg.batch_size, "segments per batch");
  cmd->add_option("--seed", cfg.seed, "run seed");
  cmd->add_option("--model-lr", cfg.model_lr, "model weight learning rate");
  cmd->add_option("--alpha-lr", cfg.alpha_lr, "architecture weight learning rate");
  cmd->add_option("--probe-lr", cfg.probe_lr, "probe head learning rate");
  cmd->add_option("--cv", cfg.cv, "session | speaker");
}

void print_report(const EvalReport& report) {
  std::cout << "fold            UA      WA\n";
  for (const auto& [name, m] : report.per_fold) {
    std::printf("%-12s %7.4f %7.4f\n", name.c_str(), m.ua, m.wa);
  }
  std::printf("%-12s %7.4f %7.4f\n", "mean", report.mean.ua, report.mean.wa);
}

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"MFAS speech-emotion framework: pretraining, fusion search, evaluation"};
  app.require_subcommand(1);

  // gen-toy
  auto* gen = app.add_subcommand("gen-toy", "synthesize the toy dataset");
  ToyConfig toy;
  gen->add_option("--out-dir", toy.out_dir, "dataset directory")->required();
  gen->add_option("--n", toy.n_utterances, "number of utterances");
  gen->add_option("--seed", toy.seed, "generator seed");
  gen->add_option("--duration", toy.duration_s, "utterance length in seconds");
  gen->add_flag("--rigged-text-only", toy.rigged_text_only,
                "class signal only in the token motif");

  RunConfig cfg;
  std::string config_path, speech_ckpt, text_ckpt, strategy_path, derived_meta;

  auto* pretrain = app.add_subcommand("pretrain", "masked pretraining");
  add_run_overrides(pretrain, config_path, cfg);
  bool probe_flag = false;
  pretrain->add_flag("--probe", probe_flag, "train the detached emotion probe too");

  auto* probe = app.add_subcommand("probe", "pretraining with the emotion probe attached");
  add_run_overrides(probe, config_path, cfg);

  auto* search = app.add_subcommand("search", "differentiable fusion-strategy search");
  add_run_overrides(search, config_path, cfg);
  search->add_option("--speech-ckpt", speech_ckpt, "continuous-pretrained extractor")
      ->required();
  search->add_option("--text-ckpt", text_ckpt, "quantized/ctc-pretrained extractor")
      ->required();

  auto* derive = app.add_subcommand("derive", "train the derived single-path model per fold");
  add_run_overrides(derive, config_path, cfg);
  derive->add_option("--strategy", strategy_path, "strategy.json from search")->required();
  derive->add_option("--speech-ckpt", speech_ckpt, "continuous-pretrained extractor")
      ->required();
  derive->add_option("--text-ckpt", text_ckpt, "quantized/ctc-pretrained extractor")
      ->required();

  auto* eval = app.add_subcommand("eval", "score saved derived models on held-out folds");
  add_run_overrides(eval, config_path, cfg);
  eval->add_option("--derived", derived_meta, "derived.json from the derive step")
      ->required();
  eval->add_option("--speech-ckpt", speech_ckpt, "continuous-pretrained extractor")
      ->required();
  eval->add_option("--text-ckpt", text_ckpt, "quantized/ctc-pretrained extractor")
      ->required();

  auto* plot = app.add_subcommand("plot-grid", "render strategy grids as SVG");
  std::vector<std::string> strategy_files;
  std::string grid_out;
  plot->add_option("--strategy", strategy_files, "strategy.json files, one per fold")
      ->required();
  plot->add_option("--out", grid_out, "output image path")->required();

  auto* report = app.add_subcommand("report", "print a saved evaluation report");
  std::string report_path;
  report->add_option("--eval", report_path, "eval report JSON")->required();

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    auto records = generate_toy_dataset(toy);
    std::cout << "wrote " << records.size() << " utterances to " << toy.out_dir << "\n";
    return 0;
  }

  // flags override the config file only when explicitly provided
  auto merge_for = [&](CLI::App* cmd) {
    RunConfig merged = load_run_config(config_path);
    if (cmd->count("--manifest")) merged.manifest = cfg.manifest;
    if (cmd->count("--out-dir")) merged.out_dir = cfg.out_dir;
    if (cmd->count("--objective")) merged.objective = cfg.objective;
    if (cmd->count("--epochs")) merged.epochs = cfg.epochs;
    if (cmd->count("--batch-size")) merged.batch_size = cfg.batch_size;
    if (cmd->count("--seed")) merged.seed = cfg.seed;
    if (cmd->count("--model-lr")) merged.model_lr = cfg.model_lr;
    if (cmd->count("--alpha-lr")) merged.alpha_lr = cfg.alpha_lr;
    if (cmd->count("--probe-lr")) merged.probe_lr = cfg.probe_lr;
    if (cmd->count("--cv")) merged.cv = cfg.cv;
    return merged;
  };

  if (pretrain->parsed() || probe->parsed()) {
    RunConfig merged = merge_for(pretrain->parsed() ? pretrain : probe);
    if (probe->parsed() || probe_flag) merged.probe = true;

    PretrainResult res = run_pretrain(merged);
    nlohmann::json out = {{"epoch_loss", res.epoch_loss},
                          {"checkpoint", res.checkpoint_path}};
    for (size_t e = 0; e < res.epoch_loss.size(); ++e) {
      std::cout << "epoch " << e << " loss " << res.epoch_loss[e];
      if (e < res.probe_reports.size()) {
        const MetricsReport& m = res.probe_reports[e];
        std::printf("  probe UA %.4f WA %.4f MSE(V/A/D) %.4f/%.4f/%.4f", m.ua, m.wa,
                    m.mse_v, m.mse_a, m.mse_d);
      }
      std::cout << "\n";
    }
    if (!res.probe_reports.empty()) {
      nlohmann::json probes = nlohmann::json::array();
      for (const MetricsReport& m : res.probe_reports) probes.push_back(m.to_json());
      out["probe_reports"] = probes;
    }
    write_json(out, (fs::path(merged.out_dir) / "pretrain_report.json").string());
    std::cout << "checkpoint: " << res.checkpoint_path << "\n";
    return 0;
  }

  if (search->parsed()) {
    RunConfig merged = merge_for(search);
    SearchResult res = run_search(merged, speech_ckpt, text_ckpt);
    std::cout << "derived strategy: " << res.strategy.to_json().dump() << "\n";
    std::cout << "written to " << res.strategy_path << "\n";
    return 0;
  }

  if (derive->parsed()) {
    RunConfig merged = merge_for(derive);
    std::ifstream in(strategy_path);
    if (!in) throw StateError("cannot open strategy: " + strategy_path);
    nlohmann::json j = nlohmann::json::parse(in);
    FusionStrategy strategy =
        FusionStrategy::from_json(j.contains("strategy") ? j.at("strategy") : j);
    DeriveResult res = run_derive_train(merged, strategy, speech_ckpt, text_ckpt);
    std::cout << "trained " << res.fold_checkpoints.size() << " fold models\n";
    std::cout << "written to " << res.meta_path << "\n";
    return 0;
  }

  if (eval->parsed()) {
    RunConfig merged = merge_for(eval);
    EvalReport report = run_eval(merged, derived_meta, speech_ckpt, text_ckpt);
    print_report(report);
    if (!merged.out_dir.empty()) {
      fs::create_directories(merged.out_dir);
      write_json(report.to_json(), (fs::path(merged.out_dir) / "eval_report.json").string());
    }
    return 0;
  }

  if (plot->parsed()) {
    std::vector<FoldStrategy> folds;
    for (const std::string& file : strategy_files) {
      std::ifstream in(file);
      if (!in) throw DataError("cannot open strategy file: " + file);
      nlohmann::json j = nlohmann::json::parse(in);
      FoldStrategy fsy;
      fsy.fold_name = fs::path(file).parent_path().filename().string();
      if (fsy.fold_name.empty()) fsy.fold_name = fs::path(file).stem().string();
      fsy.strategy =
          FusionStrategy::from_json(j.contains("strategy") ? j.at("strategy") : j);
      fsy.alpha = Tensor::zeros({kNumLevels, kNumOps});
      if (j.contains("alpha"))
        for (int r = 0; r < kNumLevels; ++r)
          for (int c = 0; c < kNumOps; ++c)
            fsy.alpha.at(r, c) =
                j["alpha"]["alpha"][level_name(static_cast<Level>(r))][static_cast<size_t>(c)]
                    .get<double>();
      folds.push_back(std::move(fsy));
    }
    export_strategy_grid(folds, grid_out);
    std::cout << "wrote " << grid_out << "\n";
    return 0;
  }

  if (report->parsed()) {
    std::ifstream in(report_path);
    if (!in) throw DataError("cannot open report: " + report_path);
    nlohmann::json j = nlohmann::json::parse(in);
    EvalReport rep;
    for (const auto& row : j.at("folds")) {
      MetricsReport m;
      m.ua = row.at("ua").get<double>();
      m.wa = row.at("wa").get<double>();
      rep.per_fold.emplace_back(row.at("fold").get<std::string>(), m);
    }
    rep.mean.ua = j.at("mean").at("ua").get<double>();
    rep.mean.wa = j.at("mean").at("wa").get<double>();
    print_report(rep);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const StateError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
