#include "mfas/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace mfas {

namespace {

struct SegData {
  size_t rec = 0;
  std::vector<double> samples;  // kSegmentSamples
  Tensor spec;                  // [kSpecFrames, kSpecBins] when loaded
};

std::string spec_cache_path(const std::string& audio_path, int seg_index) {
  const char* dir = std::getenv("MFAS_CACHE_DIR");
  if (!dir || !*dir) return {};
  std::error_code ec;
  auto size = fs::file_size(audio_path, ec);
  auto mtime = fs::last_write_time(audio_path, ec).time_since_epoch().count();
  if (ec) return {};
  std::string key = audio_path + "|" + std::to_string(size) + "|" +
                    std::to_string(mtime) + "|" + std::to_string(seg_index);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016zx", std::hash<std::string>{}(key));
  fs::create_directories(dir);
  return (fs::path(dir) / (std::string(buf) + ".spec")).string();
}

Tensor segment_spectrogram(const Segment& seg, const std::string& audio_path) {
  std::string cache = spec_cache_path(audio_path, seg.index);
  if (!cache.empty() && fs::exists(cache)) return read_spectrogram_cache(cache).values;
  SpectrogramImage img = compute_spectrogram(seg);
  if (!cache.empty()) write_spectrogram_cache(cache, img);
  return img.values;
}

std::vector<SegData> load_segments(const std::vector<ManifestRecord>& records,
                                   bool with_spec) {
  std::vector<SegData> out;
  for (size_t i = 0; i < records.size(); ++i) {
    Waveform w = read_wav(records[i].audio_path);
    for (const Segment& seg : segment_utterance(w)) {
      SegData s;
      s.rec = i;
      s.samples = seg.samples;
      if (with_spec) s.spec = segment_spectrogram(seg, records[i].audio_path);
      out.push_back(std::move(s));
    }
  }
  if (out.empty()) throw DataError("no segments found in manifest");
  return out;
}

Tensor stack_samples(const std::vector<SegData>& segs, const std::vector<size_t>& idx) {
  Tensor x({static_cast<int64_t>(idx.size()), kSegmentSamples});
  for (size_t b = 0; b < idx.size(); ++b)
    std::copy(segs[idx[b]].samples.begin(), segs[idx[b]].samples.end(),
              x.data.begin() + static_cast<int64_t>(b) * kSegmentSamples);
  return x;
}

Tensor stack_specs(const std::vector<SegData>& segs, const std::vector<size_t>& idx) {
  Tensor x({static_cast<int64_t>(idx.size()), kSpecFrames, kSpecBins});
  int64_t n = kSpecFrames * kSpecBins;
  for (size_t b = 0; b < idx.size(); ++b)
    std::copy(segs[idx[b]].spec.data.begin(), segs[idx[b]].spec.data.end(),
              x.data.begin() + static_cast<int64_t>(b) * n);
  return x;
}

double loss_value(Tape& t, Var loss) {
  double v = t.val(loss)[0];
  if (!std::isfinite(v)) throw NumericalError("loss diverged (non-finite)");
  return v;
}

// rows of a [B, N, D] tensor by batch index
Var gather_batch(Tape& t, Var x, const std::vector<int64_t>& idx) {
  const Tensor& v = t.val(x);
  Var flat = t.reshape(x, {v.shape[0], v.shape[1] * v.shape[2]});
  Var sel = t.gather_rows(flat, idx);
  return t.reshape(sel, {static_cast<int64_t>(idx.size()), v.shape[1], v.shape[2]});
}

MaskSpec sample_nonempty_mask(int64_t batch, int64_t T, const EncoderConfig& ecfg,
                              uint64_t seed) {
  MaskSpec mask = sample_mask(batch, T, ecfg.mask_prob, ecfg.mask_span, seed);
  if (mask.total() == 0)
    for (int64_t i = 0; i < std::min<int64_t>(ecfg.mask_span, T); ++i)
      mask.indices[0].push_back(i);
  return mask;
}

std::vector<std::vector<size_t>> batches_of(std::vector<size_t> order, int64_t batch_size,
                                            std::mt19937_64& rng) {
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < order.size(); i += static_cast<size_t>(batch_size)) {
    size_t end = std::min(order.size(), i + static_cast<size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<int64_t>(i),
                     order.begin() + static_cast<int64_t>(end));
  }
  return out;
}

// utterance-level vote: mean of segment logits, then argmax
MetricsReport vote_and_score(const std::vector<ManifestRecord>& records,
                             const std::map<size_t, std::vector<std::vector<double>>>& logits,
                             const std::map<size_t, std::vector<std::array<double, 3>>>* vad) {
  std::vector<int> preds, labels;
  std::vector<std::array<double, 3>> vp, vt;
  for (const auto& [rec, rows] : logits) {
    std::vector<double> mean(rows.front().size(), 0.0);
    for (const auto& row : rows)
      for (size_t k = 0; k < row.size(); ++k) mean[k] += row[k] / static_cast<double>(rows.size());
    preds.push_back(static_cast<int>(std::max_element(mean.begin(), mean.end()) - mean.begin()));
    labels.push_back(records[rec].klass);
    if (vad) {
      const auto& vrows = vad->at(rec);
      std::array<double, 3> m = {0, 0, 0};
      for (const auto& row : vrows)
        for (int k = 0; k < 3; ++k) m[static_cast<size_t>(k)] += row[static_cast<size_t>(k)] / static_cast<double>(vrows.size());
      vp.push_back(m);
      vt.push_back({records[rec].v, records[rec].a, records[rec].d});
    }
  }
  return compute_metrics(preds, labels, vad ? &vp : nullptr, vad ? &vt : nullptr);
}

}  // namespace

void RunConfig::validate() const {
  encoder.validate();
  head.validate();
  if (objective != "quantized" && objective != "continuous" && objective != "ctc")
    throw ConfigError("objective must be quantized, continuous or ctc");
  if (batch_size < 1 || epochs < 1) throw ConfigError("batch_size and epochs must be >= 1");
  if (holdout_frac <= 0.0 || holdout_frac >= 1.0)
    throw ConfigError("holdout_frac must be in (0, 1)");
  if (cv != "session" && cv != "speaker") throw ConfigError("cv must be session or speaker");
  if (manifest.empty()) throw ConfigError("manifest path required");
}

CvStrategy RunConfig::cv_strategy() const {
  return cv == "session" ? CvStrategy::LeaveOneSession : CvStrategy::LeaveOneSpeaker;
}

nlohmann::json RunConfig::to_json() const {
  return {{"manifest", manifest},
          {"out_dir", out_dir},
          {"objective", objective},
          {"model_lr", model_lr},
          {"alpha_lr", alpha_lr},
          {"probe_lr", probe_lr},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed},
          {"probe", probe},
          {"holdout_frac", holdout_frac},
          {"cv", cv},
          {"encoder", encoder.to_json()},
          {"codebook", codebook.to_json()},
          {"continuous", continuous.to_json()},
          {"ctc_vocab", ctc.vocab_size},
          {"head", head.to_json()},
          {"fusion_heads", fusion.heads}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  c.manifest = j.value("manifest", c.manifest);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.objective = j.value("objective", c.objective);
  c.model_lr = j.value("model_lr", c.model_lr);
  c.alpha_lr = j.value("alpha_lr", c.alpha_lr);
  c.probe_lr = j.value("probe_lr", c.probe_lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.probe = j.value("probe", c.probe);
  c.holdout_frac = j.value("holdout_frac", c.holdout_frac);
  c.cv = j.value("cv", c.cv);
  if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
  if (j.contains("codebook")) c.codebook = CodebookConfig::from_json(j.at("codebook"));
  if (j.contains("continuous"))
    c.continuous = ContinuousTargetConfig::from_json(j.at("continuous"));
  c.ctc.vocab_size = j.value("ctc_vocab", c.ctc.vocab_size);
  if (j.contains("head")) c.head = HeadConfig::from_json(j.at("head"));
  c.fusion.heads = j.value("fusion_heads", c.fusion.heads);
  return c;
}

PretrainResult run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  std::vector<ManifestRecord> records = load_manifest(cfg.manifest);
  if (records.empty()) throw DataError("pretrain: empty manifest");
  std::vector<SegData> segs = load_segments(records, cfg.probe);
  int64_t T = cfg.encoder.output_frames(kSegmentSamples);

  SpeechEncoder enc(cfg.encoder, cfg.seed);
  ParamRefs model_params = enc.params();

  std::unique_ptr<Quantizer> quant;
  std::unique_ptr<TeacherState> teacher;
  std::unique_ptr<CtcHead> ctc_head;
  if (cfg.objective == "quantized") {
    quant = std::make_unique<Quantizer>(cfg.codebook, cfg.encoder.model_dim, cfg.seed + 1);
    for (Param* p : quant->params()) model_params.push_back(p);
  } else if (cfg.objective == "continuous") {
    teacher = std::make_unique<TeacherState>(
        TeacherState::init_from(enc, cfg.continuous.ema_decay, cfg.seed + 1));
  } else {
    ctc_head = std::make_unique<CtcHead>(cfg.ctc, cfg.encoder.model_dim, cfg.seed + 1);
    for (Param* p : ctc_head->params()) model_params.push_back(p);
  }
  AdamW opt(model_params, cfg.model_lr);

  // probe split is by utterance so held-out segments never train the probe
  std::vector<size_t> all_recs(records.size());
  std::iota(all_recs.begin(), all_recs.end(), 0);
  auto [probe_train_recs, probe_held_recs] =
      stratified_split(records, all_recs, cfg.holdout_frac, cfg.seed + 2);
  std::set<size_t> probe_train_set(probe_train_recs.begin(), probe_train_recs.end());

  HeadConfig probe_cfg = cfg.head;
  probe_cfg.with_vad_head = true;
  std::unique_ptr<CoattentionHead> probe_head;
  std::unique_ptr<AdamW> probe_opt;
  if (cfg.probe) {
    probe_head = std::make_unique<CoattentionHead>(probe_cfg, cfg.encoder.model_dim, T,
                                                   cfg.seed + 3);
    probe_opt = std::make_unique<AdamW>(probe_head->params(), cfg.probe_lr);
  }

  std::vector<size_t> order(segs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 order_rng(cfg.seed + 4), gumbel_rng(cfg.seed + 5), neg_rng(cfg.seed + 6);
  std::mt19937_64 dropout_rng(cfg.seed + 7);

  PretrainResult result;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double temp = cfg.codebook.temp_start +
                  (cfg.codebook.temp_end - cfg.codebook.temp_start) *
                      (cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 1.0);
    double epoch_loss = 0;
    int64_t steps = 0;
    for (const auto& batch : batches_of(order, cfg.batch_size, order_rng)) {
      Tape t;
      int64_t B = static_cast<int64_t>(batch.size());
      Tensor batchx = stack_samples(segs, batch);
      Var x = enc.encode_frames(t, batchx);
      MaskSpec mask = sample_nonempty_mask(
          B, T, cfg.encoder, cfg.seed * 7919 + static_cast<uint64_t>(epoch) * 131 + steps);

      Var loss, frames;
      if (cfg.objective == "ctc") {
        LayerTapBundle taps = enc.transform_with_taps(t, x);
        std::vector<std::vector<int>> targets;
        for (size_t i : batch) targets.push_back(records[segs[i].rec].transcript_tokens);
        loss = ctc_head->loss(t, taps.target(), targets);
        frames = taps.target();
      } else {
        Var masked = enc.apply_mask(t, x, mask);
        LayerTapBundle taps = enc.transform_with_taps(t, masked);
        if (cfg.objective == "quantized") {
          Quantizer::Result q = quant->quantize_targets(t, x, mask, temp, gumbel_rng);
          loss = t.add(quantized_contrastive_loss(t, taps.target(), q.positives, mask,
                                                  cfg.codebook, neg_rng),
                       quant->diversity_penalty(t, q.soft_probs));
        } else {
          Var y = continuous_targets(t, *teacher, batchx, cfg.continuous);
          loss = continuous_loss(t, taps.target(), y, mask);
        }
        frames = taps.target();
      }

      Var total = loss;
      if (cfg.probe) {
        std::vector<int64_t> rows;
        std::vector<int> labels;
        Tensor vad_true({0, 3});
        std::vector<double> vad_vals;
        for (size_t b = 0; b < batch.size(); ++b) {
          const ManifestRecord& r = records[segs[batch[b]].rec];
          if (!probe_train_set.count(segs[batch[b]].rec)) continue;
          rows.push_back(static_cast<int64_t>(b));
          labels.push_back(r.klass);
          vad_vals.insert(vad_vals.end(), {r.v, r.a, r.d});
        }
        if (!rows.empty()) {
          vad_true = Tensor({static_cast<int64_t>(rows.size()), 3}, std::move(vad_vals));
          Var detached = detach_for_probe(t, frames);
          GuideVectors g = probe_head->encode_guides(t, t.leaf(stack_specs(segs, batch)));
          Var e = coattend(t, g.x_s1, detached);
          Var o = coattend(t, g.x_s2, detached);
          Var es = gather_batch(t, e, rows), os = gather_batch(t, o, rows);
          HeadOutput out = probe_head->classify(t, es, os, dropout_rng, true);
          Var diff = t.sub(out.vad, t.leaf(vad_true));
          Var probe_loss = t.add(t.cross_entropy_mean(out.logits, labels),
                                 t.mean_all(t.mul(diff, diff)));
          total = t.add(total, probe_loss);
        }
      }

      epoch_loss += loss_value(t, loss);
      ++steps;
      opt.zero_grad();
      if (probe_opt) probe_opt->zero_grad();
      t.backward(total);
      opt.step();
      if (probe_opt) probe_opt->step();
      if (teacher) update_teacher(*teacher, enc);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(steps));

    if (cfg.probe) {
      // held-out probe evaluation, unmasked forward
      std::map<size_t, std::vector<std::vector<double>>> logit_rows;
      std::map<size_t, std::vector<std::array<double, 3>>> vad_rows;
      std::set<size_t> held(probe_held_recs.begin(), probe_held_recs.end());
      std::vector<size_t> held_segs;
      for (size_t i = 0; i < segs.size(); ++i)
        if (held.count(segs[i].rec)) held_segs.push_back(i);
      for (const auto& batch : batches_of(held_segs, cfg.batch_size, order_rng)) {
        Tape t;
        Var x = enc.encode_frames(t, stack_samples(segs, batch));
        LayerTapBundle taps = enc.transform_with_taps(t, x);
        Var frames = detach_for_probe(t, taps.target());
        GuideVectors g = probe_head->encode_guides(t, t.leaf(stack_specs(segs, batch)));
        HeadOutput out = probe_head->classify(t, coattend(t, g.x_s1, frames),
                                              coattend(t, g.x_s2, frames), dropout_rng,
                                              false);
        const Tensor& lv = t.val(out.logits);
        const Tensor& vv = t.val(out.vad);
        for (size_t b = 0; b < batch.size(); ++b) {
          std::vector<double> row(static_cast<size_t>(lv.shape[1]));
          for (int64_t k = 0; k < lv.shape[1]; ++k)
            row[static_cast<size_t>(k)] = lv.at(static_cast<int64_t>(b), k);
          logit_rows[segs[batch[b]].rec].push_back(std::move(row));
          vad_rows[segs[batch[b]].rec].push_back({vv.at(static_cast<int64_t>(b), 0),
                                                  vv.at(static_cast<int64_t>(b), 1),
                                                  vv.at(static_cast<int64_t>(b), 2)});
        }
      }
      result.probe_reports.push_back(vote_and_score(records, logit_rows, &vad_rows));
    }
  }

  fs::create_directories(cfg.out_dir);
  Checkpoint ck;
  ck.kind = "mfas.encoder";
  ck.config = {{"encoder", cfg.encoder.to_json()}, {"objective", cfg.objective}};
  ck.put_params(model_params);
  result.checkpoint_path =
      (fs::path(cfg.out_dir) / ("encoder_" + cfg.objective + ".ckpt")).string();
  ck.save(result.checkpoint_path);
  return result;
}

namespace {

std::unique_ptr<SpeechEncoder> load_extractor(const std::string& path) {
  if (!fs::exists(path)) throw StateError("missing extractor checkpoint: " + path);
  Checkpoint ck = Checkpoint::load(path);
  if (ck.kind != "mfas.encoder") throw StateError("not an encoder checkpoint: " + path);
  EncoderConfig ecfg = EncoderConfig::from_json(ck.config.at("encoder"));
  auto enc = std::make_unique<SpeechEncoder>(ecfg, 0);
  // checkpoints also carry objective-head tensors; restore the encoder subset
  ParamRefs ps = enc->params();
  for (Param* p : ps) {
    auto it = ck.tensors.find(p->name);
    if (it == ck.tensors.end()) throw StateError("checkpoint missing tensor " + p->name);
    if (!(it->second.shape == p->value.shape))
      throw StateError("checkpoint shape mismatch for " + p->name);
    p->value = it->second;
  }
  return enc;
}

}  // namespace

std::vector<SegmentFeatures> extract_features(const std::vector<ManifestRecord>& records,
                                              const std::string& speech_ckpt,
                                              const std::string& text_ckpt) {
  std::unique_ptr<SpeechEncoder> speech = load_extractor(speech_ckpt);
  std::unique_ptr<SpeechEncoder> text = load_extractor(text_ckpt);
  if (speech->config().model_dim != text->config().model_dim)
    throw ConfigError("extractor model dims differ; streams cannot be fused");
  std::vector<SegData> segs = load_segments(records, true);
  int64_t T = speech->config().output_frames(kSegmentSamples);
  int64_t D = speech->config().model_dim;

  std::vector<SegmentFeatures> out(segs.size());
  std::vector<size_t> order(segs.size());
  std::iota(order.begin(), order.end(), 0);
  for (size_t i = 0; i < order.size(); i += 8) {
    std::vector<size_t> batch(order.begin() + static_cast<int64_t>(i),
                              order.begin() + static_cast<int64_t>(std::min(order.size(), i + 8)));
    Tensor batchx = stack_samples(segs, batch);
    Tape t;
    LayerTapBundle sp = speech->transform_with_taps(t, speech->encode_frames(t, batchx));
    LayerTapBundle tx = text->transform_with_taps(t, text->encode_frames(t, batchx));
    std::array<Var, kNumLevels> taps = {sp.raw(), sp.deep(), sp.target()};
    for (size_t b = 0; b < batch.size(); ++b) {
      SegmentFeatures& f = out[batch[b]];
      f.record_index = segs[batch[b]].rec;
      f.spec = segs[batch[b]].spec;
      for (int lv = 0; lv < kNumLevels; ++lv) {
        const Tensor& v = t.val(taps[static_cast<size_t>(lv)]);
        Tensor slice({T, D});
        std::copy_n(v.data.begin() + static_cast<int64_t>(b) * T * D, T * D,
                    slice.data.begin());
        f.taps[static_cast<size_t>(lv)] = std::move(slice);
      }
      const Tensor& v = t.val(tx.target());
      Tensor slice({T, D});
      std::copy_n(v.data.begin() + static_cast<int64_t>(b) * T * D, T * D,
                  slice.data.begin());
      f.x_t = std::move(slice);
    }
  }
  return out;
}

namespace {

struct FusionModel {
  FusionCell cell;
  CoattentionHead head;
  int64_t T, D;

  FusionModel(const RunConfig& cfg, int64_t dim, int64_t frames, uint64_t seed)
      : cell(dim, cfg.fusion, seed),
        head(cfg.head, dim, frames, seed + 1),
        T(frames),
        D(dim) {}

  ParamRefs params() {
    ParamRefs ps = cell.params();
    for (Param* p : head.params()) ps.push_back(p);
    return ps;
  }

  Tensor stack(const std::vector<SegmentFeatures>& feats, const std::vector<size_t>& idx,
               int which /* 0..2 taps, 3 x_t, 4 spec */) const {
    const Tensor& first = which == 4 ? feats[idx[0]].spec
                          : which == 3 ? feats[idx[0]].x_t
                                       : feats[idx[0]].taps[static_cast<size_t>(which)];
    std::vector<int64_t> shape = first.shape;
    shape.insert(shape.begin(), static_cast<int64_t>(idx.size()));
    Tensor out(shape);
    int64_t n = first.numel();
    for (size_t b = 0; b < idx.size(); ++b) {
      const Tensor& src = which == 4 ? feats[idx[b]].spec
                          : which == 3 ? feats[idx[b]].x_t
                                       : feats[idx[b]].taps[static_cast<size_t>(which)];
      std::copy(src.data.begin(), src.data.end(),
                out.data.begin() + static_cast<int64_t>(b) * n);
    }
    return out;
  }

  // mixture == false runs the single derived path (level, op)
  Var logits(Tape& t, const std::vector<SegmentFeatures>& feats,
             const std::vector<size_t>& idx, Level level, AlphaTable* alpha,
             OperationId op, std::mt19937_64& rng, bool train) {
    Var xe = t.leaf(stack(feats, idx, static_cast<int>(level)));
    Var tgt = t.leaf(stack(feats, idx, static_cast<int>(Level::Target)));
    Var xt = t.leaf(stack(feats, idx, 3));
    Var xo = alpha ? cell.forward(t, level, t.row(t.param(alpha->alpha), static_cast<int64_t>(level)), xe, xt)
                   : cell.apply_op(t, level, op, xe, xt);
    GuideVectors g = head.encode_guides(t, t.leaf(stack(feats, idx, 4)));
    Var e = coattend(t, g.x_s1, tgt);
    Var o = coattend(t, g.x_s2, xo);
    return head.classify(t, e, o, rng, train).logits;
  }
};

std::vector<int> batch_labels(const std::vector<ManifestRecord>& records,
                              const std::vector<SegmentFeatures>& feats,
                              const std::vector<size_t>& idx) {
  std::vector<int> labels;
  for (size_t i : idx) labels.push_back(records[feats[i].record_index].klass);
  return labels;
}

MetricsReport eval_single_path(FusionModel& model, const std::vector<ManifestRecord>& records,
                               const std::vector<SegmentFeatures>& feats,
                               const std::vector<size_t>& idx, Level level, OperationId op,
                               int64_t batch_size, std::mt19937_64& rng) {
  std::map<size_t, std::vector<std::vector<double>>> logit_rows;
  for (size_t i = 0; i < idx.size(); i += static_cast<size_t>(batch_size)) {
    std::vector<size_t> batch(idx.begin() + static_cast<int64_t>(i),
                              idx.begin() + static_cast<int64_t>(std::min(
                                                idx.size(), i + static_cast<size_t>(batch_size))));
    Tape t;
    Var lg = model.logits(t, feats, batch, level, nullptr, op, rng, false);
    const Tensor& lv = t.val(lg);
    for (size_t b = 0; b < batch.size(); ++b) {
      std::vector<double> row(static_cast<size_t>(lv.shape[1]));
      for (int64_t k = 0; k < lv.shape[1]; ++k)
        row[static_cast<size_t>(k)] = lv.at(static_cast<int64_t>(b), k);
      logit_rows[feats[batch[b]].record_index].push_back(std::move(row));
    }
  }
  return vote_and_score(records, logit_rows, nullptr);
}

std::vector<size_t> segs_of_records(const std::vector<SegmentFeatures>& feats,
                                    const std::vector<size_t>& recs) {
  std::set<size_t> keep(recs.begin(), recs.end());
  std::vector<size_t> out;
  for (size_t i = 0; i < feats.size(); ++i)
    if (keep.count(feats[i].record_index)) out.push_back(i);
  return out;
}

}  // namespace

SearchResult run_search(const RunConfig& cfg, const std::string& speech_ckpt,
                        const std::string& text_ckpt) {
  cfg.validate();
  std::vector<ManifestRecord> records = load_manifest(cfg.manifest);
  std::vector<SegmentFeatures> feats = extract_features(records, speech_ckpt, text_ckpt);
  int64_t T = feats.front().taps[0].shape[0], D = feats.front().taps[0].shape[1];

  FusionModel model(cfg, D, T, cfg.seed + 10);
  AlphaTable alpha;
  AdamW model_opt(model.params(), cfg.model_lr);
  Sgd alpha_opt({&alpha.alpha}, cfg.alpha_lr);

  std::vector<size_t> all_recs(records.size());
  std::iota(all_recs.begin(), all_recs.end(), 0);
  auto [train_recs, valid_recs] =
      stratified_split(records, all_recs, cfg.holdout_frac, cfg.seed + 11);
  std::vector<size_t> train_segs = segs_of_records(feats, train_recs);
  std::vector<size_t> valid_segs = segs_of_records(feats, valid_recs);

  std::mt19937_64 order_rng(cfg.seed + 12), level_rng(cfg.seed + 13),
      dropout_rng(cfg.seed + 14);
  std::uniform_int_distribution<int> level_pick(0, kNumLevels - 1);

  SearchResult result;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto train_batches = batches_of(train_segs, cfg.batch_size, order_rng);
    auto valid_batches = batches_of(valid_segs, cfg.batch_size, order_rng);
    for (size_t step = 0; step < train_batches.size(); ++step) {
      // weight update on a training batch, one sampled level per batch
      {
        Level level = static_cast<Level>(level_pick(level_rng));
        Tape t;
        Var lg = model.logits(t, feats, train_batches[step], level, &alpha,
                              OperationId::Zero, dropout_rng, true);
        Var loss = t.cross_entropy_mean(lg, batch_labels(records, feats, train_batches[step]));
        loss_value(t, loss);
        model_opt.zero_grad();
        alpha.alpha.zero_grad();
        t.backward(loss);
        model_opt.step();
      }
      // alpha update on a held-out batch with plain gradient descent
      {
        const auto& vb = valid_batches[step % valid_batches.size()];
        Level level = static_cast<Level>(level_pick(level_rng));
        Tape t;
        Var lg = model.logits(t, feats, vb, level, &alpha, OperationId::Zero, dropout_rng,
                              true);
        Var loss = t.cross_entropy_mean(lg, batch_labels(records, feats, vb));
        loss_value(t, loss);
        model_opt.zero_grad();
        alpha.alpha.zero_grad();
        t.backward(loss);
        alpha_opt.step();
      }
    }
    if (!alpha.alpha.value.all_finite()) throw NumericalError("alpha diverged");
    result.alpha_history.push_back(alpha_snapshot_json(alpha));
  }

  // score each level's derived single path on the held-out split
  std::map<Level, LevelScore> scores;
  for (int lv = 0; lv < kNumLevels; ++lv) {
    const double* row = alpha.alpha.value.data.data() + lv * kNumOps;
    int best = 0;
    for (int i = 1; i < kNumOps; ++i)
      if (row[i] > row[best]) best = i;
    MetricsReport m = eval_single_path(model, records, feats, valid_segs,
                                       static_cast<Level>(lv), static_cast<OperationId>(best),
                                       cfg.batch_size, dropout_rng);
    scores[static_cast<Level>(lv)] = {m.ua, m.wa};
  }
  result.strategy = derive_strategy(alpha, scores);
  result.level_scores = scores;

  fs::create_directories(cfg.out_dir);
  nlohmann::json j = {{"strategy", result.strategy.to_json()},
                      {"alpha_history", result.alpha_history},
                      {"level_scores", nlohmann::json::object()},
                      {"alpha", alpha_snapshot_json(alpha)}};
  for (const auto& [lv, sc] : scores)
    j["level_scores"][level_name(lv)] = {{"ua", sc.ua}, {"wa", sc.wa}};
  result.strategy_path = (fs::path(cfg.out_dir) / "strategy.json").string();
  std::ofstream out(result.strategy_path);
  out << j.dump(2) << "\n";
  return result;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& [name, m] : per_fold) {
    nlohmann::json row = m.to_json();
    row["fold"] = name;
    folds.push_back(row);
  }
  return {{"folds", folds}, {"mean", mean.to_json()}};
}

namespace {

void train_fold(FusionModel& model, const RunConfig& cfg,
                const std::vector<ManifestRecord>& records,
                const std::vector<SegmentFeatures>& feats,
                const std::vector<size_t>& train_segs, Level level, OperationId op,
                size_t fold) {
  AdamW opt(model.params(), cfg.model_lr);
  std::mt19937_64 order_rng(cfg.seed + 200 + fold), dropout_rng(cfg.seed + 300 + fold);
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : batches_of(train_segs, cfg.batch_size, order_rng)) {
      Tape t;
      Var lg = model.logits(t, feats, batch, level, nullptr, op, dropout_rng, true);
      Var loss = t.cross_entropy_mean(lg, batch_labels(records, feats, batch));
      loss_value(t, loss);
      opt.zero_grad();
      t.backward(loss);
      opt.step();
    }
  }
}

}  // namespace

EvalReport run_derive_train_eval(const RunConfig& cfg, const FusionStrategy& strategy,
                                 const std::string& speech_ckpt,
                                 const std::string& text_ckpt) {
  cfg.validate();
  std::vector<ManifestRecord> records = load_manifest(cfg.manifest);
  std::vector<SegmentFeatures> feats = extract_features(records, speech_ckpt, text_ckpt);
  int64_t T = feats.front().taps[0].shape[0], D = feats.front().taps[0].shape[1];
  CvPlan plan = make_cv_plan(records, cfg.cv_strategy());

  Level level = strategy.selected_level;
  OperationId op = strategy.op_per_level[static_cast<size_t>(level)];

  EvalReport report;
  for (size_t fold = 0; fold < plan.folds.size(); ++fold) {
    FusionModel model(cfg, D, T, cfg.seed + 100 + fold * 17);
    std::vector<size_t> train_segs = segs_of_records(feats, plan.folds[fold].train_indices);
    std::vector<size_t> test_segs = segs_of_records(feats, plan.folds[fold].test_indices);
    train_fold(model, cfg, records, feats, train_segs, level, op, fold);
    std::mt19937_64 eval_rng(cfg.seed + 400 + fold);
    MetricsReport m = eval_single_path(model, records, feats, test_segs, level, op,
                                       cfg.batch_size, eval_rng);
    report.per_fold.emplace_back(plan.folds[fold].held_out_key, m);
    report.mean.ua += m.ua / static_cast<double>(plan.folds.size());
    report.mean.wa += m.wa / static_cast<double>(plan.folds.size());
  }
  return report;
}

DeriveResult run_derive_train(const RunConfig& cfg, const FusionStrategy& strategy,
                              const std::string& speech_ckpt, const std::string& text_ckpt) {
  cfg.validate();
  std::vector<ManifestRecord> records = load_manifest(cfg.manifest);
  std::vector<SegmentFeatures> feats = extract_features(records, speech_ckpt, text_ckpt);
  int64_t T = feats.front().taps[0].shape[0], D = feats.front().taps[0].shape[1];
  CvPlan plan = make_cv_plan(records, cfg.cv_strategy());
  Level level = strategy.selected_level;
  OperationId op = strategy.op_per_level[static_cast<size_t>(level)];

  fs::create_directories(cfg.out_dir);
  DeriveResult result;
  nlohmann::json folds_meta = nlohmann::json::array();
  for (size_t fold = 0; fold < plan.folds.size(); ++fold) {
    FusionModel model(cfg, D, T, cfg.seed + 100 + fold * 17);
    std::vector<size_t> train_segs = segs_of_records(feats, plan.folds[fold].train_indices);
    train_fold(model, cfg, records, feats, train_segs, level, op, fold);

    Checkpoint ck;
    ck.kind = "mfas.derived";
    ck.config = {{"strategy", strategy.to_json()},
                 {"held_out_key", plan.folds[fold].held_out_key},
                 {"model_dim", D},
                 {"n_frames", T},
                 {"seed", cfg.seed + 100 + fold * 17}};
    ck.put_params(model.params());
    std::string path =
        (fs::path(cfg.out_dir) / ("derived_fold" + std::to_string(fold) + ".ckpt")).string();
    ck.save(path);
    result.fold_checkpoints.push_back(path);
    folds_meta.push_back({{"held_out_key", plan.folds[fold].held_out_key},
                          {"checkpoint", path}});
  }
  nlohmann::json meta = {{"strategy", strategy.to_json()},
                         {"cv", cfg.cv},
                         {"folds", folds_meta}};
  result.meta_path = (fs::path(cfg.out_dir) / "derived.json").string();
  std::ofstream out(result.meta_path);
  out << meta.dump(2) << "\n";
  return result;
}

EvalReport run_eval(const RunConfig& cfg, const std::string& derived_meta,
                    const std::string& speech_ckpt, const std::string& text_ckpt) {
  cfg.validate();
  if (!fs::exists(derived_meta)) throw StateError("missing derived model: " + derived_meta);
  std::ifstream in(derived_meta);
  nlohmann::json meta = nlohmann::json::parse(in);
  FusionStrategy strategy = FusionStrategy::from_json(meta.at("strategy"));
  Level level = strategy.selected_level;
  OperationId op = strategy.op_per_level[static_cast<size_t>(level)];

  std::vector<ManifestRecord> records = load_manifest(cfg.manifest);
  std::vector<SegmentFeatures> feats = extract_features(records, speech_ckpt, text_ckpt);
  RunConfig plan_cfg = cfg;
  plan_cfg.cv = meta.value("cv", cfg.cv);
  CvPlan plan = make_cv_plan(records, plan_cfg.cv_strategy());

  EvalReport report;
  for (const auto& fold_meta : meta.at("folds")) {
    std::string key = fold_meta.at("held_out_key").get<std::string>();
    auto it = std::find_if(plan.folds.begin(), plan.folds.end(),
                           [&](const CvFold& f) { return f.held_out_key == key; });
    if (it == plan.folds.end())
      throw StateError("derived fold key not present in manifest: " + key);
    Checkpoint ck = Checkpoint::load(fold_meta.at("checkpoint").get<std::string>());
    if (ck.kind != "mfas.derived")
      throw StateError("not a derived-model checkpoint: " +
                       fold_meta.at("checkpoint").get<std::string>());
    int64_t D = ck.config.at("model_dim").get<int64_t>();
    int64_t T = ck.config.at("n_frames").get<int64_t>();
    FusionModel model(plan_cfg, D, T, ck.config.at("seed").get<uint64_t>());
    ck.restore_params(model.params());

    std::vector<size_t> test_segs = segs_of_records(feats, it->test_indices);
    std::mt19937_64 eval_rng(cfg.seed + 500);
    MetricsReport m = eval_single_path(model, records, feats, test_segs, level, op,
                                       cfg.batch_size, eval_rng);
    report.per_fold.emplace_back(key, m);
    report.mean.ua += m.ua / static_cast<double>(meta.at("folds").size());
    report.mean.wa += m.wa / static_cast<double>(meta.at("folds").size());
  }
  return report;
}

void export_strategy_grid(const std::vector<FoldStrategy>& folds, const std::string& path) {
  if (folds.empty()) throw InputError("strategy grid: no fold results to render");
  // rows displayed top-down as target / deep / raw
  const Level kRowOrder[kNumLevels] = {Level::Target, Level::Deep, Level::Raw};
  const int cell = 22, pad = 8, label_w = 60, header_h = 18;
  int group_h = header_h + kNumLevels * cell + pad;
  int width = label_w + kNumOps * cell + 2 * pad;
  int height = pad + static_cast<int>(folds.size()) * group_h + 40;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\">\n";
  for (size_t f = 0; f < folds.size(); ++f) {
    int top = pad + static_cast<int>(f) * group_h;
    svg << "<text x=\"" << pad << "\" y=\"" << top + 12 << "\" font-size=\"11\">"
        << folds[f].fold_name << "</text>\n";
    for (int r = 0; r < kNumLevels; ++r) {
      Level level = kRowOrder[r];
      int y = top + header_h + r * cell;
      svg << "<text x=\"" << pad << "\" y=\"" << y + cell - 7 << "\" font-size=\"10\">"
          << level_name(level) << "</text>\n";
      OperationId chosen = folds[f].strategy.op_per_level[static_cast<size_t>(level)];
      for (int c = 0; c < kNumOps; ++c) {
        int x = label_w + c * cell;
        bool picked = static_cast<OperationId>(c) == chosen;
        bool best = picked && level == folds[f].strategy.selected_level;
        const char* fill = best ? "#cc2222" : picked ? "#444444" : "#ffffff";
        svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell - 2
            << "\" height=\"" << cell - 2 << "\" fill=\"" << fill
            << "\" stroke=\"#888888\"/>\n";
      }
    }
  }
  int legend_y = height - 24;
  for (int c = 0; c < kNumOps; ++c)
    svg << "<text x=\"" << label_w + c * cell << "\" y=\"" << legend_y
        << "\" font-size=\"7\" transform=\"rotate(45 " << label_w + c * cell << " "
        << legend_y << ")\">" << op_name(static_cast<OperationId>(c)) << "</text>\n";
  svg << "</svg>\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write grid image: " + path);
  out << svg.str();
}

}  // namespace mfas
