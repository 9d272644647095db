#include "mfas/pretrain.hpp"

#include <cmath>

namespace mfas {

nlohmann::json CodebookConfig::to_json() const {
  return {{"n_books", n_books},
          {"n_words", n_words},
          {"n_negatives", n_negatives},
          {"temp_start", temp_start},
          {"temp_end", temp_end},
          {"diversity_weight", diversity_weight},
          {"logit_scale", logit_scale}};
}

CodebookConfig CodebookConfig::from_json(const nlohmann::json& j) {
  CodebookConfig c;
  c.n_books = j.value("n_books", c.n_books);
  c.n_words = j.value("n_words", c.n_words);
  c.n_negatives = j.value("n_negatives", c.n_negatives);
  c.temp_start = j.value("temp_start", c.temp_start);
  c.temp_end = j.value("temp_end", c.temp_end);
  c.diversity_weight = j.value("diversity_weight", c.diversity_weight);
  c.logit_scale = j.value("logit_scale", c.logit_scale);
  return c;
}

nlohmann::json ContinuousTargetConfig::to_json() const {
  return {{"n_layers", n_layers},
          {"ema_decay", ema_decay},
          {"normalize_targets", normalize_targets}};
}

ContinuousTargetConfig ContinuousTargetConfig::from_json(const nlohmann::json& j) {
  ContinuousTargetConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.normalize_targets = j.value("normalize_targets", c.normalize_targets);
  return c;
}

Quantizer::Quantizer(CodebookConfig cfg, int64_t model_dim, uint64_t seed) : cfg_(cfg) {
  if (cfg_.n_books < 1 || cfg_.n_words < 2) throw ConfigError("quantizer: need B >= 1, W >= 2");
  if (model_dim % cfg_.n_books != 0)
    throw ConfigError("quantizer: model_dim not divisible by n_books");
  code_dim_ = model_dim / cfg_.n_books;
  std::mt19937_64 rng(seed);
  logits_proj_ = Linear("quant.proj", model_dim, cfg_.n_books * cfg_.n_words, rng);
  for (int64_t b = 0; b < cfg_.n_books; ++b)
    books_.emplace_back("quant.book" + std::to_string(b),
                        Tensor::randn({cfg_.n_words, code_dim_}, 1.0, rng));
}

Quantizer::Result Quantizer::quantize_targets(Tape& t, Var x, const MaskSpec& spec,
                                              double temperature,
                                              std::mt19937_64& gumbel_rng) {
  auto pos = spec.positions();
  if (pos.empty()) throw InputError("quantize_targets: no masked positions");
  Var sel = t.rows_select(x, pos);               // [M, D]
  Var logits = logits_proj_.forward(t, sel);     // [M, B*W]
  int64_t M = static_cast<int64_t>(pos.size());

  std::uniform_real_distribution<double> u(1e-12, 1.0);
  Result res;
  for (int64_t b = 0; b < cfg_.n_books; ++b) {
    Var lb = t.slice_last(logits, b * cfg_.n_words, (b + 1) * cfg_.n_words);
    Tensor noise({M, cfg_.n_words});
    for (double& g : noise.data) g = -std::log(-std::log(u(gumbel_rng)));
    Var soft = t.softmax_last(t.scale(t.add(lb, t.leaf(noise)), 1.0 / temperature));
    res.soft_probs.push_back(soft);
    Var hard = t.one_hot_st(soft);
    Var sub = t.matmul(hard, t.param(books_[static_cast<size_t>(b)]));  // [M, code_dim]
    res.positives = (b == 0) ? sub : t.concat_last(res.positives, sub);
  }
  return res;
}

Var Quantizer::diversity_penalty(Tape& t, const std::vector<Var>& soft_probs) {
  // perplexity = exp(sum_b H(mean_m p_b)) in [1, N_q]
  Var entropy_sum;
  for (size_t b = 0; b < soft_probs.size(); ++b) {
    Var pbar = t.mean_axis0(soft_probs[b]);  // [W]
    Var h = t.scale(t.sum_all(t.mul(pbar, t.log_(t.add_const(pbar, 1e-12)))), -1.0);
    entropy_sum = (b == 0) ? h : t.add(entropy_sum, h);
  }
  Var perplexity = t.exp_(entropy_sum);
  double w = cfg_.diversity_weight;
  double nq = static_cast<double>(cfg_.n_units());
  return t.add(t.leaf(Tensor::scalar(w)), t.scale(perplexity, -w / nq));
}

ParamRefs Quantizer::params() {
  ParamRefs out;
  logits_proj_.collect(out);
  for (Param& p : books_) out.push_back(&p);
  return out;
}

Var quantized_contrastive_loss(Tape& t, Var x_hat, Var positives, const MaskSpec& spec,
                               const CodebookConfig& cfg, std::mt19937_64& rng) {
  auto pos = spec.positions();
  if (pos.empty()) return t.leaf(Tensor::scalar(0.0));
  int64_t M = static_cast<int64_t>(pos.size());
  Var sel = t.rows_select(x_hat, pos);  // [M, D]

  // masked-row indices grouped per sequence for negative sampling
  std::vector<std::vector<int64_t>> by_seq;
  for (int64_t i = 0; i < M; ++i) {
    size_t b = static_cast<size_t>(pos[static_cast<size_t>(i)].batch);
    if (by_seq.size() <= b) by_seq.resize(b + 1);
    by_seq[b].push_back(i);
  }

  Var total;
  for (int64_t i = 0; i < M; ++i) {
    const auto& peers = by_seq[static_cast<size_t>(pos[static_cast<size_t>(i)].batch)];
    int64_t avail = static_cast<int64_t>(peers.size()) - 1;
    int64_t n_neg = std::min(cfg.n_negatives, std::max<int64_t>(avail, 0));
    std::vector<int64_t> cand = {i};
    if (n_neg > 0) {
      std::uniform_int_distribution<size_t> pick(0, peers.size() - 1);
      while (static_cast<int64_t>(cand.size()) < 1 + n_neg) {
        int64_t j = peers[pick(rng)];
        if (j != i) cand.push_back(j);
      }
    }
    int64_t C = static_cast<int64_t>(cand.size());
    Var cands = t.reshape(t.gather_rows(positives, cand), {1, C, static_cast<int64_t>(t.val(positives).shape[1])});
    Var xi = t.gather_rows(sel, {i});  // [1, D]
    Var logits = t.scale(t.cosine_rows(xi, cands), cfg.logit_scale);  // [1, C]
    Tensor labels = Tensor::zeros({1, C});
    labels[0] = 1.0;
    Var row_loss = t.bce_with_logits_mean(logits, labels);
    total = (i == 0) ? row_loss : t.add(total, row_loss);
  }
  return t.scale(total, 1.0 / static_cast<double>(M));
}

TeacherState TeacherState::init_from(SpeechEncoder& student, double tau, uint64_t seed) {
  TeacherState ts;
  ts.tau = tau;
  ts.encoder = std::make_unique<SpeechEncoder>(student.config(), seed);
  ParamRefs sp = student.params(), tp = ts.encoder->params();
  for (size_t i = 0; i < sp.size(); ++i) tp[i]->value = sp[i]->value;
  return ts;
}

void update_teacher(ParamRefs teacher_params, ParamRefs student_params, double tau) {
  if (teacher_params.size() != student_params.size())
    throw StateError("update_teacher: parameter count mismatch");
  for (size_t i = 0; i < teacher_params.size(); ++i) {
    Tensor& tw = teacher_params[i]->value;
    const Tensor& sw = student_params[i]->value;
    if (tw.shape != sw.shape) throw StateError("update_teacher: shape mismatch");
    // incremental form keeps teacher == student an exact fixed point
    for (int64_t j = 0; j < tw.numel(); ++j) tw[j] += (1.0 - tau) * (sw[j] - tw[j]);
  }
}

void update_teacher(TeacherState& teacher, SpeechEncoder& student) {
  update_teacher(teacher.encoder->params(), student.params(), teacher.tau);
}

Var continuous_targets(Tape& t, TeacherState& teacher, const Tensor& segments,
                       const ContinuousTargetConfig& cfg) {
  const EncoderConfig& ecfg = teacher.encoder->config();
  if (cfg.n_layers < 1 || cfg.n_layers > ecfg.n_layers)
    throw ConfigError("continuous_targets: L_c must be in [1, k]");
  Var x = teacher.encoder->encode_frames(t, segments);
  LayerTapBundle taps = teacher.encoder->transform_with_taps(t, x);

  // everything below is value-only; the returned leaf carries no gradient
  int64_t k = ecfg.n_layers;
  Tensor acc;
  for (int64_t l = k - cfg.n_layers; l < k; ++l) {
    Tensor tap = t.val(taps.taps[static_cast<size_t>(l)]);
    if (cfg.normalize_targets) {
      int64_t d = tap.shape.back(), r = tap.numel() / d;
      for (int64_t i = 0; i < r; ++i) {
        double* p = tap.data.data() + i * d;
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += p[j];
        mean /= static_cast<double>(d);
        double var = 0;
        for (int64_t j = 0; j < d; ++j) var += (p[j] - mean) * (p[j] - mean);
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + 1e-8);
        for (int64_t j = 0; j < d; ++j) p[j] = (p[j] - mean) * inv;
      }
    }
    if (acc.data.empty()) {
      acc = std::move(tap);
    } else {
      for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += tap[i];
    }
  }
  for (double& v : acc.data) v /= static_cast<double>(cfg.n_layers);
  return t.leaf(std::move(acc));
}

Var continuous_loss(Tape& t, Var x_hat, Var y, const MaskSpec& spec) {
  if (!t.val(x_hat).same_shape(t.val(y)))
    throw InputError("continuous_loss: shape mismatch");
  auto pos = spec.positions();
  if (pos.empty()) return t.leaf(Tensor::scalar(0.0));
  Var a = t.rows_select(x_hat, pos);
  Var b = t.rows_select(y, pos);
  Var d = t.sub(a, b);
  return t.mean_all(t.mul(d, d));
}

CtcHead::CtcHead(CtcConfig cfg, int64_t model_dim, uint64_t seed) : cfg_(cfg) {
  if (cfg_.vocab_size < 2) throw ConfigError("ctc: vocab_size must be >= 2");
  std::mt19937_64 rng(seed);
  proj_ = Linear("ctc.proj", model_dim, cfg_.vocab_size, rng);
}

Var CtcHead::logits(Tape& t, Var taps_last) { return proj_.forward(t, taps_last); }

Var CtcHead::loss(Tape& t, Var taps_last, const std::vector<std::vector<int>>& targets) {
  const Tensor& xv = t.val(taps_last);
  if (xv.shape[0] != static_cast<int64_t>(targets.size()))
    throw InputError("ctc loss: batch size mismatch");
  int64_t T = xv.shape[1];
  for (const auto& tgt : targets)
    if (static_cast<int64_t>(tgt.size()) > T)
      throw InputError("ctc loss: target longer than frame count");
  Var lg = logits(t, taps_last);  // [B, T, V]
  Var total;
  for (int64_t b = 0; b < xv.shape[0]; ++b) {
    Var lb = t.row(lg, b);  // [T, V]
    Var lo = t.ctc_loss(lb, targets[static_cast<size_t>(b)]);
    total = (b == 0) ? lo : t.add(total, lo);
  }
  return t.scale(total, 1.0 / static_cast<double>(xv.shape[0]));
}

ParamRefs CtcHead::params() {
  ParamRefs out;
  proj_.collect(out);
  return out;
}

}  // namespace mfas
