#include "mfas/coattention.hpp"

namespace mfas {

void HeadConfig::validate() const {
  if (n_guides < 1) throw ConfigError("head: n_guides must be >= 1");
  if (n_classes < 2) throw ConfigError("head: n_classes must be >= 2");
  if (conv_channels.empty()) throw ConfigError("head: conv stack must have stages");
  if (conv_kernel < 1 || conv_stride < 1) throw ConfigError("head: bad conv geometry");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("head: dropout must be in [0, 1)");
  auto [h, w] = conv_output_hw();
  if (h < 1 || w < 1)
    throw ConfigError("head: spectrogram too small for the conv stack");
}

std::pair<int64_t, int64_t> HeadConfig::conv_output_hw() const {
  int64_t h = spec_h, w = spec_w;
  for (size_t i = 0; i < conv_channels.size(); ++i) {
    h = (h - conv_kernel) / conv_stride + 1;
    w = (w - conv_kernel) / conv_stride + 1;
    if (h < 1 || w < 1) return {h, w};
  }
  return {h, w};
}

nlohmann::json HeadConfig::to_json() const {
  return {{"n_guides", n_guides},       {"mlp_hidden", mlp_hidden},
          {"n_classes", n_classes},     {"with_vad_head", with_vad_head},
          {"dropout", dropout},         {"conv_channels", conv_channels},
          {"conv_kernel", conv_kernel}, {"conv_stride", conv_stride},
          {"spec_h", spec_h},           {"spec_w", spec_w}};
}

HeadConfig HeadConfig::from_json(const nlohmann::json& j) {
  HeadConfig c;
  c.n_guides = j.value("n_guides", c.n_guides);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.with_vad_head = j.value("with_vad_head", c.with_vad_head);
  c.dropout = j.value("dropout", c.dropout);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
  c.conv_stride = j.value("conv_stride", c.conv_stride);
  c.spec_h = j.value("spec_h", c.spec_h);
  c.spec_w = j.value("spec_w", c.spec_w);
  return c;
}

Var coattend(Tape& t, Var guide, Var frames) {
  const Tensor& g = t.val(guide);
  const Tensor& f = t.val(frames);
  if (g.shape.size() != 3 || f.shape.size() != 3 || g.shape[0] != f.shape[0] ||
      g.shape[2] != f.shape[1])
    throw InputError("coattend: guide " + g.shape_str() + " does not pool frames " +
                     f.shape_str());
  return t.bmm(t.softmax_last(guide), frames);  // [B,N,T] x [B,T,D] -> [B,N,D]
}

CoattentionHead::CoattentionHead(HeadConfig cfg, int64_t model_dim, int64_t n_frames,
                                 uint64_t seed)
    : cfg_(std::move(cfg)), model_dim_(model_dim), n_frames_(n_frames) {
  cfg_.validate();
  if (model_dim_ < 1 || n_frames_ < 1) throw ConfigError("head: bad stream geometry");
  std::mt19937_64 rng(seed);
  int64_t ci = 1;
  for (size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
    int64_t co = cfg_.conv_channels[i];
    conv_.emplace_back("head.conv" + std::to_string(i),
                       cfg_.conv_kernel * cfg_.conv_kernel * ci, co, rng);
    ci = co;
  }
  auto [h, w] = cfg_.conv_output_hw();
  guide_proj_ = Linear("head.guide", h * w * ci, 2 * cfg_.n_guides * n_frames_, rng);
  int64_t in = 2 * cfg_.n_guides * model_dim_;
  for (size_t i = 0; i < cfg_.mlp_hidden.size(); ++i) {
    mlp_.emplace_back("head.mlp" + std::to_string(i), in, cfg_.mlp_hidden[i], rng);
    in = cfg_.mlp_hidden[i];
  }
  class_out_ = Linear("head.class", in, cfg_.n_classes, rng);
  if (cfg_.with_vad_head) vad_out_ = Linear("head.vad", in, 3, rng);
}

GuideVectors CoattentionHead::encode_guides(Tape& t, Var spec) {
  const Tensor& sv = t.val(spec);
  if (sv.shape.size() != 3 || sv.shape[1] != cfg_.spec_h || sv.shape[2] != cfg_.spec_w)
    throw ConfigError("encode_guides: expected [B," + std::to_string(cfg_.spec_h) + "," +
                      std::to_string(cfg_.spec_w) + "] spectrogram, got " + sv.shape_str());
  int64_t B = sv.shape[0];
  Var x = t.reshape(spec, {B, cfg_.spec_h, cfg_.spec_w, 1});
  for (Linear& c : conv_)
    x = t.relu(t.conv2d(x, t.param(c.w), t.param(c.b), cfg_.conv_kernel, cfg_.conv_kernel,
                        cfg_.conv_stride));
  const Tensor& xv = t.val(x);
  x = t.reshape(x, {B, xv.shape[1] * xv.shape[2] * xv.shape[3]});

  GuideVectors g;
  int64_t nt = cfg_.n_guides * n_frames_;
  g.x_s = guide_proj_.forward(t, x);  // [B, 2*N*T]
  g.x_s1 = t.reshape(t.slice_last(g.x_s, 0, nt), {B, cfg_.n_guides, n_frames_});
  g.x_s2 = t.reshape(t.slice_last(g.x_s, nt, 2 * nt), {B, cfg_.n_guides, n_frames_});
  return g;
}

HeadOutput CoattentionHead::classify(Tape& t, Var e_pooled, Var o_pooled,
                                     std::mt19937_64& rng, bool train) {
  const Tensor& ev = t.val(e_pooled);
  int64_t B = ev.shape[0];
  Var h = t.concat_last(t.reshape(e_pooled, {B, cfg_.n_guides * model_dim_}),
                        t.reshape(o_pooled, {B, cfg_.n_guides * model_dim_}));
  for (Linear& l : mlp_) {
    h = t.relu(l.forward(t, h));
    if (train && cfg_.dropout > 0.0) h = t.dropout(h, cfg_.dropout, rng);
  }
  HeadOutput out;
  out.logits = class_out_.forward(t, h);
  if (cfg_.with_vad_head) out.vad = vad_out_.forward(t, h);
  return out;
}

ParamRefs CoattentionHead::params() {
  ParamRefs out;
  for (Linear& c : conv_) c.collect(out);
  guide_proj_.collect(out);
  for (Linear& l : mlp_) l.collect(out);
  class_out_.collect(out);
  if (cfg_.with_vad_head) vad_out_.collect(out);
  return out;
}

}  // namespace mfas
