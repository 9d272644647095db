#include "mfas/encoder.hpp"

#include <algorithm>

namespace mfas {

void EncoderConfig::validate() const {
  if (conv_strides.size() != conv_kernels.size())
    throw ConfigError("encoder config: conv_strides and conv_kernels length mismatch");
  if (conv_strides.empty()) throw ConfigError("encoder config: empty conv stack");
  if (n_heads < 1 || model_dim % n_heads != 0)
    throw ConfigError("encoder config: model_dim must be divisible by n_heads");
  if (n_layers < 2 || n_layers % 2 != 0)
    throw ConfigError("encoder config: n_layers must be even and >= 2");
  if (mask_prob < 0 || mask_prob > 1 || mask_span < 1)
    throw ConfigError("encoder config: bad mask policy");
}

int64_t EncoderConfig::receptive_field() const {
  // smallest input that yields one output frame
  int64_t len = 1;
  for (size_t i = conv_strides.size(); i-- > 0;)
    len = (len - 1) * conv_strides[i] + conv_kernels[i];
  return len;
}

int64_t EncoderConfig::output_frames(int64_t input_len) const {
  int64_t len = input_len;
  for (size_t i = 0; i < conv_strides.size(); ++i) {
    if (len < conv_kernels[i]) return 0;
    len = (len - conv_kernels[i]) / conv_strides[i] + 1;
  }
  return len;
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"conv_strides", conv_strides}, {"conv_kernels", conv_kernels},
          {"conv_channels", conv_channels}, {"n_layers", n_layers},
          {"model_dim", model_dim},       {"ffn_dim", ffn_dim},
          {"n_heads", n_heads},           {"max_frames", max_frames},
          {"mask_prob", mask_prob},       {"mask_span", mask_span}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.conv_strides = j.value("conv_strides", c.conv_strides);
  c.conv_kernels = j.value("conv_kernels", c.conv_kernels);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_frames = j.value("max_frames", c.max_frames);
  c.mask_prob = j.value("mask_prob", c.mask_prob);
  c.mask_span = j.value("mask_span", c.mask_span);
  c.validate();
  return c;
}

std::vector<FramePos> MaskSpec::positions() const {
  std::vector<FramePos> out;
  for (size_t b = 0; b < indices.size(); ++b)
    for (int64_t t : indices[b]) out.push_back({static_cast<int64_t>(b), t});
  return out;
}

int64_t MaskSpec::total() const {
  int64_t n = 0;
  for (const auto& v : indices) n += static_cast<int64_t>(v.size());
  return n;
}

MaskSpec sample_mask(int64_t batch, int64_t T, double mask_prob, int64_t span,
                     uint64_t seed) {
  if (mask_prob < 0 || mask_prob > 1 || span < 1)
    throw InputError("sample_mask: bad policy");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MaskSpec spec;
  spec.indices.resize(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    std::vector<bool> masked(static_cast<size_t>(T), false);
    for (int64_t t = 0; t < T; ++t)
      if (u(rng) < mask_prob)
        for (int64_t s = t; s < std::min(T, t + span); ++s)
          masked[static_cast<size_t>(s)] = true;
    for (int64_t t = 0; t < T; ++t)
      if (masked[static_cast<size_t>(t)]) spec.indices[static_cast<size_t>(b)].push_back(t);
  }
  return spec;
}

SpeechEncoder::SpeechEncoder(EncoderConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  int64_t ci = 1;
  for (size_t i = 0; i < cfg_.conv_strides.size(); ++i) {
    std::string name = "enc.conv" + std::to_string(i);
    ConvStage stage;
    stage.w = Linear(name, cfg_.conv_kernels[i] * ci, cfg_.conv_channels, rng);
    stage.norm = LayerNorm(name + ".norm", cfg_.conv_channels);
    conv_.push_back(std::move(stage));
    ci = cfg_.conv_channels;
  }
  proj_ = Linear("enc.proj", cfg_.conv_channels, cfg_.model_dim, rng);
  pos_ = Param("enc.pos", Tensor::randn({cfg_.max_frames, cfg_.model_dim}, 0.02, rng));
  mask_token_ = Param("enc.mask_token", Tensor::randn({cfg_.model_dim}, 0.02, rng));
  for (int64_t l = 0; l < cfg_.n_layers; ++l)
    layers_.emplace_back("enc.layer" + std::to_string(l), cfg_.model_dim, cfg_.ffn_dim,
                         cfg_.n_heads, rng);
}

Var SpeechEncoder::encode_frames(Tape& t, const Tensor& segments) {
  if (segments.ndim() != 2) throw InputError("encode_frames: segments must be [B, L]");
  int64_t L = segments.shape[1];
  if (L < cfg_.receptive_field())
    throw InputError("encode_frames: input shorter than receptive field");
  Tensor x3(std::vector<int64_t>{segments.shape[0], L, 1}, segments.data);
  Var x = t.leaf(std::move(x3));
  for (size_t i = 0; i < conv_.size(); ++i) {
    x = t.conv1d(x, t.param(conv_[i].w.w), t.param(conv_[i].w.b), cfg_.conv_kernels[i],
                 cfg_.conv_strides[i]);
    x = conv_[i].norm.forward(t, x);
    x = t.gelu(x);
  }
  return proj_.forward(t, x);
}

Var SpeechEncoder::apply_mask(Tape& t, Var x, const MaskSpec& spec) {
  const Tensor& xv = t.val(x);
  if (static_cast<int64_t>(spec.indices.size()) != xv.shape[0])
    throw InputError("apply_mask: batch size mismatch");
  for (const auto& batch : spec.indices)
    for (int64_t z : batch)
      if (z < 0 || z >= xv.shape[1]) throw InputError("apply_mask: index out of range");
  return t.mask_replace(x, spec.positions(), t.param(mask_token_));
}

LayerTapBundle SpeechEncoder::transform_with_taps(Tape& t, Var x) {
  const Tensor& xv = t.val(x);
  int64_t T = xv.shape[1];
  if (T > cfg_.max_frames) throw InputError("transform_with_taps: too many frames");
  Var pos = t.slice_axis0(t.param(pos_), 0, T);
  Var h = t.add_broadcast0(x, pos);
  LayerTapBundle bundle;
  for (auto& layer : layers_) {
    h = layer.forward(t, h);
    bundle.taps.push_back(h);
  }
  return bundle;
}

ParamRefs SpeechEncoder::params() {
  ParamRefs out;
  for (auto& stage : conv_) {
    stage.w.collect(out);
    stage.norm.collect(out);
  }
  proj_.collect(out);
  out.push_back(&pos_);
  out.push_back(&mask_token_);
  for (auto& layer : layers_) layer.collect(out);
  return out;
}

}  // namespace mfas
