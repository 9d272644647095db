#include "mfas/audio.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace mfas {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<Segment> segment_utterance(const Waveform& w, double segment_seconds) {
  if (w.samples.empty()) throw InputError("segment_utterance: empty waveform");
  if (w.sample_rate != kSampleRate)
    throw InputError("segment_utterance: sample rate must be 16000");
  int64_t seg_len = static_cast<int64_t>(std::llround(segment_seconds * w.sample_rate));
  int64_t n = static_cast<int64_t>(w.samples.size());
  int64_t n_segments = (n + seg_len - 1) / seg_len;
  std::vector<Segment> out;
  out.reserve(static_cast<size_t>(n_segments));
  for (int64_t i = 0; i < n_segments; ++i) {
    Segment s;
    s.index = static_cast<int>(i);
    s.samples.assign(static_cast<size_t>(seg_len), 0.0);
    int64_t from = i * seg_len;
    int64_t count = std::min(seg_len, n - from);
    std::copy(w.samples.begin() + from, w.samples.begin() + from + count,
              s.samples.begin());
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

// Precomputed windowed-DFT basis: rows are window taps, columns frequency bins.
struct DftBasis {
  RowMat cos_m, sin_m;  // [kSpecWindow, kSpecDft/2 + 1]
  std::vector<double> window;
  DftBasis() {
    int64_t bins = kSpecDft / 2 + 1;
    cos_m.resize(kSpecWindow, bins);
    sin_m.resize(kSpecWindow, bins);
    window.resize(static_cast<size_t>(kSpecWindow));
    for (int64_t n = 0; n < kSpecWindow; ++n)
      window[static_cast<size_t>(n)] =
          0.54 - 0.46 * std::cos(2.0 * M_PI * static_cast<double>(n) /
                                 static_cast<double>(kSpecWindow - 1));
    for (int64_t n = 0; n < kSpecWindow; ++n)
      for (int64_t k = 0; k < bins; ++k) {
        double ang = 2.0 * M_PI * static_cast<double>(n) * static_cast<double>(k) /
                     static_cast<double>(kSpecDft);
        cos_m(n, k) = std::cos(ang);
        sin_m(n, k) = std::sin(ang);
      }
  }
};

}  // namespace

SpectrogramImage compute_spectrogram(const Segment& s, bool normalize) {
  if (static_cast<int64_t>(s.samples.size()) != kSegmentSamples)
    throw InputError("compute_spectrogram: segment must have 48000 samples");
  static const DftBasis basis;
  int64_t raw_frames = (kSegmentSamples - kSpecWindow) / kSpecHop + 1;  // 297

  RowMat frames(raw_frames, kSpecWindow);
  for (int64_t f = 0; f < raw_frames; ++f)
    for (int64_t n = 0; n < kSpecWindow; ++n)
      frames(f, n) = s.samples[static_cast<size_t>(f * kSpecHop + n)] *
                     basis.window[static_cast<size_t>(n)];

  // zero-padding the frame to 800 points leaves the basis rows beyond the
  // window unused, so a [raw, 640] x [640, 401] product suffices
  RowMat re = frames * basis.cos_m;
  RowMat im = frames * basis.sin_m;

  SpectrogramImage img;
  img.values = Tensor::zeros({kSpecFrames, kSpecBins});
  for (int64_t f = 0; f < raw_frames; ++f)
    for (int64_t b = 0; b < kSpecBins; ++b) {
      // drop the Nyquist bin (401 -> 400), then average adjacent pairs
      double m0 = std::hypot(re(f, 2 * b), im(f, 2 * b));
      double m1 = std::hypot(re(f, 2 * b + 1), im(f, 2 * b + 1));
      img.values.at(f, b) = std::log1p(0.5 * (m0 + m1));
    }
  // frames raw_frames..kSpecFrames-1 stay all-zero

  if (normalize) {
    double mean = 0;
    for (double v : img.values.data) mean += v;
    mean /= static_cast<double>(img.values.numel());
    double var = 0;
    for (double v : img.values.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(img.values.numel());
    double inv = 1.0 / std::sqrt(var + 1e-8);
    for (double& v : img.values.data) v = (v - mean) * inv;
  }
  return img;
}

// ------------------------------------------------------------------- WAV I/O

namespace {
void put_u32(std::ofstream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void put_u16(std::ofstream& os, uint16_t v) { os.write(reinterpret_cast<char*>(&v), 2); }
uint32_t get_u32(std::ifstream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint16_t get_u16(std::ifstream& is) {
  uint16_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 2);
  return v;
}
}  // namespace

void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_wav: cannot open " + path);
  uint32_t n = static_cast<uint32_t>(w.samples.size());
  uint32_t data_bytes = n * 2;
  os.write("RIFF", 4);
  put_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put_u32(os, 16);
  put_u16(os, 1);  // PCM
  put_u16(os, 1);  // mono
  put_u32(os, static_cast<uint32_t>(w.sample_rate));
  put_u32(os, static_cast<uint32_t>(w.sample_rate * 2));
  put_u16(os, 2);
  put_u16(os, 16);
  os.write("data", 4);
  put_u32(os, data_bytes);
  for (double x : w.samples) {
    double c = std::clamp(x, -1.0, 1.0);
    int16_t s = static_cast<int16_t>(std::lround(c * 32767.0));
    os.write(reinterpret_cast<char*>(&s), 2);
  }
}

Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_wav: cannot open " + path);
  char tag[5] = {0};
  is.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw DataError("read_wav: not RIFF: " + path);
  get_u32(is);
  is.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw DataError("read_wav: not WAVE: " + path);

  Waveform w;
  uint16_t bits = 0, channels = 0;
  bool got_fmt = false;
  while (is.read(tag, 4)) {
    uint32_t len = get_u32(is);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      uint16_t fmt = get_u16(is);
      channels = get_u16(is);
      w.sample_rate = static_cast<int>(get_u32(is));
      get_u32(is);
      get_u16(is);
      bits = get_u16(is);
      if (len > 16) is.seekg(len - 16, std::ios::cur);
      if (fmt != 1) throw DataError("read_wav: only PCM supported: " + path);
      got_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (!got_fmt || channels != 1 || bits != 16)
        throw DataError("read_wav: expected 16-bit mono PCM: " + path);
      uint32_t n = len / 2;
      w.samples.resize(n);
      for (uint32_t i = 0; i < n; ++i) {
        int16_t s = 0;
        is.read(reinterpret_cast<char*>(&s), 2);
        w.samples[i] = static_cast<double>(s) / 32767.0;
      }
      if (w.sample_rate != kSampleRate)
        throw DataError("read_wav: sample rate must be 16000: " + path);
      return w;
    } else {
      is.seekg(len, std::ios::cur);
    }
  }
  throw DataError("read_wav: no data chunk: " + path);
}

// --------------------------------------------------------- spectrogram cache

void write_spectrogram_cache(const std::string& path, const SpectrogramImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("spectrogram cache: cannot open " + path);
  os.write("MFSP", 4);
  put_u32(os, 1);  // version
  put_u32(os, static_cast<uint32_t>(img.values.shape[0]));
  put_u32(os, static_cast<uint32_t>(img.values.shape[1]));
  for (double v : img.values.data) {
    float f = static_cast<float>(v);
    os.write(reinterpret_cast<char*>(&f), 4);
  }
}

SpectrogramImage read_spectrogram_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("spectrogram cache: cannot open " + path);
  char tag[5] = {0};
  is.read(tag, 4);
  if (std::strncmp(tag, "MFSP", 4) != 0) throw DataError("spectrogram cache: bad magic");
  if (get_u32(is) != 1) throw DataError("spectrogram cache: unsupported version");
  int64_t rows = get_u32(is), cols = get_u32(is);
  SpectrogramImage img;
  img.values = Tensor::zeros({rows, cols});
  for (int64_t i = 0; i < rows * cols; ++i) {
    float f = 0;
    is.read(reinterpret_cast<char*>(&f), 4);
    img.values[i] = static_cast<double>(f);
  }
  if (!is) throw DataError("spectrogram cache: truncated file");
  return img;
}

}  // namespace mfas
