#pragma once

#include <string>
#include <vector>

#include "mfas/errors.hpp"
#include "mfas/tensor.hpp"

namespace mfas {

inline constexpr int kSampleRate = 16000;
inline constexpr int64_t kSegmentSamples = 48000;  // 3 s at 16 kHz
inline constexpr int64_t kSpecFrames = 300;
inline constexpr int64_t kSpecBins = 200;
inline constexpr int64_t kSpecWindow = 640;  // 40 ms
inline constexpr int64_t kSpecHop = 160;     // 10 ms
inline constexpr int64_t kSpecDft = 800;

struct Waveform {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = kSampleRate;
};

struct Segment {
  std::vector<double> samples;  // exactly kSegmentSamples
  std::string parent_id;
  int index = 0;
};

struct SpectrogramImage {
  Tensor values;  // [kSpecFrames, kSpecBins], log1p magnitude
};

// Consecutive 3 s windows; the final remainder is zero-padded so every
// utterance yields at least one segment.
std::vector<Segment> segment_utterance(const Waveform& w, double segment_seconds = 3.0);

// Hamming windows of 640 samples, hop 160, frames zero-padded to an 800-point
// DFT. 297 natural frames are padded to 300; the 401 magnitude bins drop the
// Nyquist bin and average adjacent pairs down to 200.
SpectrogramImage compute_spectrogram(const Segment& s, bool normalize = false);

// 16-bit PCM mono WAV at 16 kHz.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

// Cache container: magic, shape header, little-endian float32 payload.
void write_spectrogram_cache(const std::string& path, const SpectrogramImage& img);
SpectrogramImage read_spectrogram_cache(const std::string& path);

}  // namespace mfas
