#pragma once

#include <string>
#include <vector>

namespace ust {

struct Waveform {
  int sample_rate = 0;
  std::vector<double> samples;  // mono, nominally in [-1, 1]

  bool empty() const { return samples.empty(); }
  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

// 16-bit PCM mono WAV. read_wav rejects other encodings; write_wav clamps
// to [-1, 1] before conversion.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

double rms(const Waveform& w);

}  // namespace ust
