#include "ust/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ust {

namespace {

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("wav truncated: " + path);
  return v;
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);

  char riff[4], wave[4];
  in.read(riff, 4);
  if (!in || std::memcmp(riff, "RIFF", 4) != 0) throw std::runtime_error("not RIFF: " + path);
  read_pod<uint32_t>(in, path);  // total size, unused
  in.read(wave, 4);
  if (!in || std::memcmp(wave, "WAVE", 4) != 0) throw std::runtime_error("not WAVE: " + path);

  uint16_t channels = 0, bits = 0, format = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  Waveform w;

  while (in) {
    char id[4];
    in.read(id, 4);
    if (!in) break;
    uint32_t size = read_pod<uint32_t>(in, path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      format = read_pod<uint16_t>(in, path);
      channels = read_pod<uint16_t>(in, path);
      rate = read_pod<uint32_t>(in, path);
      read_pod<uint32_t>(in, path);  // byte rate
      read_pod<uint16_t>(in, path);  // block align
      bits = read_pod<uint16_t>(in, path);
      if (size > 16) in.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw std::runtime_error("wav data before fmt: " + path);
      if (format != 1 || bits != 16) {
        throw std::runtime_error("only 16-bit PCM supported: " + path);
      }
      if (channels != 1) throw std::runtime_error("only mono supported: " + path);
      const size_t n = size / 2;
      std::vector<int16_t> raw(n);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(size));
      if (!in) throw std::runtime_error("wav truncated: " + path);
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(n);
      for (size_t i = 0; i < n; ++i) w.samples[i] = raw[i] / 32768.0;
      return w;
    } else {
      in.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw std::runtime_error("wav has no data chunk: " + path);
}

void write_wav(const std::string& path, const Waveform& w) {
  if (w.sample_rate <= 0) throw std::invalid_argument("write_wav: sample_rate must be > 0");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);

  const uint32_t data_bytes = static_cast<uint32_t>(w.samples.size() * 2);
  out.write("RIFF", 4);
  write_pod<uint32_t>(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_pod<uint32_t>(out, 16);
  write_pod<uint16_t>(out, 1);  // PCM
  write_pod<uint16_t>(out, 1);  // mono
  write_pod<uint32_t>(out, static_cast<uint32_t>(w.sample_rate));
  write_pod<uint32_t>(out, static_cast<uint32_t>(w.sample_rate * 2));
  write_pod<uint16_t>(out, 2);
  write_pod<uint16_t>(out, 16);
  out.write("data", 4);
  write_pod<uint32_t>(out, data_bytes);
  for (double s : w.samples) {
    double c = s < -1.0 ? -1.0 : (s > 1.0 ? 1.0 : s);
    long v = std::lrint(c * 32768.0);
    if (v > 32767) v = 32767;
    if (v < -32768) v = -32768;
    write_pod<int16_t>(out, static_cast<int16_t>(v));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

double rms(const Waveform& w) {
  if (w.samples.empty()) return 0.0;
  double sq = 0.0;
  for (double s : w.samples) sq += s * s;
  return std::sqrt(sq / static_cast<double>(w.samples.size()));
}

}  // namespace ust
