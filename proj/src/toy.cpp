#include "ust/toy.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ust/rng.hpp"

namespace ust {

namespace {

constexpr double kPi = 3.14159265358979323846;

const char* kSrcOnsets[] = {"b", "d", "g", "k", "l", "m", "n", "p", "r", "t"};
const char* kSrcNuclei[] = {"a", "e", "i", "o", "u"};
const char* kTgtOnsets[] = {"bl", "dr", "fl", "gr", "kl", "pr", "sk", "st", "tr", "vl"};
const char* kTgtNuclei[] = {"aa", "ee", "ii", "oo", "uu"};

std::string syllable(int unit, bool target) {
  const auto on = static_cast<size_t>(unit) % 10;
  const auto nu = (static_cast<size_t>(unit) / 10) % 5;
  return target ? std::string(kTgtOnsets[on]) + kTgtNuclei[nu]
                : std::string(kSrcOnsets[on]) + kSrcNuclei[nu];
}

std::string transliterate(const std::vector<int>& units, bool target) {
  std::string text;
  for (size_t i = 0; i < units.size(); ++i) {
    if (i) text += ' ';
    text += syllable(units[i], target);
  }
  return text;
}

}  // namespace

std::vector<ToyRecord> gen_toy_pairs(const ToySpec& spec, int n, uint64_t seed,
                                     const std::string& id_prefix) {
  if (spec.unit_vocab < 2 || spec.min_len < 1 || spec.max_len < spec.min_len) {
    throw std::invalid_argument("gen_toy_pairs: bad spec");
  }
  if (std::gcd(spec.map_mul, spec.unit_vocab) != 1) {
    throw std::invalid_argument("gen_toy_pairs: map_mul " + std::to_string(spec.map_mul) +
                                " shares a factor with vocab " +
                                std::to_string(spec.unit_vocab));
  }
  std::vector<ToyRecord> out;
  out.reserve(static_cast<size_t>(n));
  CounterRng rng(seed, 0x70797061u);
  for (int i = 0; i < n; ++i) {
    ToyRecord r;
    r.id = id_prefix + std::to_string(i);
    const int len = spec.min_len +
                    static_cast<int>(rng.next_below(
                        static_cast<uint64_t>(spec.max_len - spec.min_len + 1)));
    int prev = -1;
    for (int u = 0; u < len; ++u) {
      int unit;
      do {
        unit = static_cast<int>(rng.next_below(static_cast<uint64_t>(spec.unit_vocab)));
      } while (unit == prev);
      r.src_units.push_back(unit);
      r.src_durs.push_back(spec.unit_duration);
      prev = unit;
    }
    for (int u : r.src_units) {
      r.tgt_units.push_back(spec.map_unit(u));
      r.tgt_durs.push_back(spec.unit_duration);
    }
    r.src_text = transliterate(r.src_units, false);
    r.tgt_text = transliterate(r.tgt_units, true);
    out.push_back(std::move(r));
  }
  return out;
}

double toy_tone_hz(int unit) { return 200.0 + 50.0 * unit; }

Waveform synth_toy_audio(const std::vector<int>& units, const std::vector<int>& durs,
                         int sample_rate) {
  if (units.size() != durs.size()) {
    throw std::invalid_argument("synth_toy_audio: " + std::to_string(units.size()) +
                                " units vs " + std::to_string(durs.size()) + " durations");
  }
  if (sample_rate % 50 != 0) {
    throw std::invalid_argument("synth_toy_audio: sample rate must hold whole 20 ms frames");
  }
  const int frame = sample_rate / 50;
  Waveform w;
  w.sample_rate = sample_rate;
  for (size_t i = 0; i < units.size(); ++i) {
    if (durs[i] < 1) {
      throw std::invalid_argument("synth_toy_audio: duration " + std::to_string(durs[i]) +
                                  " at position " + std::to_string(i));
    }
    const double hz = toy_tone_hz(units[i]);
    const int len = durs[i] * frame;
    // Tones complete whole cycles per 20 ms frame, so phase can restart each
    // frame; repeated frames of a unit come out sample-identical.
    for (int s = 0; s < len; ++s) {
      w.samples.push_back(
          0.3 * std::sin(2.0 * kPi * hz * static_cast<double>(s % frame) / sample_rate));
    }
  }
  return w;
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<int> split_ints(const std::string& s, const std::string& where) {
  std::vector<int> out;
  std::istringstream ss(s);
  int x;
  while (ss >> x) out.push_back(x);
  if (!ss.eof()) throw std::runtime_error("bad integer list in " + where);
  return out;
}

}  // namespace

void write_toy_records(const std::string& path, const std::vector<ToyRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const ToyRecord& r : records) {
    out << r.id << '|' << join_ints(r.src_units) << '|' << join_ints(r.src_durs) << '|'
        << join_ints(r.tgt_units) << '|' << join_ints(r.tgt_durs) << '|' << r.src_text << '|'
        << r.tgt_text << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<ToyRecord> read_toy_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<ToyRecord> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::string cur;
    for (char c : line) {
      if (c == '|') {
        parts.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    parts.push_back(cur);
    if (parts.size() != 7) {
      throw std::runtime_error("bad toy record at " + path + ":" + std::to_string(line_no));
    }
    const std::string where = path + ":" + std::to_string(line_no);
    ToyRecord r;
    r.id = parts[0];
    r.src_units = split_ints(parts[1], where);
    r.src_durs = split_ints(parts[2], where);
    r.tgt_units = split_ints(parts[3], where);
    r.tgt_durs = split_ints(parts[4], where);
    r.src_text = parts[5];
    r.tgt_text = parts[6];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ust
