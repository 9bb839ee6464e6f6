#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ust/wav.hpp"

namespace ust {

// Synthetic language pair for desk-scale end-to-end runs. Target units
// are the source units through the bijection f(u) = (map_mul*u + map_add)
// mod unit_vocab; durations follow a fixed per-unit rule; texts are
// deterministic syllable transliterations of the unit sequences.
struct ToySpec {
  int unit_vocab = 50;
  int map_mul = 7;        // gcd(map_mul, unit_vocab) must be 1
  int map_add = 13;
  int min_len = 5;
  int max_len = 15;
  int unit_duration = 2;  // frames per unit, both sides
  std::string src_lang = "Toyish";
  std::string tgt_lang = "Glopish";

  int map_unit(int u) const { return (map_mul * u + map_add) % unit_vocab; }
};

struct ToyRecord {
  std::string id;
  std::vector<int> src_units, src_durs;  // merged units + durations
  std::vector<int> tgt_units, tgt_durs;
  std::string src_text, tgt_text;
};

// n records with IDs `<id_prefix><index>`. Deterministic in (spec, seed).
std::vector<ToyRecord> gen_toy_pairs(const ToySpec& spec, int n, uint64_t seed,
                                     const std::string& id_prefix);

// Unit u sounds as a pure tone at 200 + 50*u Hz for unit_duration frames
// of 20 ms each. Tones are frame-aligned whole-cycle sines, so every
// frame of a unit is sample-identical.
Waveform synth_toy_audio(const std::vector<int>& units, const std::vector<int>& durs,
                         int sample_rate);

double toy_tone_hz(int unit);

// Record file, one per line (languages live in the run manifest):
//   <id>|<src units>|<src durs>|<tgt units>|<tgt durs>|<src text>|<tgt text>
// with the integer lists space-separated.
void write_toy_records(const std::string& path, const std::vector<ToyRecord>& records);
std::vector<ToyRecord> read_toy_records(const std::string& path);

}  // namespace ust
