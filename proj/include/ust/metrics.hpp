#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ust {

struct BleuResult {
  double bleu = 0.0;             // 0..100
  double brevity_penalty = 0.0;  // 0..1
  // Modified n-gram precisions (0..100) after smoothing, so that
  // bleu == brevity_penalty * geomean(precisions).
  std::array<double, 4> precisions{};
  int64_t hyp_len = 0;
  int64_t ref_len = 0;
};

// Corpus-level BLEU-4 over token id sequences, one reference per segment,
// on the conventional 0-100 scale (identical corpora score exactly 100).
// Match and total counts pool across segments before the precisions are
// formed. Orders n >= 2 with zero matches get add-one smoothing
// ((m + 1) / (t + 1)); order 1 is never smoothed, so a corpus sharing no
// tokens with its references scores exactly zero.
BleuResult corpus_bleu(const std::vector<std::vector<int>>& hyps,
                       const std::vector<std::vector<int>>& refs);

// Same metric over whitespace-tokenized text.
BleuResult corpus_bleu_text(const std::vector<std::string>& hyps,
                            const std::vector<std::string>& refs);

// Edit distance with unit insert/delete/substitute costs.
int levenshtein(const std::vector<int>& a, const std::vector<int>& b);

// levenshtein(hyp, ref) / len(ref). An empty reference scores 0 against an
// empty hypothesis and len(hyp) otherwise.
double unit_error_rate(const std::vector<int>& hyp, const std::vector<int>& ref);

// 10 log10(sum ref^2 / sum (ref - degraded)^2). Exact reconstruction
// reports the 1000.0 dB sentinel. Throws on length mismatch or an
// all-zero reference.
double snr_db(const std::vector<double>& ref, const std::vector<double>& degraded);

// Deterministic metric report; keys emit in sorted order.
struct Report {
  std::map<std::string, double> values;
  std::map<std::string, std::string> notes;

  void save_kv(const std::string& path) const;    // "key = value" lines
  void save_json(const std::string& path) const;
  static Report load_kv(const std::string& path);
};

}  // namespace ust
