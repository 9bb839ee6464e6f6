#include "ust/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ust {

namespace {

void count_ngrams(const std::vector<int>& seq, int n, std::map<std::vector<int>, int>& out) {
  if (static_cast<int>(seq.size()) < n) return;
  for (size_t i = 0; i + n <= seq.size(); ++i) {
    out[std::vector<int>(seq.begin() + i, seq.begin() + i + n)]++;
  }
}

}  // namespace

BleuResult corpus_bleu(const std::vector<std::vector<int>>& hyps,
                       const std::vector<std::vector<int>>& refs) {
  if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hyps.size()) +
                                " hypotheses vs " + std::to_string(refs.size()) + " references");
  }
  std::array<int64_t, 4> matches{};
  std::array<int64_t, 4> totals{};
  BleuResult res;
  for (size_t s = 0; s < hyps.size(); ++s) {
    res.hyp_len += static_cast<int64_t>(hyps[s].size());
    res.ref_len += static_cast<int64_t>(refs[s].size());
    for (int n = 1; n <= 4; ++n) {
      std::map<std::vector<int>, int> hc, rc;
      count_ngrams(hyps[s], n, hc);
      count_ngrams(refs[s], n, rc);
      for (const auto& [gram, c] : hc) {
        auto it = rc.find(gram);
        if (it != rc.end()) matches[n - 1] += std::min(c, it->second);
        totals[n - 1] += c;
      }
    }
  }
  if (res.hyp_len == 0) return res;  // nothing proposed: bleu 0, bp 0

  for (int n = 0; n < 4; ++n) {
    if (n >= 1 && matches[n] == 0) {
      res.precisions[n] =
          100.0 * static_cast<double>(matches[n] + 1) / static_cast<double>(totals[n] + 1);
    } else {
      res.precisions[n] =
          totals[n] > 0
              ? 100.0 * static_cast<double>(matches[n]) / static_cast<double>(totals[n])
              : 0.0;
    }
  }
  res.brevity_penalty =
      res.hyp_len >= res.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(res.ref_len) / static_cast<double>(res.hyp_len));
  if (res.precisions[0] == 0.0) return res;  // log undefined; bleu stays 0
  // Geometric mean over the 0..1 ratios, scaled afterwards, so a perfect
  // corpus lands on exactly 100 * bp.
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) log_sum += std::log(res.precisions[n] / 100.0);
  res.bleu = res.brevity_penalty * 100.0 * std::exp(log_sum / 4.0);
  return res;
}

BleuResult corpus_bleu_text(const std::vector<std::string>& hyps,
                            const std::vector<std::string>& refs) {
  std::map<std::string, int> ids;
  auto tokenize = [&ids](const std::string& s) {
    std::vector<int> out;
    std::istringstream ss(s);
    std::string w;
    while (ss >> w) out.push_back(ids.emplace(w, static_cast<int>(ids.size())).first->second);
    return out;
  };
  std::vector<std::vector<int>> h, r;
  h.reserve(hyps.size());
  r.reserve(refs.size());
  for (const auto& s : hyps) h.push_back(tokenize(s));
  for (const auto& s : refs) r.push_back(tokenize(s));
  return corpus_bleu(h, r);
}

int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t m = a.size(), n = b.size();
  std::vector<int> prev(n + 1), cur(n + 1);
  for (size_t j = 0; j <= n; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= m; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= n; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

double unit_error_rate(const std::vector<int>& hyp, const std::vector<int>& ref) {
  if (ref.empty()) return hyp.empty() ? 0.0 : static_cast<double>(hyp.size());
  return static_cast<double>(levenshtein(hyp, ref)) / static_cast<double>(ref.size());
}

double snr_db(const std::vector<double>& ref, const std::vector<double>& degraded) {
  if (ref.size() != degraded.size()) {
    throw std::invalid_argument("snr_db: " + std::to_string(ref.size()) + " vs " +
                                std::to_string(degraded.size()) + " samples");
  }
  double sig = 0.0, err = 0.0;
  for (size_t i = 0; i < ref.size(); ++i) {
    sig += ref[i] * ref[i];
    const double d = ref[i] - degraded[i];
    err += d * d;
  }
  if (sig == 0.0) throw std::invalid_argument("snr_db: silent reference");
  if (err == 0.0) return 1000.0;
  return std::min(1000.0, 10.0 * std::log10(sig / err));
}

namespace {

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

void Report::save_kv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("Report: cannot write " + path);
  for (const auto& [k, v] : values) out << k << " = " << format_double(v) << "\n";
  for (const auto& [k, v] : notes) out << k << " = " << v << "\n";
}

void Report::save_json(const std::string& path) const {
  nlohmann::json j;
  for (const auto& [k, v] : values) j["values"][k] = v;
  for (const auto& [k, v] : notes) j["notes"][k] = v;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("Report: cannot write " + path);
  out << j.dump(2) << "\n";
}

Report Report::load_kv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("Report: cannot read " + path);
  Report r;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t sep = line.find(" = ");
    if (sep == std::string::npos) throw std::runtime_error("Report: bad line '" + line + "'");
    const std::string key = line.substr(0, sep);
    const std::string val = line.substr(sep + 3);
    size_t used = 0;
    bool numeric = false;
    double d = 0.0;
    try {
      d = std::stod(val, &used);
      numeric = used == val.size();
    } catch (const std::exception&) {
    }
    if (numeric) {
      r.values[key] = d;
    } else {
      r.notes[key] = val;
    }
  }
  return r;
}

}  // namespace ust
