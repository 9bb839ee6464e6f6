#include "ust/bpe.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace ust {

void Vocabulary::rebuild_surface() {
  surface_.clear();
  surface_.reserve(256 + merges_.size());
  for (int b = 0; b < 256; ++b) surface_.push_back(std::string(1, static_cast<char>(b)));
  for (const Merge& m : merges_) {
    surface_.push_back(surface_[static_cast<size_t>(m.left)] +
                       surface_[static_cast<size_t>(m.right)]);
  }
  lookup_.clear();
  longest_ = 1;
  for (size_t i = 0; i < surface_.size(); ++i) {
    lookup_.emplace(surface_[i], static_cast<int>(i));
    longest_ = std::max(longest_, surface_[i].size());
  }
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts,
                             const std::vector<int>& unit_counts, int requested_merges) {
  if (requested_merges < 0) throw std::invalid_argument("build_vocab: merges must be >= 0");
  Vocabulary v;
  v.unit_counts_ = unit_counts;
  for (int k : unit_counts) {
    if (k < 1) throw std::invalid_argument("build_vocab: unit count must be >= 1");
    v.total_units_ += k;
  }

  std::vector<std::vector<int>> seqs;
  seqs.reserve(texts.size());
  for (const std::string& t : texts) {
    std::vector<int> s;
    s.reserve(t.size());
    for (unsigned char c : t) s.push_back(c);
    seqs.push_back(std::move(s));
  }

  for (int step = 0; step < requested_merges; ++step) {
    // Most frequent adjacent pair; ties resolve to the smallest IDs so
    // the result does not depend on map iteration order.
    std::map<std::pair<int, int>, long> counts;
    for (const auto& s : seqs) {
      for (size_t i = 0; i + 1 < s.size(); ++i) counts[{s[i], s[i + 1]}] += 1;
    }
    std::pair<int, int> best{-1, -1};
    long best_count = 1;
    for (const auto& [pair, count] : counts) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      }
    }
    if (best.first < 0) break;  // nothing repeats; a further merge would not compress
    const int new_id = 256 + static_cast<int>(v.merges_.size());
    v.merges_.push_back(Merge{best.first, best.second});
    for (auto& s : seqs) {
      std::vector<int> out;
      out.reserve(s.size());
      for (size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          out.push_back(new_id);
          i += 2;
        } else {
          out.push_back(s[i]);
          i += 1;
        }
      }
      s = std::move(out);
    }
  }

  v.rebuild_surface();
  return v;
}

int Vocabulary::unit_token(int global_unit) const {
  if (global_unit < 0 || global_unit >= total_units_) {
    throw std::out_of_range("unit_token: unit " + std::to_string(global_unit) + " outside 0.." +
                            std::to_string(total_units_ - 1));
  }
  return 256 + merge_count() + global_unit;
}

int Vocabulary::unit_of_token(int token) const {
  const int base = 256 + merge_count();
  if (token < base || token >= base + total_units_) return -1;
  return token - base;
}

std::vector<int> Vocabulary::encode(const std::string& s) const {
  std::vector<int> out;
  size_t i = 0;
  while (i < s.size()) {
    if (s.compare(i, 3, "<u:") == 0) {
      const size_t close = s.find('>', i + 3);
      if (close == std::string::npos) {
        throw std::invalid_argument("unit markup not closed at byte " + std::to_string(i));
      }
      const std::string digits = s.substr(i + 3, close - i - 3);
      if (digits.empty() || digits.size() > 9 ||
          digits.find_first_not_of("0123456789") != std::string::npos ||
          (digits.size() > 1 && digits[0] == '0')) {  // keep markup canonical for round-trips
        throw std::invalid_argument("bad unit markup '" + s.substr(i, close - i + 1) +
                                    "' at byte " + std::to_string(i));
      }
      const long id = std::stol(digits);
      if (id >= total_units_) {
        throw std::invalid_argument("unit " + digits + " out of range at byte " +
                                    std::to_string(i));
      }
      out.push_back(unit_token(static_cast<int>(id)));
      i = close + 1;
      continue;
    }
    size_t len = std::min(longest_, s.size() - i);
    for (; len > 1; --len) {
      if (lookup_.count(s.substr(i, len))) break;
    }
    out.push_back(lookup_.at(s.substr(i, len)));
    i += len;
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < static_cast<int>(surface_.size())) {
      out += surface_[static_cast<size_t>(id)];
    } else if (int u = unit_of_token(id); u >= 0) {
      out += "<u:" + std::to_string(u) + ">";
    } else if (id >= bos() && id <= sep()) {
      // specials carry no surface text
    } else {
      throw std::out_of_range("decode: token " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(size()));
    }
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "ustvocab 1\n";
  out << "merges " << merges_.size() << "\n";
  for (const Merge& m : merges_) out << m.left << ' ' << m.right << "\n";
  out << "units " << unit_counts_.size();
  for (int k : unit_counts_) out << ' ' << k;
  out << "\nspecials bos eos pad sep\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "ustvocab" || version != 1) {
    throw std::runtime_error("not a vocabulary file: " + path);
  }
  Vocabulary v;
  size_t n_merges = 0;
  if (!(in >> tag >> n_merges) || tag != "merges") {
    throw std::runtime_error("bad vocabulary merges header: " + path);
  }
  for (size_t i = 0; i < n_merges; ++i) {
    Merge m{};
    if (!(in >> m.left >> m.right)) throw std::runtime_error("bad merge entry: " + path);
    if (m.left < 0 || m.right < 0 || m.left >= 256 + static_cast<int>(i) ||
        m.right >= 256 + static_cast<int>(i)) {
      throw std::runtime_error("merge references later token: " + path);
    }
    v.merges_.push_back(m);
  }
  size_t n_blocks = 0;
  if (!(in >> tag >> n_blocks) || tag != "units") {
    throw std::runtime_error("bad vocabulary units header: " + path);
  }
  for (size_t i = 0; i < n_blocks; ++i) {
    int k = 0;
    if (!(in >> k) || k < 1) throw std::runtime_error("bad unit count: " + path);
    v.unit_counts_.push_back(k);
    v.total_units_ += k;
  }
  v.rebuild_surface();
  return v;
}

}  // namespace ust
