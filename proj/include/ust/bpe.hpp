#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace ust {

// Byte-level token vocabulary: 256 byte tokens, learned byte-pair merges,
// a contiguous block of atomic unit tokens (one per semantic cluster ID,
// concatenated over extractors), then the four specials. Unit tokens are
// written in text as the markup `<u:N>` with N a global unit index; the
// three-byte sequence `<u:` is reserved for that markup.
class Vocabulary {
 public:
  // Learns `merges` byte-pair merges on `texts` (stops early if no pair
  // repeats), then appends unit and special tokens. Fully deterministic:
  // ties in pair counts resolve to the smallest token-ID pair.
  static Vocabulary build(const std::vector<std::string>& texts,
                          const std::vector<int>& unit_counts, int requested_merges);

  int size() const { return static_cast<int>(256 + merges_.size()) + total_units_ + 4; }
  int merge_count() const { return static_cast<int>(merges_.size()); }
  int unit_count() const { return total_units_; }

  int unit_token(int global_unit) const;    // token ID for <u:global_unit>
  int unit_of_token(int token) const;       // inverse; -1 if not a unit token
  int bos() const { return 256 + merge_count() + total_units_; }
  int eos() const { return bos() + 1; }
  int pad() const { return bos() + 2; }
  int sep() const { return bos() + 3; }

  // Greedy longest-match tokenization; `<u:N>` markup maps to unit
  // tokens. Throws std::invalid_argument with the byte offset on
  // malformed or out-of-range markup.
  std::vector<int> encode(const std::string& s) const;

  // Inverse of encode. Unit tokens render back to markup; specials render
  // to nothing.
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  struct Merge {
    int left, right;
  };
  std::vector<Merge> merges_;
  std::vector<int> unit_counts_;
  int total_units_ = 0;
  std::vector<std::string> surface_;  // byte + merge token strings
  std::unordered_map<std::string, int> lookup_;
  size_t longest_ = 1;
  void rebuild_surface();
};

}  // namespace ust
