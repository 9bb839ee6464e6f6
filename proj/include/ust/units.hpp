#pragma once

#include <string>
#include <utility>
#include <vector>

namespace ust {

// Frame-level and run-length views of a discrete unit stream. When both
// views are populated, expanding merged_units by durations reproduces
// frame_units exactly.
struct UnitSequence {
  int vocab_size = 0;                // K; every unit ID < K
  std::vector<int> frame_units;      // z_1 .. z_T
  std::vector<int> merged_units;     // no two adjacent equal
  std::vector<int> durations;        // positive, parallel to merged_units
};

// Run-length encode frame_units into merged_units + durations.
UnitSequence merge_units(const UnitSequence& u);

// Inverse of merge_units. Throws std::invalid_argument naming the
// position of any non-positive duration or length mismatch.
std::vector<int> expand_units(const UnitSequence& u);

// Line-oriented unit file: one record per utterance,
//   <utterance-id> <K> <n> <n merged units> <n durations>
// space-separated, `n` the merged length.
void write_unit_file(const std::string& path,
                     const std::vector<std::pair<std::string, UnitSequence>>& records);
std::vector<std::pair<std::string, UnitSequence>> read_unit_file(const std::string& path);

}  // namespace ust
