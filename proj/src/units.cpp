#include "ust/units.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ust {

UnitSequence merge_units(const UnitSequence& u) {
  UnitSequence out;
  out.vocab_size = u.vocab_size;
  out.frame_units = u.frame_units;
  for (size_t i = 0; i < u.frame_units.size(); ++i) {
    if (!out.merged_units.empty() && out.merged_units.back() == u.frame_units[i]) {
      out.durations.back() += 1;
    } else {
      out.merged_units.push_back(u.frame_units[i]);
      out.durations.push_back(1);
    }
  }
  return out;
}

std::vector<int> expand_units(const UnitSequence& u) {
  if (u.merged_units.size() != u.durations.size()) {
    throw std::invalid_argument("expand_units: " + std::to_string(u.merged_units.size()) +
                                " units vs " + std::to_string(u.durations.size()) +
                                " durations");
  }
  std::vector<int> out;
  for (size_t i = 0; i < u.merged_units.size(); ++i) {
    if (u.durations[i] < 1) {
      throw std::invalid_argument("expand_units: duration " + std::to_string(u.durations[i]) +
                                  " at position " + std::to_string(i));
    }
    out.insert(out.end(), static_cast<size_t>(u.durations[i]), u.merged_units[i]);
  }
  return out;
}

void write_unit_file(const std::string& path,
                     const std::vector<std::pair<std::string, UnitSequence>>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& [id, u] : records) {
    out << id << ' ' << u.vocab_size << ' ' << u.merged_units.size();
    for (int x : u.merged_units) out << ' ' << x;
    for (int d : u.durations) out << ' ' << d;
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::pair<std::string, UnitSequence>> read_unit_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<std::pair<std::string, UnitSequence>> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id;
    UnitSequence u;
    size_t n = 0;
    if (!(ss >> id >> u.vocab_size >> n)) {
      throw std::runtime_error("bad unit record at " + path + ":" + std::to_string(line_no));
    }
    u.merged_units.resize(n);
    u.durations.resize(n);
    for (size_t i = 0; i < n; ++i) {
      if (!(ss >> u.merged_units[i])) {
        throw std::runtime_error("bad unit list at " + path + ":" + std::to_string(line_no));
      }
    }
    for (size_t i = 0; i < n; ++i) {
      if (!(ss >> u.durations[i])) {
        throw std::runtime_error("bad duration list at " + path + ":" + std::to_string(line_no));
      }
    }
    records.emplace_back(std::move(id), std::move(u));
  }
  return records;
}

}  // namespace ust
