#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ust/matrix.hpp"

namespace ust {

// Named-tensor container with a documented little-endian binary layout:
//
//   bytes 0..7   magic "USTCKPT\0"
//   bytes 8..11  format version (u32, currently 1)
//   bytes 12..15 tensor count (u32)
//   directory    per tensor: name_len u32, name bytes, dtype u8 (0 = f64),
//                rows u64, cols u64, data offset u64 (from start of file)
//   data blocks  raw row-major f64 payloads, in directory order
//
// Round-trips are bit-exact: save followed by load reproduces every
// payload byte. Scalar configuration values ride along as 1x1 tensors.
class Checkpoint {
 public:
  void put(const std::string& name, Mat value);
  void put_scalar(const std::string& name, double value);

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  const Mat& get(const std::string& name) const;          // throws if absent
  double get_scalar(const std::string& name) const;       // throws if absent or not 1x1

  const std::map<std::string, Mat>& tensors() const { return tensors_; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::map<std::string, Mat> tensors_;
};

}  // namespace ust
