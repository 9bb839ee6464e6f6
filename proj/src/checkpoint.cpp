#include "ust/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace ust {

namespace {

constexpr char kMagic[8] = {'U', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kVersion = 1;

void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  write_bytes(out, &v, sizeof(v));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("checkpoint truncated: " + path);
  return v;
}

}  // namespace

void Checkpoint::put(const std::string& name, Mat value) {
  if (name.empty()) throw std::invalid_argument("checkpoint tensor name is empty");
  require_finite(value, "checkpoint tensor " + name);
  tensors_[name] = std::move(value);
}

void Checkpoint::put_scalar(const std::string& name, double value) {
  Mat m(1, 1);
  m(0, 0) = value;
  put(name, std::move(m));
}

const Mat& Checkpoint::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw std::out_of_range("checkpoint has no tensor named " + name);
  }
  return it->second;
}

double Checkpoint::get_scalar(const std::string& name) const {
  const Mat& m = get(name);
  if (m.rows() != 1 || m.cols() != 1) {
    throw std::invalid_argument("checkpoint tensor " + name + " is not scalar");
  }
  return m(0, 0);
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);

  write_bytes(out, kMagic, sizeof(kMagic));
  write_pod<uint32_t>(out, kVersion);
  write_pod<uint32_t>(out, static_cast<uint32_t>(tensors_.size()));

  // Directory size must be known to assign offsets; compute it first.
  uint64_t dir_bytes = 0;
  for (const auto& [name, m] : tensors_) {
    dir_bytes += 4 + name.size() + 1 + 8 + 8 + 8;
    (void)m;
  }
  uint64_t offset = 8 + 4 + 4 + dir_bytes;
  for (const auto& [name, m] : tensors_) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    write_bytes(out, name.data(), name.size());
    write_pod<uint8_t>(out, 0);  // f64
    write_pod<uint64_t>(out, static_cast<uint64_t>(m.rows()));
    write_pod<uint64_t>(out, static_cast<uint64_t>(m.cols()));
    write_pod<uint64_t>(out, offset);
    offset += static_cast<uint64_t>(m.size()) * sizeof(double);
  }
  for (const auto& [name, m] : tensors_) {
    (void)name;
    write_bytes(out, m.data(), static_cast<size_t>(m.size()) * sizeof(double));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  uint32_t version = read_pod<uint32_t>(in, path);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                             " in " + path);
  }
  uint32_t count = read_pod<uint32_t>(in, path);

  struct Entry {
    std::string name;
    uint64_t rows, cols, offset;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw std::runtime_error("checkpoint truncated: " + path);
    uint8_t dtype = read_pod<uint8_t>(in, path);
    if (dtype != 0) {
      throw std::runtime_error("unsupported dtype " + std::to_string(dtype) + " for tensor " +
                               name + " in " + path);
    }
    uint64_t rows = read_pod<uint64_t>(in, path);
    uint64_t cols = read_pod<uint64_t>(in, path);
    uint64_t offset = read_pod<uint64_t>(in, path);
    entries.push_back(Entry{std::move(name), rows, cols, offset});
  }

  Checkpoint ck;
  for (const auto& e : entries) {
    Mat m(static_cast<Eigen::Index>(e.rows), static_cast<Eigen::Index>(e.cols));
    in.seekg(static_cast<std::streamoff>(e.offset));
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(e.rows * e.cols * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint truncated reading " + e.name + ": " + path);
    ck.tensors_[e.name] = std::move(m);
  }
  return ck;
}

}  // namespace ust
