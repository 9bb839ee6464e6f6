#include "ust/codec.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ust/checkpoint.hpp"
#include "ust/kmeans.hpp"

namespace ust {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Tukey window of length 2*hop: sine-shaped taper over the first and last
// hop/2 samples, flat in between. Hop-shifted copies have squared sum >= 1
// at every sample, which the overlap-add in synthesize() divides out.
std::vector<double> make_window(Eigen::Index hop) {
  const Eigen::Index w = 2 * hop;
  const Eigen::Index taper = hop / 2;
  std::vector<double> win(static_cast<size_t>(w), 1.0);
  for (Eigen::Index i = 0; i < taper; ++i) {
    const double v = std::sin(0.5 * kPi * (static_cast<double>(i) + 0.5) /
                              static_cast<double>(taper));
    win[static_cast<size_t>(i)] = v;
    win[static_cast<size_t>(w - 1 - i)] = v;
  }
  return win;
}

// Orthonormal DCT-II rows k = 0..dim-1 over length 2*hop, pre-multiplied
// by the window: one matrix serves analysis (B * segment) and synthesis
// contributions (B^T * coeffs).
Mat make_basis(Eigen::Index hop, int dim) {
  const Eigen::Index w = 2 * hop;
  if (dim < 1 || dim > w) {
    throw std::invalid_argument("codec dim " + std::to_string(dim) + " out of range for window " +
                                std::to_string(w));
  }
  const std::vector<double> win = make_window(hop);
  Mat basis(dim, w);
  const double norm = std::sqrt(2.0 / static_cast<double>(w));
  for (int k = 0; k < dim; ++k) {
    const double scale = k == 0 ? norm / std::sqrt(2.0) : norm;
    for (Eigen::Index n = 0; n < w; ++n) {
      basis(k, n) = scale *
                    std::cos(kPi * (static_cast<double>(n) + 0.5) * static_cast<double>(k) /
                             static_cast<double>(w)) *
                    win[static_cast<size_t>(n)];
    }
  }
  return basis;
}

}  // namespace

int RvqConfig::hop() const {
  if (frame_rate <= 0 || sample_rate <= 0 || sample_rate % frame_rate != 0) {
    throw std::invalid_argument("codec sample_rate " + std::to_string(sample_rate) +
                                " is not a multiple of frame_rate " + std::to_string(frame_rate));
  }
  return sample_rate / frame_rate;
}

Mat analyze(const Waveform& w, const RvqConfig& cfg) {
  const Eigen::Index hop = cfg.hop();
  if (w.samples.empty()) return Mat(0, cfg.dim);
  if (w.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("analyze: waveform at " + std::to_string(w.sample_rate) +
                                " Hz, codec expects " + std::to_string(cfg.sample_rate));
  }
  const auto len = static_cast<Eigen::Index>(w.samples.size());
  const Eigen::Index frames = (len + hop - 1) / hop;
  const Eigen::Index win_len = 2 * hop;
  const Eigen::Index lead = hop / 2;  // window t starts at t*hop - lead

  Mat segments(frames, win_len);
  for (Eigen::Index t = 0; t < frames; ++t) {
    const Eigen::Index start = t * hop - lead;
    for (Eigen::Index n = 0; n < win_len; ++n) {
      const Eigen::Index s = start + n;
      segments(t, n) = (s >= 0 && s < len) ? w.samples[static_cast<size_t>(s)] : 0.0;
    }
  }
  const Mat basis = make_basis(hop, cfg.dim);
  return matmul_nt(segments, basis);  // frames x dim
}

Waveform synthesize(const Mat& embeddings, const RvqConfig& cfg) {
  const Eigen::Index hop = cfg.hop();
  Waveform out;
  out.sample_rate = cfg.sample_rate;
  if (embeddings.rows() == 0) return out;
  if (embeddings.cols() != cfg.dim) {
    throw std::invalid_argument("synthesize: embeddings dim " + std::to_string(embeddings.cols()) +
                                " vs codec dim " + std::to_string(cfg.dim));
  }
  const Eigen::Index frames = embeddings.rows();
  const Eigen::Index win_len = 2 * hop;
  const Eigen::Index lead = hop / 2;
  const Eigen::Index len = frames * hop;

  const Mat basis = make_basis(hop, cfg.dim);
  // Each row is win .* (inverse transform), i.e. the synthesis window is
  // already applied via the folded basis; normalising by the summed
  // squared window then makes the full-band round trip exact.
  const Mat contrib = matmul(embeddings, basis);  // frames x win_len
  const std::vector<double> win = make_window(hop);

  std::vector<double> acc(static_cast<size_t>(len), 0.0);
  std::vector<double> wsum(static_cast<size_t>(len), 0.0);
  for (Eigen::Index t = 0; t < frames; ++t) {
    const Eigen::Index start = t * hop - lead;
    for (Eigen::Index n = 0; n < win_len; ++n) {
      const Eigen::Index s = start + n;
      if (s < 0 || s >= len) continue;
      acc[static_cast<size_t>(s)] += contrib(t, n);
      wsum[static_cast<size_t>(s)] += win[static_cast<size_t>(n)] * win[static_cast<size_t>(n)];
    }
  }
  out.samples.resize(static_cast<size_t>(len));
  for (Eigen::Index s = 0; s < len; ++s) {
    out.samples[static_cast<size_t>(s)] = acc[static_cast<size_t>(s)] / wsum[static_cast<size_t>(s)];
  }
  return out;
}

RvqCodebooks rvq_fit(const Mat& embeddings, const RvqConfig& cfg, CounterRng& rng,
                     int kmeans_iters, Eigen::Index max_points) {
  if (embeddings.rows() < cfg.codebook_size) {
    throw std::invalid_argument("rvq_fit: " + std::to_string(embeddings.rows()) +
                                " frames for codebooks of " + std::to_string(cfg.codebook_size));
  }
  if (embeddings.cols() != cfg.dim) {
    throw std::invalid_argument("rvq_fit: embeddings dim " + std::to_string(embeddings.cols()) +
                                " vs codec dim " + std::to_string(cfg.dim));
  }

  Mat fit_set;
  if (embeddings.rows() > max_points) {
    // Deterministic reservoir-free subsample: a random permutation prefix.
    std::vector<Eigen::Index> order(static_cast<size_t>(embeddings.rows()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
    for (size_t i = order.size() - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(rng.next_below(i + 1));
      std::swap(order[i], order[j]);
    }
    fit_set = Mat(max_points, cfg.dim);
    for (Eigen::Index i = 0; i < max_points; ++i) {
      fit_set.row(i) = embeddings.row(order[static_cast<size_t>(i)]);
    }
  } else {
    fit_set = embeddings;
  }

  RvqCodebooks cbs;
  cbs.cfg = cfg;
  Mat residual = fit_set;
  for (int q = 0; q < cfg.quantizers; ++q) {
    CounterRng level_rng = rng.split(static_cast<uint64_t>(q) + 101);
    KmeansResult km = kmeans_fit(residual, cfg.codebook_size, kmeans_iters, level_rng);
    double energy = 0.0;
    for (Eigen::Index i = 0; i < residual.rows(); ++i) {
      residual.row(i) -= km.centroids.row(km.assignments[static_cast<size_t>(i)]);
      energy += residual.row(i).squaredNorm();
    }
    cbs.levels.push_back(std::move(km.centroids));
    cbs.residual_energy.push_back(energy / static_cast<double>(residual.rows()));
  }
  return cbs;
}

CodecTokenGrid rvq_encode(const Mat& embeddings, const RvqCodebooks& cbs) {
  if (embeddings.cols() != cbs.cfg.dim) {
    throw std::invalid_argument("rvq_encode: embeddings dim " + std::to_string(embeddings.cols()) +
                                " vs codec dim " + std::to_string(cbs.cfg.dim));
  }
  CodecTokenGrid grid;
  grid.q_levels = cbs.cfg.quantizers;
  grid.tokens = IntMat(embeddings.rows(), cbs.cfg.quantizers);
  Mat residual = embeddings;
  for (int q = 0; q < cbs.cfg.quantizers; ++q) {
    const std::vector<int> idx = nearest_centroid(residual, cbs.levels[static_cast<size_t>(q)]);
    for (Eigen::Index i = 0; i < residual.rows(); ++i) {
      grid.tokens(i, q) = idx[static_cast<size_t>(i)];
      residual.row(i) -= cbs.levels[static_cast<size_t>(q)].row(idx[static_cast<size_t>(i)]);
    }
  }
  return grid;
}

Mat rvq_decode(const CodecTokenGrid& grid, const RvqCodebooks& cbs, int levels) {
  if (levels < 0 || levels > cbs.cfg.quantizers || levels > grid.q_levels) {
    throw std::invalid_argument("rvq_decode: levels " + std::to_string(levels) + " out of range");
  }
  Mat out = Mat::Zero(grid.tokens.rows(), cbs.cfg.dim);
  for (Eigen::Index i = 0; i < grid.tokens.rows(); ++i) {
    for (int q = 0; q < levels; ++q) {
      const int idx = grid.tokens(i, q);
      if (idx < 0 || idx >= cbs.cfg.codebook_size) {
        throw std::out_of_range("rvq_decode: token " + std::to_string(idx) + " at frame " +
                                std::to_string(i) + " level " + std::to_string(q));
      }
      out.row(i) += cbs.levels[static_cast<size_t>(q)].row(idx);
    }
  }
  return out;
}

void save_rvq(const std::string& path, const RvqCodebooks& cbs) {
  Checkpoint ck;
  ck.put_scalar("config/quantizers", cbs.cfg.quantizers);
  ck.put_scalar("config/codebook_size", cbs.cfg.codebook_size);
  ck.put_scalar("config/frame_rate", cbs.cfg.frame_rate);
  ck.put_scalar("config/sample_rate", cbs.cfg.sample_rate);
  ck.put_scalar("config/dim", cbs.cfg.dim);
  for (size_t q = 0; q < cbs.levels.size(); ++q) {
    ck.put("level" + std::to_string(q), cbs.levels[q]);
  }
  Mat energy(1, static_cast<Eigen::Index>(cbs.residual_energy.size()));
  for (size_t q = 0; q < cbs.residual_energy.size(); ++q) {
    energy(0, static_cast<Eigen::Index>(q)) = cbs.residual_energy[q];
  }
  ck.put("residual_energy", energy);
  ck.save(path);
}

RvqCodebooks load_rvq(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  RvqCodebooks cbs;
  cbs.cfg.quantizers = static_cast<int>(ck.get_scalar("config/quantizers"));
  cbs.cfg.codebook_size = static_cast<int>(ck.get_scalar("config/codebook_size"));
  cbs.cfg.frame_rate = static_cast<int>(ck.get_scalar("config/frame_rate"));
  cbs.cfg.sample_rate = static_cast<int>(ck.get_scalar("config/sample_rate"));
  cbs.cfg.dim = static_cast<int>(ck.get_scalar("config/dim"));
  for (int q = 0; q < cbs.cfg.quantizers; ++q) {
    cbs.levels.push_back(ck.get("level" + std::to_string(q)));
  }
  const Mat& energy = ck.get("residual_energy");
  for (Eigen::Index q = 0; q < energy.cols(); ++q) cbs.residual_energy.push_back(energy(0, q));
  return cbs;
}

void write_grid_file(const std::string& path,
                     const std::vector<std::pair<std::string, CodecTokenGrid>>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& [id, g] : records) {
    out << id << ' ' << g.tokens.rows() << ' ' << g.q_levels;
    for (Eigen::Index i = 0; i < g.tokens.rows(); ++i) {
      for (int q = 0; q < g.q_levels; ++q) out << ' ' << g.tokens(i, q);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::pair<std::string, CodecTokenGrid>> read_grid_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<std::pair<std::string, CodecTokenGrid>> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id;
    Eigen::Index t_a = 0;
    CodecTokenGrid g;
    if (!(ss >> id >> t_a >> g.q_levels)) {
      throw std::runtime_error("bad grid record at " + path + ":" + std::to_string(line_no));
    }
    g.tokens = IntMat(t_a, g.q_levels);
    for (Eigen::Index i = 0; i < t_a; ++i) {
      for (int q = 0; q < g.q_levels; ++q) {
        if (!(ss >> g.tokens(i, q))) {
          throw std::runtime_error("bad grid tokens at " + path + ":" + std::to_string(line_no));
        }
      }
    }
    records.emplace_back(std::move(id), std::move(g));
  }
  return records;
}

}  // namespace ust
