#pragma once

#include <string>
#include <vector>

#include "ust/matrix.hpp"
#include "ust/rng.hpp"
#include "ust/wav.hpp"

namespace ust {

struct RvqConfig {
  int quantizers = 6;       // Q, coarse to fine
  int codebook_size = 1024; // entries per level
  int frame_rate = 80;      // Hz
  int sample_rate = 24000;  // Hz; hop = sample_rate / frame_rate
  int dim = 64;             // analysis coefficients kept per frame

  int hop() const;          // validates divisibility
};

struct CodecTokenGrid {
  int q_levels = 0;
  IntMat tokens;  // T_a x Q, level 0 coarsest

  Eigen::Index frames() const { return tokens.rows(); }
};

struct RvqCodebooks {
  RvqConfig cfg;
  std::vector<Mat> levels;            // Q of codebook_size x dim
  std::vector<double> residual_energy;  // mean squared residual after each level, fit set
};

// Frame transform: cosine analysis of 2*hop-sample Tukey windows advanced
// by one hop, keeping cfg.dim coefficients. Low frequencies first, so a
// truncated coefficient set is a low-pass view. synthesize is the
// energy-normalised overlap-add inverse; with all coefficients kept the
// round trip is exact up to rounding.
Mat analyze(const Waveform& w, const RvqConfig& cfg);
Waveform synthesize(const Mat& embeddings, const RvqConfig& cfg);

// Residual vector quantizer. Level q is k-means-fit on the residuals left
// by levels 0..q-1. Fitting subsamples down to max_points frames when the
// input is larger (deterministic under the given rng).
RvqCodebooks rvq_fit(const Mat& embeddings, const RvqConfig& cfg, CounterRng& rng,
                     int kmeans_iters = 50, Eigen::Index max_points = 20000);

CodecTokenGrid rvq_encode(const Mat& embeddings, const RvqCodebooks& cbs);

// Sum of the selected centroids over the first `levels` levels.
Mat rvq_decode(const CodecTokenGrid& grid, const RvqCodebooks& cbs, int levels);

void save_rvq(const std::string& path, const RvqCodebooks& cbs);
RvqCodebooks load_rvq(const std::string& path);

// Token-grid file: one record per utterance,
//   <utterance-id> <T_a> <Q> <T_a*Q indices, row-major>
void write_grid_file(const std::string& path,
                     const std::vector<std::pair<std::string, CodecTokenGrid>>& records);
std::vector<std::pair<std::string, CodecTokenGrid>> read_grid_file(const std::string& path);

}  // namespace ust
