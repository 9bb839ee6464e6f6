#pragma once

#include "ust/matrix.hpp"
#include "ust/wav.hpp"

namespace ust {

struct FeatureSequence {
  double frame_rate = 0.0;  // Hz
  int dim = 0;
  Mat frames;               // T x dim

  Eigen::Index size() const { return frames.rows(); }
};

// Log triangular-filterbank energies over non-overlapping frames of
// frame_ms milliseconds. The analysis grid is anchored to absolute
// frequencies (multiples of 1000/frame_ms Hz up to 8 kHz), so the same
// signal produces the same features at any sample rate that resolves the
// band. frame_ms must divide into a whole number of samples. An empty
// waveform yields an empty sequence.
FeatureSequence extract_features(const Waveform& w, double frame_ms, int n_bands);

}  // namespace ust
