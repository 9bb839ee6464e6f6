#include "ust/features.hpp"

#include <cmath>
#include <stdexcept>

namespace ust {

namespace {

constexpr double kMaxBandHz = 8000.0;
constexpr double kLogFloor = 1e-10;
constexpr double kTwoPi = 6.28318530717958647692;

}  // namespace

FeatureSequence extract_features(const Waveform& w, double frame_ms, int n_bands) {
  if (n_bands < 1) throw std::invalid_argument("extract_features: n_bands must be >= 1");
  if (!(frame_ms > 0.0)) throw std::invalid_argument("extract_features: frame_ms must be > 0");
  FeatureSequence fs;
  fs.frame_rate = 1000.0 / frame_ms;
  fs.dim = n_bands;
  if (w.samples.empty()) {
    fs.frames = Mat(0, n_bands);
    return fs;
  }
  if (w.sample_rate <= 0) throw std::invalid_argument("extract_features: bad sample rate");

  const double hop_f = static_cast<double>(w.sample_rate) * frame_ms / 1000.0;
  const auto hop = static_cast<Eigen::Index>(std::llround(hop_f));
  if (std::abs(hop_f - static_cast<double>(hop)) > 1e-9 || hop < 2) {
    throw std::invalid_argument("extract_features: frame of " + std::to_string(frame_ms) +
                                " ms is not a whole number of samples at " +
                                std::to_string(w.sample_rate) + " Hz");
  }

  // Analysis bins sit at multiples of the frame rate, which for a
  // rectangular window of exactly one frame are the DFT bins themselves.
  const double bin_hz = fs.frame_rate;
  const auto nyquist_bin = hop / 2;
  auto n_bins = static_cast<Eigen::Index>(std::floor(kMaxBandHz / bin_hz));
  if (n_bins > nyquist_bin) n_bins = nyquist_bin;
  n_bins += 1;  // include DC

  // Triangle b peaks at (b+1) * kMaxBandHz / (n_bands+1) and reaches zero
  // at its neighbours' peaks.
  const double center_step = kMaxBandHz / static_cast<double>(n_bands + 1);
  Mat band_weight = Mat::Zero(n_bins, n_bands);
  for (Eigen::Index k = 0; k < n_bins; ++k) {
    const double f = static_cast<double>(k) * bin_hz;
    for (int b = 0; b < n_bands; ++b) {
      const double lo = center_step * b;
      const double mid = center_step * (b + 1);
      const double hi = center_step * (b + 2);
      double wgt = 0.0;
      if (f > lo && f < hi) {
        wgt = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      }
      band_weight(k, b) = wgt;
    }
  }

  Mat cos_basis(n_bins, hop), sin_basis(n_bins, hop);
  for (Eigen::Index k = 0; k < n_bins; ++k) {
    for (Eigen::Index n = 0; n < hop; ++n) {
      const double ang = kTwoPi * static_cast<double>(k) * static_cast<double>(n) /
                         static_cast<double>(hop);
      cos_basis(k, n) = std::cos(ang);
      sin_basis(k, n) = std::sin(ang);
    }
  }

  const auto T = static_cast<Eigen::Index>(w.samples.size()) / hop;
  Mat windows(T, hop);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index n = 0; n < hop; ++n) windows(t, n) = w.samples[t * hop + n];
  }

  const Mat re = matmul_nt(windows, cos_basis);  // T x n_bins
  const Mat im = matmul_nt(windows, sin_basis);
  const double amp = 2.0 / static_cast<double>(hop);
  Mat power(T, n_bins);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index k = 0; k < n_bins; ++k) {
      const double r = re(t, k) * amp;
      const double i = im(t, k) * amp;
      power(t, k) = r * r + i * i;
    }
  }

  Mat energy = matmul(power, band_weight);  // T x n_bands
  fs.frames = Mat(T, n_bands);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int b = 0; b < n_bands; ++b) fs.frames(t, b) = std::log(energy(t, b) + kLogFloor);
  }
  require_finite(fs.frames, "extract_features output");
  return fs;
}

}  // namespace ust
