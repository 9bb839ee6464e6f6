#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "ust/codec.hpp"
#include "ust/kmeans.hpp"

using namespace ust;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Multi-tone with raised-cosine edge ramps so the signal has no step
// onset outside the codec's pass band.
Waveform ramped_tones(int sample_rate, double seconds, std::initializer_list<double> hz) {
  Waveform w;
  w.sample_rate = sample_rate;
  const auto n = static_cast<size_t>(seconds * sample_rate);
  w.samples.assign(n, 0.0);
  for (double f : hz) {
    for (size_t i = 0; i < n; ++i) {
      w.samples[i] += 0.3 * std::sin(2.0 * kPi * f * static_cast<double>(i) / sample_rate);
    }
  }
  const size_t ramp = static_cast<size_t>(sample_rate / 50);
  for (size_t i = 0; i < ramp && i < n; ++i) {
    const double g = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(i) / static_cast<double>(ramp));
    w.samples[i] *= g;
    w.samples[n - 1 - i] *= g;
  }
  return w;
}

double snr_db(const std::vector<double>& ref, const std::vector<double>& test) {
  double sig = 0.0, err = 0.0;
  const size_t n = std::min(ref.size(), test.size());
  for (size_t i = 0; i < n; ++i) {
    sig += ref[i] * ref[i];
    const double d = ref[i] - test[i];
    err += d * d;
  }
  return 10.0 * std::log10(sig / err);
}

}  // namespace

TEST_CASE("analyze frame count and zero input") {
  RvqConfig cfg;
  CHECK(cfg.hop() == 300);
  Waveform w;
  w.sample_rate = 24000;
  w.samples.assign(72000, 0.0);
  Mat emb = analyze(w, cfg);
  CHECK(emb.rows() == 240);
  CHECK(emb.cols() == cfg.dim);
  CHECK(emb.cwiseAbs().maxCoeff() == 0.0);

  Waveform empty;
  empty.sample_rate = 24000;
  CHECK(analyze(empty, cfg).rows() == 0);

  Waveform wrong = w;
  wrong.sample_rate = 16000;
  CHECK_THROWS_AS(analyze(wrong, cfg), std::invalid_argument);
}

TEST_CASE("full-band analysis/synthesis round trip is exact") {
  RvqConfig cfg;
  cfg.dim = 600;  // every coefficient of the 2*hop window
  CounterRng rng(21);
  Waveform w;
  w.sample_rate = 24000;
  w.samples.resize(2400);
  for (auto& s : w.samples) s = rng.next_double() - 0.5;
  Mat emb = analyze(w, cfg);
  Waveform back = synthesize(emb, cfg);
  REQUIRE(back.samples.size() >= w.samples.size());
  double max_err = 0.0;
  for (size_t i = 0; i < w.samples.size(); ++i) {
    max_err = std::max(max_err, std::abs(back.samples[i] - w.samples[i]));
  }
  CHECK(max_err < 1e-10);
}

TEST_CASE("band-limited round trip keeps SNR above 30 dB") {
  RvqConfig cfg;
  cfg.dim = 150;  // pass band up to 150 * 20 Hz = 3 kHz
  Waveform w = ramped_tones(24000, 1.5, {220.0, 440.0, 990.0});
  Mat emb = analyze(w, cfg);
  Waveform back = synthesize(emb, cfg);
  const double snr = snr_db(w.samples, back.samples);
  INFO("snr = ", snr);
  CHECK(snr > 30.0);

  RvqConfig small = cfg;
  small.dim = 64;  // default width, pass band 1.28 kHz
  Waveform low = ramped_tones(24000, 1.5, {220.0, 440.0});
  const double snr_small = snr_db(low.samples, synthesize(analyze(low, small), small).samples);
  INFO("snr_small = ", snr_small);
  CHECK(snr_small > 30.0);
}

TEST_CASE("synthesize rejects wrong width") {
  RvqConfig cfg;
  CHECK_THROWS_AS(synthesize(Mat::Zero(4, 7), cfg), std::invalid_argument);
  CHECK(synthesize(Mat(0, cfg.dim), cfg).samples.empty());
}

TEST_CASE("rvq exact cover gives zero residual") {
  // Distinct integer-valued points; doubles represent them exactly, so a
  // perfect codebook drives the residual to exactly zero.
  const int k = 64;
  CounterRng rng(31);
  Mat base(k, 4);
  for (Eigen::Index i = 0; i < base.size(); ++i) {
    base.data()[i] = static_cast<double>(rng.next_below(1000));
  }
  Mat data(3 * k, 4);
  for (int i = 0; i < 3 * k; ++i) data.row(i) = base.row(i % k);

  RvqConfig cfg;
  cfg.quantizers = 1;
  cfg.codebook_size = k;
  cfg.dim = 4;
  CounterRng fit_rng(32);
  RvqCodebooks cbs = rvq_fit(data, cfg, fit_rng);
  CHECK(cbs.residual_energy.back() == 0.0);
  CodecTokenGrid grid = rvq_encode(data, cbs);
  Mat rec = rvq_decode(grid, cbs, 1);
  CHECK((rec - data).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("rvq residual energy non-increasing across levels") {
  CounterRng rng(33);
  Mat data(800, 6);
  for (Eigen::Index i = 0; i < data.size(); ++i) data.data()[i] = rng.next_normal();
  RvqConfig cfg;
  cfg.quantizers = 4;
  cfg.codebook_size = 24;
  cfg.dim = 6;
  CounterRng fit_rng(34);
  RvqCodebooks cbs = rvq_fit(data, cfg, fit_rng);
  REQUIRE(cbs.residual_energy.size() == 4);
  for (size_t q = 1; q < cbs.residual_energy.size(); ++q) {
    CHECK(cbs.residual_energy[q] <= cbs.residual_energy[q - 1]);
  }
}

TEST_CASE("rvq two-level fit matches a two-stage oracle") {
  CounterRng rng(35);
  Mat data(600, 5);
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    data.data()[i] = rng.next_normal() + (i % 2 ? 4.0 : -4.0);
  }
  RvqConfig cfg;
  cfg.quantizers = 2;
  cfg.codebook_size = 16;
  cfg.dim = 5;
  CounterRng fit_rng(36);
  RvqCodebooks cbs = rvq_fit(data, cfg, fit_rng);

  // Oracle: the same two k-means stages run by hand.
  CounterRng oracle_rng(36);
  CounterRng l0 = oracle_rng.split(101);
  KmeansResult k0 = kmeans_fit(data, 16, 50, l0);
  Mat resid = data;
  double e0 = 0.0;
  for (Eigen::Index i = 0; i < resid.rows(); ++i) {
    resid.row(i) -= k0.centroids.row(k0.assignments[static_cast<size_t>(i)]);
    e0 += resid.row(i).squaredNorm();
  }
  CounterRng l1 = oracle_rng.split(102);
  KmeansResult k1 = kmeans_fit(resid, 16, 50, l1);
  double e1 = 0.0;
  for (Eigen::Index i = 0; i < resid.rows(); ++i) {
    e1 += (resid.row(i) - k1.centroids.row(k1.assignments[static_cast<size_t>(i)])).squaredNorm();
  }
  CHECK(std::abs(cbs.residual_energy[0] - e0 / 600.0) < 1e-9);
  CHECK(std::abs(cbs.residual_energy[1] - e1 / 600.0) < 1e-9);
}

TEST_CASE("rvq encode: constructed two-level exact case and determinism") {
  RvqCodebooks cbs;
  cbs.cfg.quantizers = 2;
  cbs.cfg.codebook_size = 8;
  cbs.cfg.dim = 3;
  Mat level0(8, 3), level1(8, 3);
  for (int i = 0; i < 8; ++i) {
    for (int d = 0; d < 3; ++d) {
      level0(i, d) = 100.0 * (i + 1);
      level1(i, d) = d == 0 ? static_cast<double>(i) : 0.0;
    }
  }
  cbs.levels = {level0, level1};

  Mat emb(1, 3);
  emb = level0.row(5) + level1.row(3);
  CodecTokenGrid grid = rvq_encode(emb, cbs);
  CHECK(grid.tokens(0, 0) == 5);
  CHECK(grid.tokens(0, 1) == 3);
  Mat rec = rvq_decode(grid, cbs, 2);
  CHECK((rec - emb).cwiseAbs().maxCoeff() == 0.0);

  CodecTokenGrid again = rvq_encode(emb, cbs);
  CHECK(std::memcmp(grid.tokens.data(), again.tokens.data(),
                    sizeof(int32_t) * static_cast<size_t>(grid.tokens.size())) == 0);
}

TEST_CASE("rvq decode: level prefixes and errors") {
  CounterRng rng(37);
  Mat data(300, 4);
  for (Eigen::Index i = 0; i < data.size(); ++i) data.data()[i] = rng.next_normal();
  RvqConfig cfg;
  cfg.quantizers = 3;
  cfg.codebook_size = 12;
  cfg.dim = 4;
  CounterRng fit_rng(38);
  RvqCodebooks cbs = rvq_fit(data, cfg, fit_rng);
  CodecTokenGrid grid = rvq_encode(data, cbs);

  CHECK(rvq_decode(grid, cbs, 0).cwiseAbs().maxCoeff() == 0.0);

  Mat one = rvq_decode(grid, cbs, 1);
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    CHECK(one.row(i) == cbs.levels[0].row(grid.tokens(i, 0)));
  }

  // Reconstruction improves (or ties) with every added level.
  double prev = data.squaredNorm() / static_cast<double>(data.rows());
  for (int q = 1; q <= 3; ++q) {
    const Mat rec = rvq_decode(grid, cbs, q);
    const double mse = (data - rec).squaredNorm() / static_cast<double>(data.rows());
    CHECK(mse <= prev);
    prev = mse;
  }
  // Final MSE no worse than the fit-time residual floor (same data).
  CHECK(prev <= cbs.residual_energy.back() + 1e-12);

  CHECK_THROWS_AS(rvq_decode(grid, cbs, 4), std::invalid_argument);
  grid.tokens(2, 1) = 99;
  try {
    rvq_decode(grid, cbs, 3);
    FAIL("expected throw");
  } catch (const std::out_of_range& e) {
    std::string msg = e.what();
    CHECK(msg.find("frame 2") != std::string::npos);
    CHECK(msg.find("level 1") != std::string::npos);
  }
}

TEST_CASE("rvq fit rejects short or mismatched input") {
  RvqConfig cfg;
  cfg.quantizers = 1;
  cfg.codebook_size = 64;
  cfg.dim = 4;
  CounterRng rng(39);
  CHECK_THROWS_AS(rvq_fit(Mat::Zero(10, 4), cfg, rng), std::invalid_argument);
  CHECK_THROWS_AS(rvq_fit(Mat::Zero(100, 7), cfg, rng), std::invalid_argument);
}

TEST_CASE("rvq save/load round-trip is bit exact") {
  CounterRng rng(41);
  Mat data(400, 4);
  for (Eigen::Index i = 0; i < data.size(); ++i) data.data()[i] = rng.next_normal();
  RvqConfig cfg;
  cfg.quantizers = 2;
  cfg.codebook_size = 16;
  cfg.dim = 4;
  CounterRng fit_rng(42);
  RvqCodebooks cbs = rvq_fit(data, cfg, fit_rng);
  const std::string path = "rvq_roundtrip.bin";
  save_rvq(path, cbs);
  RvqCodebooks back = load_rvq(path);
  CHECK(back.cfg.quantizers == 2);
  CHECK(back.cfg.codebook_size == 16);
  CHECK(back.cfg.dim == 4);
  for (int q = 0; q < 2; ++q) {
    CHECK(std::memcmp(back.levels[q].data(), cbs.levels[q].data(),
                      sizeof(double) * static_cast<size_t>(cbs.levels[q].size())) == 0);
    CHECK(back.residual_energy[q] == cbs.residual_energy[q]);
  }
  std::remove(path.c_str());
}

TEST_CASE("grid file round-trip") {
  CodecTokenGrid g;
  g.q_levels = 3;
  g.tokens = IntMat(2, 3);
  g.tokens << 1, 2, 3, 4, 5, 6;
  std::vector<std::pair<std::string, CodecTokenGrid>> recs;
  recs.emplace_back("u1", g);
  const std::string path = "grid_roundtrip.txt";
  write_grid_file(path, recs);
  auto back = read_grid_file(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].first == "u1");
  CHECK(back[0].second.q_levels == 3);
  CHECK(back[0].second.tokens == g.tokens);
  std::remove(path.c_str());
}
