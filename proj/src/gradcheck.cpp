#include "ust/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace ust {

double grad_check(const std::function<double(const Mat&)>& value,
                  const std::function<Mat(const Mat&)>& gradient, const Mat& params,
                  double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be > 0");

  Mat analytic = gradient(params);
  if (analytic.rows() != params.rows() || analytic.cols() != params.cols()) {
    throw std::invalid_argument("grad_check: gradient shape does not match params");
  }
  require_finite(analytic, "grad_check analytic gradient");

  double gmax = 0.0;
  for (Eigen::Index i = 0, n = analytic.size(); i < n; ++i) {
    gmax = std::max(gmax, std::abs(analytic.data()[i]));
  }
  const double floor = 1e-3 * std::max(1e-8, gmax);

  Mat probe = params;
  double worst = 0.0;
  for (Eigen::Index i = 0, n = params.size(); i < n; ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + step;
    const double up = value(probe);
    probe.data()[i] = orig - step;
    const double down = value(probe);
    probe.data()[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("grad_check: non-finite function value at parameter " +
                              std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * step);
    const double a = analytic.data()[i];
    const double denom = std::max({std::abs(a), std::abs(fd), floor});
    const double rel = std::abs(a - fd) / denom;
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace ust
