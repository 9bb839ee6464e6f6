#pragma once

#include <functional>

#include "ust/matrix.hpp"

namespace ust {

// Compares `gradient(params)` against central finite differences of
// `value` elementwise and returns the worst relative error. Both
// callables must be deterministic. The relative error of a pair (a, fd)
// uses a floored denominator max(|a|, |fd|, 1e-3 * max(1e-8, gmax)) with
// gmax the largest analytic gradient magnitude, so near-zero entries do
// not blow up the ratio while a genuinely wrong gradient still does.
// Throws std::domain_error if `value` returns a non-finite number.
double grad_check(const std::function<double(const Mat&)>& value,
                  const std::function<Mat(const Mat&)>& gradient, const Mat& params,
                  double step);

}  // namespace ust
