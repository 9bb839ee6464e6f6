#include "ust/rng.hpp"

#include <cmath>

namespace ust {

double CounterRng::next_normal() {
  // u1 in (0, 1] so the log is finite.
  double u1 = 1.0 - next_double();
  double u2 = next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double CounterRng::next_truncated_normal(double stddev) {
  for (;;) {
    double z = next_normal();
    if (z >= -2.0 && z <= 2.0) return z * stddev;
  }
}

}  // namespace ust
