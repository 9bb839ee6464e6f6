#pragma once

#include <cstdint>
#include <vector>

#include "ust/matrix.hpp"

namespace ust {

// Adam with bias correction. Moment buffers are created on the first step
// and must keep matching the parameter list afterwards.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<Mat> m;
  std::vector<Mat> v;
};

// One update in place. params and grads are parallel lists; every grad
// shape must match its parameter. lr > 0. Deterministic: the same
// params/grads/state always produce the same result.
void adam_step(std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
               AdamState& state, double lr);

// Global L2-norm gradient clipping; returns the pre-clip norm.
double clip_grad_norm(std::vector<Mat*>& grads, double max_norm);

}  // namespace ust
