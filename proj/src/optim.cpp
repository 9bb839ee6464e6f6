#include "ust/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ust {

void adam_step(std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
               AdamState& state, double lr) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " params vs " +
                                std::to_string(grads.size()) + " grads");
  }
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: lr must be > 0");
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Mat* p : params) {
      state.m.push_back(Mat::Zero(p->rows(), p->cols()));
      state.v.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) +
                                " tensors, got " + std::to_string(params.size()));
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  for (size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = *grads[i];
    if (p.rows() != g.rows() || p.cols() != g.cols()) {
      throw std::invalid_argument("adam_step: shape mismatch at tensor " + std::to_string(i));
    }
    Mat& m = state.m[i];
    Mat& v = state.v[i];
    double* pp = p.data();
    const double* gp = g.data();
    double* mp = m.data();
    double* vp = v.data();
    for (Eigen::Index j = 0, n = p.size(); j < n; ++j) {
      mp[j] = state.beta1 * mp[j] + (1.0 - state.beta1) * gp[j];
      vp[j] = state.beta2 * vp[j] + (1.0 - state.beta2) * gp[j] * gp[j];
      const double mhat = mp[j] / bc1;
      const double vhat = vp[j] / bc2;
      pp[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    require_finite(p, "adam_step output tensor " + std::to_string(i));
  }
}

double clip_grad_norm(std::vector<Mat*>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const Mat* g : grads) {
    const double* gp = g->data();
    for (Eigen::Index j = 0, n = g->size(); j < n; ++j) sq += gp[j] * gp[j];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Mat* g : grads) *g *= scale;
  }
  return norm;
}

}  // namespace ust
