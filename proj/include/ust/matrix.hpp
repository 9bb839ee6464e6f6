#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "ust/rng.hpp"

namespace ust {

// All dense math in this project runs on row-major double matrices.
// Eigen provides storage, views and elementwise expressions; every
// reduction (matmul, dot, softmax normalisation) goes through the free
// functions below, which fix the summation order so results are
// bit-reproducible and match the naive reference loops used in tests.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IntMat = Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// a (m x k) * b (k x n). Each output element accumulates over k in
// ascending order. Throws std::invalid_argument on shape mismatch.
Mat matmul(const Mat& a, const Mat& b);

// a (m x k) * b^T where b is (n x k).
Mat matmul_nt(const Mat& a, const Mat& b);

// a^T * b where a is (k x m), b is (k x n).
Mat matmul_tn(const Mat& a, const Mat& b);

// Numerically stable in-place row softmax (max subtraction, ascending sums).
void softmax_rows_inplace(Mat& m);

// Throws std::domain_error naming `what` if any entry is NaN/Inf.
void require_finite(const Mat& m, const std::string& what);

struct CrossEntropyResult {
  double loss = 0.0;          // mean negative log-likelihood over rows
  Mat grad;                   // (softmax - onehot) / rows
};

// Mean next-class cross entropy of `logits` (rows x classes) against
// integer targets, one per row. Throws std::out_of_range naming the
// offending row if a target index is invalid.
CrossEntropyResult softmax_cross_entropy(const Mat& logits, const std::vector<int>& targets);

// Truncated-normal fill (std given, +/-2 std) and zero fill.
void fill_truncated_normal(Mat& m, double stddev, CounterRng& rng);

inline Mat zeros(Eigen::Index r, Eigen::Index c) { return Mat::Zero(r, c); }

}  // namespace ust
