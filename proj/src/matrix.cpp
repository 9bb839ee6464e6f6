#include "ust/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace ust {

namespace {

[[noreturn]] void shape_error(const char* op, const Mat& a, const Mat& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                              " and " + std::to_string(b.rows()) + "x" +
                              std::to_string(b.cols()));
}

}  // namespace

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  const Eigen::Index m = a.rows(), k = a.cols(), n = b.cols();
  Mat c = Mat::Zero(m, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    const double* ai = a.data() + i * k;
    for (Eigen::Index p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.data() + p * n;
      for (Eigen::Index j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) shape_error("matmul_nt", a, b);
  const Eigen::Index m = a.rows(), k = a.cols(), n = b.rows();
  Mat c(m, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double* ai = a.data() + i * k;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double* bj = b.data() + j * k;
      double s = 0.0;
      for (Eigen::Index p = 0; p < k; ++p) s += ai[p] * bj[p];
      c(i, j) = s;
    }
  }
  return c;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) shape_error("matmul_tn", a, b);
  const Eigen::Index k = a.rows(), m = a.cols(), n = b.cols();
  Mat c = Mat::Zero(m, n);
  for (Eigen::Index p = 0; p < k; ++p) {
    const double* ap = a.data() + p * m;
    const double* bp = b.data() + p * n;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c.data() + i * n;
      for (Eigen::Index j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  return c;
}

void softmax_rows_inplace(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double* row = m.data() + i * m.cols();
    double mx = row[0];
    for (Eigen::Index j = 1; j < m.cols(); ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[j] /= sum;
  }
}

void require_finite(const Mat& m, const std::string& what) {
  const double* p = m.data();
  for (Eigen::Index i = 0, n = m.size(); i < n; ++i) {
    if (!std::isfinite(p[i])) {
      throw std::domain_error(what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

CrossEntropyResult softmax_cross_entropy(const Mat& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(logits.rows()) + " rows");
  }
  const Eigen::Index rows = logits.rows(), cols = logits.cols();
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (targets[i] < 0 || targets[i] >= cols) {
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                              " out of range at row " + std::to_string(i));
    }
  }
  CrossEntropyResult r;
  r.grad = logits;
  softmax_rows_inplace(r.grad);
  double loss = 0.0;
  const double inv_rows = 1.0 / static_cast<double>(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    loss += -std::log(r.grad(i, targets[i]));
    r.grad(i, targets[i]) -= 1.0;
  }
  r.grad *= inv_rows;
  r.loss = loss * inv_rows;
  require_finite(r.grad, "softmax_cross_entropy gradient");
  if (!std::isfinite(r.loss)) throw std::domain_error("softmax_cross_entropy: non-finite loss");
  return r;
}

void fill_truncated_normal(Mat& m, double stddev, CounterRng& rng) {
  double* p = m.data();
  for (Eigen::Index i = 0, n = m.size(); i < n; ++i) p[i] = rng.next_truncated_normal(stddev);
}

}  // namespace ust
