#include "ust/kmeans.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <unordered_map>

namespace ust {

namespace {

double sq_dist(const Mat& a, Eigen::Index i, const Mat& b, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index d = 0; d < a.cols(); ++d) {
    const double diff = a(i, d) - b(j, d);
    s += diff * diff;
  }
  return s;
}

// Distinct-row count, exact. Rows are bucketed by a byte hash first so the
// pairwise comparison only runs inside buckets.
size_t count_distinct_rows(const Mat& m) {
  std::unordered_map<uint64_t, std::vector<Eigen::Index>> buckets;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    uint64_t h = 1469598103934665603ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data() + i * m.cols());
    for (size_t b = 0; b < sizeof(double) * static_cast<size_t>(m.cols()); ++b) {
      h = (h ^ bytes[b]) * 1099511628211ull;
    }
    buckets[h].push_back(i);
  }
  size_t distinct = 0;
  const size_t row_bytes = sizeof(double) * static_cast<size_t>(m.cols());
  for (const auto& [h, rows] : buckets) {
    std::vector<Eigen::Index> reps;
    for (Eigen::Index r : rows) {
      bool seen = false;
      for (Eigen::Index rep : reps) {
        if (std::memcmp(m.data() + r * m.cols(), m.data() + rep * m.cols(), row_bytes) == 0) {
          seen = true;
          break;
        }
      }
      if (!seen) reps.push_back(r);
    }
    distinct += reps.size();
  }
  return distinct;
}

}  // namespace

std::vector<int> nearest_centroid(const Mat& points, const Mat& centroids) {
  if (points.cols() != centroids.cols()) {
    throw std::invalid_argument("nearest_centroid: dim " + std::to_string(points.cols()) +
                                " vs codebook dim " + std::to_string(centroids.cols()));
  }
  std::vector<int> out(static_cast<size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = sq_dist(points, i, centroids, 0);
    for (Eigen::Index j = 1; j < centroids.rows(); ++j) {
      const double d = sq_dist(points, i, centroids, j);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(j);
      }
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

KmeansResult kmeans_fit(const Mat& points, int k, int max_iters, CounterRng& rng) {
  const Eigen::Index n = points.rows(), dim = points.cols();
  if (k < 1) throw std::invalid_argument("kmeans_fit: k must be >= 1");
  if (max_iters < 1) throw std::invalid_argument("kmeans_fit: max_iters must be >= 1");
  if (n < k) {
    throw std::invalid_argument("kmeans_fit: " + std::to_string(n) + " points for k=" +
                                std::to_string(k));
  }
  const size_t distinct = count_distinct_rows(points);
  if (distinct < static_cast<size_t>(k)) {
    throw std::invalid_argument("kmeans_fit: only " + std::to_string(distinct) +
                                " distinct points for k=" + std::to_string(k));
  }

  // k-means++ seeding: first centre uniform, the rest proportional to the
  // squared distance to the nearest chosen centre.
  Mat centroids(k, dim);
  std::vector<double> d2(static_cast<size_t>(n));
  centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.next_below(static_cast<uint64_t>(n))));
  for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<size_t>(i)] = sq_dist(points, i, centroids, 0);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    const double r = rng.next_double() * total;
    double cum = 0.0;
    Eigen::Index pick = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      cum += d2[static_cast<size_t>(i)];
      if (cum > r && d2[static_cast<size_t>(i)] > 0.0) {
        pick = i;
        break;
      }
    }
    if (pick < 0) {
      for (Eigen::Index i = n - 1; i >= 0; --i) {
        if (d2[static_cast<size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = sq_dist(points, i, centroids, c);
      if (d < d2[static_cast<size_t>(i)]) d2[static_cast<size_t>(i)] = d;
    }
  }

  // Lloyd passes. Assignment uses |c|^2 - 2 x.c through the shared matmul
  // kernels (the |x|^2 term is constant per point and added back only for
  // the recorded inertia).
  KmeansResult res;
  res.assignments.assign(static_cast<size_t>(n), -1);
  std::vector<double> xnorm(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (Eigen::Index d = 0; d < dim; ++d) s += points(i, d) * points(i, d);
    xnorm[static_cast<size_t>(i)] = s;
  }

  std::vector<int> prev;
  std::vector<Eigen::Index> counts(static_cast<size_t>(k));
  for (int iter = 0; iter < max_iters; ++iter) {
    std::vector<double> cnorm(static_cast<size_t>(k));
    for (int j = 0; j < k; ++j) {
      double s = 0.0;
      for (Eigen::Index d = 0; d < dim; ++d) s += centroids(j, d) * centroids(j, d);
      cnorm[static_cast<size_t>(j)] = s;
    }
    const Mat cross = matmul_nt(points, centroids);  // n x k
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = cnorm[0] - 2.0 * cross(i, 0);
      for (int j = 1; j < k; ++j) {
        const double d = cnorm[static_cast<size_t>(j)] - 2.0 * cross(i, j);
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      res.assignments[static_cast<size_t>(i)] = best;
      inertia += std::max(0.0, xnorm[static_cast<size_t>(i)] + best_d);
    }
    res.inertia_curve.push_back(inertia);
    if (res.assignments == prev) break;
    prev = res.assignments;

    centroids.setZero();
    std::fill(counts.begin(), counts.end(), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = res.assignments[static_cast<size_t>(i)];
      centroids.row(a) += points.row(i);
      counts[static_cast<size_t>(a)] += 1;
    }
    for (int j = 0; j < k; ++j) {
      if (counts[static_cast<size_t>(j)] > 0) {
        centroids.row(j) /= static_cast<double>(counts[static_cast<size_t>(j)]);
      }
    }
    // Reseed empty clusters to the points farthest from their (updated)
    // centroids, one distinct point per empty cluster.
    std::vector<char> reseeded(static_cast<size_t>(n), 0);
    for (int j = 0; j < k; ++j) {
      if (counts[static_cast<size_t>(j)] > 0) continue;
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (reseeded[static_cast<size_t>(i)]) continue;
        const int a = res.assignments[static_cast<size_t>(i)];
        if (counts[static_cast<size_t>(a)] == 0) continue;
        const double d = sq_dist(points, i, centroids, a);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far >= 0) {
        centroids.row(j) = points.row(far);
        reseeded[static_cast<size_t>(far)] = 1;
      }
    }
  }

  res.centroids = std::move(centroids);
  return res;
}

}  // namespace ust
