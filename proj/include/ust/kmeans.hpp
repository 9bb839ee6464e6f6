#pragma once

#include <vector>

#include "ust/matrix.hpp"
#include "ust/rng.hpp"

namespace ust {

struct KmeansResult {
  Mat centroids;                      // K x dim
  std::vector<int> assignments;       // per input row
  std::vector<double> inertia_curve;  // recorded after every assignment pass
};

// Lloyd's algorithm with k-means++ seeding. Stops early once assignments
// stabilize, at most max_iters passes. Empty clusters are reseeded to the
// point currently farthest from its centroid. Throws if the input holds
// fewer distinct rows than K (counts named in the message).
KmeansResult kmeans_fit(const Mat& points, int k, int max_iters, CounterRng& rng);

// Index of the nearest centroid per row, squared Euclidean metric, ties
// broken by lowest index. The arithmetic is the plain per-pair
// sum-of-squared-differences, so results match an exhaustive scan exactly.
std::vector<int> nearest_centroid(const Mat& points, const Mat& centroids);

}  // namespace ust
