#pragma once

#include <array>
#include <functional>
#include <utility>
#include <vector>

#include "revnet/so3.hpp"
#include "revnet/tensor.hpp"

namespace revnet {

/// Fixed-size point buffer; rows at or beyond `valid_count` are zero padding
/// and are ignored by every geometric operation.
struct PointCloud {
  Tensor points;  // {N,3}
  int valid_count = 0;

  static PointCloud from_points(const std::vector<std::array<double, 3>>& pts,
                                int pad_to = -1);
  static PointCloud from_tensor(Tensor t);  // fully valid

  int padded_size() const { return points.defined() ? points.dim(0) : 0; }
  std::array<double, 3> point(int i) const;
  /// Copy of the valid rows as a {valid_count,3} tensor.
  Tensor valid_points() const;
};

PointCloud rotated(const PointCloud& cloud, const Rotation& r);

/// Greedy maximin subset selection. Deterministic: the seed is index 0 and
/// distance ties resolve to the lowest index, so the selected index list is
/// stable under rotation of the cloud.
std::vector<int> farthest_point_sample(const PointCloud& cloud, int m);

struct NeighborIndex {
  int k = 0;
  std::vector<int> indices;  // query-major, k entries per query row
  int at(int query, int j) const { return indices[static_cast<size_t>(query) * k + j]; }
};

/// Euclidean k-nearest neighbors of each query point among the valid source
/// points; ties resolve to the lowest source index; k is clamped to the
/// source size.
NeighborIndex knn(const PointCloud& query, const PointCloud& source, int k);

double chamfer_l1(const PointCloud& p1, const PointCloud& p2);
double chamfer_l2(const PointCloud& p1, const PointCloud& p2);
double chamfer_l2_one_directional(const PointCloud& from, const PointCloud& to);

/// F-Score at tolerance tau, in percent. Returns 0 when precision + recall
/// is zero.
double f_score(const PointCloud& pred, const PointCloud& gt, double tau);

/// Spread (max - min) of CD-l1 between completion and ground truth over
/// `trials` random rotations of the same pair.
double consistency_score(
    const std::function<PointCloud(const PointCloud&)>& complete_fn,
    const PointCloud& partial, const PointCloud& gt, int trials,
    std::uint64_t seed, std::vector<double>* per_trial = nullptr);

/// (fidelity distance, minimal matching distance): one-directional CD-l2
/// partial->pred, and min symmetric CD-l2 between pred and the references.
std::pair<double, double> fidelity_mmd(const PointCloud& pred,
                                       const PointCloud& partial,
                                       const std::vector<PointCloud>& refs);

}  // namespace revnet
