#include "revnet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "revnet/ops.hpp"

namespace revnet {

namespace {
double dist2(const double* a, const double* b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

void check_nonempty(const PointCloud& c, const char* op) {
  REVNET_CHECK(c.points.defined() && c.valid_count >= 1,
               std::string(op) + ": empty point cloud");
  REVNET_CHECK(c.valid_count <= c.padded_size(),
               std::string(op) + ": valid_count exceeds buffer");
}
}  // namespace

PointCloud PointCloud::from_points(
    const std::vector<std::array<double, 3>>& pts, int pad_to) {
  const int n = static_cast<int>(pts.size());
  const int rows = pad_to < 0 ? n : pad_to;
  REVNET_CHECK(rows >= n, "PointCloud: pad_to smaller than point count");
  std::vector<double> data(static_cast<size_t>(rows) * 3, 0.0);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < 3; ++t) data[static_cast<size_t>(i) * 3 + t] = pts[i][t];
  PointCloud c;
  c.points = Tensor::from({rows, 3}, std::move(data));
  c.valid_count = n;
  return c;
}

PointCloud PointCloud::from_tensor(Tensor t) {
  REVNET_CHECK(t.ndim() == 2 && t.dim(1) == 3,
               "PointCloud::from_tensor: expected {n,3}");
  PointCloud c;
  c.valid_count = t.dim(0);
  c.points = std::move(t);
  return c;
}

std::array<double, 3> PointCloud::point(int i) const {
  REVNET_CHECK(i >= 0 && i < padded_size(), "PointCloud::point: out of range");
  const auto& v = points.values();
  return {v[static_cast<size_t>(i) * 3], v[static_cast<size_t>(i) * 3 + 1],
          v[static_cast<size_t>(i) * 3 + 2]};
}

Tensor PointCloud::valid_points() const {
  const auto& v = points.values();
  return Tensor::from(
      {valid_count, 3},
      std::vector<double>(v.begin(), v.begin() + static_cast<size_t>(valid_count) * 3));
}

PointCloud rotated(const PointCloud& cloud, const Rotation& r) {
  PointCloud out;
  out.points = rotate_rows(cloud.points, r);
  out.valid_count = cloud.valid_count;
  return out;
}

std::vector<int> farthest_point_sample(const PointCloud& cloud, int m) {
  check_nonempty(cloud, "farthest_point_sample");
  const int n = cloud.valid_count;
  REVNET_CHECK(m >= 1 && m <= n,
               "farthest_point_sample: m must be in [1, valid_count]");
  const double* pts = cloud.points.values().data();
  std::vector<int> picked;
  picked.reserve(m);
  picked.push_back(0);
  std::vector<double> best(static_cast<size_t>(n),
                           std::numeric_limits<double>::infinity());
  for (int step = 1; step < m; ++step) {
    const double* last = pts + static_cast<size_t>(picked.back()) * 3;
    int arg = -1;
    double far = -1.0;
    for (int i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist2(pts + static_cast<size_t>(i) * 3, last));
      if (best[i] > far) {  // strict: ties keep the lowest index
        far = best[i];
        arg = i;
      }
    }
    picked.push_back(arg);
  }
  return picked;
}

NeighborIndex knn(const PointCloud& query, const PointCloud& source, int k) {
  check_nonempty(query, "knn");
  check_nonempty(source, "knn");
  REVNET_CHECK(k >= 1, "knn: k must be >= 1");
  k = std::min(k, source.valid_count);
  const int nq = query.valid_count;
  const int ns = source.valid_count;
  const double* qp = query.points.values().data();
  const double* sp = source.points.values().data();
  NeighborIndex out;
  out.k = k;
  out.indices.resize(static_cast<size_t>(nq) * k);
  std::vector<std::pair<double, int>> cand(static_cast<size_t>(ns));
  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < ns; ++j)
      cand[j] = {dist2(qp + static_cast<size_t>(i) * 3,
                       sp + static_cast<size_t>(j) * 3),
                 j};
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int j = 0; j < k; ++j)
      out.indices[static_cast<size_t>(i) * k + j] = cand[j].second;
  }
  return out;
}

double chamfer_l1(const PointCloud& p1, const PointCloud& p2) {
  check_nonempty(p1, "chamfer_l1");
  check_nonempty(p2, "chamfer_l1");
  return ops::chamfer_l1_op(p1.valid_points(), p2.valid_points()).value();
}

double chamfer_l2(const PointCloud& p1, const PointCloud& p2) {
  check_nonempty(p1, "chamfer_l2");
  check_nonempty(p2, "chamfer_l2");
  return ops::chamfer_l2_op(p1.valid_points(), p2.valid_points(), true).value();
}

double chamfer_l2_one_directional(const PointCloud& from,
                                  const PointCloud& to) {
  check_nonempty(from, "chamfer_l2_one_directional");
  check_nonempty(to, "chamfer_l2_one_directional");
  return ops::chamfer_l2_op(from.valid_points(), to.valid_points(), false)
      .value();
}

double f_score(const PointCloud& pred, const PointCloud& gt, double tau) {
  check_nonempty(pred, "f_score");
  check_nonempty(gt, "f_score");
  REVNET_CHECK(tau > 0.0, "f_score: tau must be positive");
  const double tau2 = tau * tau;
  const double* pp = pred.points.values().data();
  const double* gp = gt.points.values().data();
  const int np = pred.valid_count, ng = gt.valid_count;
  int hit_p = 0;
  for (int i = 0; i < np; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < ng; ++j)
      best = std::min(best, dist2(pp + static_cast<size_t>(i) * 3,
                                  gp + static_cast<size_t>(j) * 3));
    if (best <= tau2) ++hit_p;
  }
  int hit_g = 0;
  for (int j = 0; j < ng; ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < np; ++i)
      best = std::min(best, dist2(pp + static_cast<size_t>(i) * 3,
                                  gp + static_cast<size_t>(j) * 3));
    if (best <= tau2) ++hit_g;
  }
  const double precision = static_cast<double>(hit_p) / np;
  const double recall = static_cast<double>(hit_g) / ng;
  if (precision + recall == 0.0) return 0.0;
  return 100.0 * 2.0 * precision * recall / (precision + recall);
}

double consistency_score(
    const std::function<PointCloud(const PointCloud&)>& complete_fn,
    const PointCloud& partial, const PointCloud& gt, int trials,
    std::uint64_t seed, std::vector<double>* per_trial) {
  REVNET_CHECK(trials >= 2, "consistency_score: trials must be >= 2");
  Rng rng(seed);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  if (per_trial) per_trial->clear();
  for (int t = 0; t < trials; ++t) {
    const Rotation r = random_rotation(rng);
    const PointCloud completed = complete_fn(rotated(partial, r));
    const double cd = chamfer_l1(completed, rotated(gt, r));
    lo = std::min(lo, cd);
    hi = std::max(hi, cd);
    if (per_trial) per_trial->push_back(cd);
  }
  return hi - lo;
}

std::pair<double, double> fidelity_mmd(const PointCloud& pred,
                                       const PointCloud& partial,
                                       const std::vector<PointCloud>& refs) {
  REVNET_CHECK(!refs.empty(), "fidelity_mmd: reference set must be non-empty");
  const double fd = chamfer_l2_one_directional(partial, pred);
  double mmd = std::numeric_limits<double>::infinity();
  for (const PointCloud& ref : refs) mmd = std::min(mmd, chamfer_l2(pred, ref));
  return {fd, mmd};
}

}  // namespace revnet
