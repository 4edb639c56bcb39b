#include "revnet/so3.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace revnet {

bool Rotation::valid(double tol) const {
  if (!matrix.defined() || matrix.shape() != Shape{3, 3}) return false;
  const auto& m = matrix.values();
  // R^T R = I
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += m[k * 3 + i] * m[k * 3 + j];
      if (std::abs(s - (i == j ? 1.0 : 0.0)) > tol) return false;
    }
  const double det =
      m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
      m[2] * (m[3] * m[7] - m[4] * m[6]);
  return std::abs(det - 1.0) <= tol;
}

Rotation random_rotation(Rng& rng) {
  double q[4];
  double n = 0.0;
  do {
    n = 0.0;
    for (double& v : q) {
      v = rng.gaussian();
      n += v * v;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  std::vector<double> m(9);
  m[0] = 1 - 2 * (y * y + z * z);
  m[1] = 2 * (x * y - w * z);
  m[2] = 2 * (x * z + w * y);
  m[3] = 2 * (x * y + w * z);
  m[4] = 1 - 2 * (x * x + z * z);
  m[5] = 2 * (y * z - w * x);
  m[6] = 2 * (x * z - w * y);
  m[7] = 2 * (y * z + w * x);
  m[8] = 1 - 2 * (x * x + y * y);
  return Rotation{Tensor::from({3, 3}, std::move(m))};
}

Rotation random_rotation(std::uint64_t seed) {
  Rng rng(seed);
  return random_rotation(rng);
}

Tensor rotate_rows(const Tensor& x, const Rotation& r) {
  REVNET_CHECK(x.size() % 3 == 0, "rotate_rows: size must be divisible by 3");
  const auto& m = r.matrix.values();
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  const size_t rows = xv.size() / 3;
  for (size_t i = 0; i < rows; ++i) {
    const double a = xv[i * 3], b = xv[i * 3 + 1], c = xv[i * 3 + 2];
    out[i * 3] = a * m[0] + b * m[3] + c * m[6];
    out[i * 3 + 1] = a * m[1] + b * m[4] + c * m[7];
    out[i * 3 + 2] = a * m[2] + b * m[5] + c * m[8];
  }
  return Tensor::from(x.shape(), std::move(out));
}

namespace {

double offdiag_max(const std::array<double, 9>& a) {
  return std::max({std::abs(a[1]), std::abs(a[2]), std::abs(a[5])});
}

// One Jacobi rotation zeroing a[p*3+q], updating the eigenvector accumulator.
void jacobi_rotate(std::array<double, 9>& a, std::array<double, 9>& v, int p,
                   int q) {
  const double apq = a[p * 3 + q];
  if (apq == 0.0) return;
  const double app = a[p * 3 + p], aqq = a[q * 3 + q];
  const double theta = (aqq - app) / (2.0 * apq);
  const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
  const double c = 1.0 / std::sqrt(t * t + 1.0);
  const double s = t * c;

  for (int k = 0; k < 3; ++k) {
    const double akp = a[k * 3 + p], akq = a[k * 3 + q];
    a[k * 3 + p] = c * akp - s * akq;
    a[k * 3 + q] = s * akp + c * akq;
  }
  for (int k = 0; k < 3; ++k) {
    const double apk = a[p * 3 + k], aqk = a[q * 3 + k];
    a[p * 3 + k] = c * apk - s * aqk;
    a[q * 3 + k] = s * apk + c * aqk;
  }
  for (int k = 0; k < 3; ++k) {
    const double vkp = v[k * 3 + p], vkq = v[k * 3 + q];
    v[k * 3 + p] = c * vkp - s * vkq;
    v[k * 3 + q] = s * vkp + c * vkq;
  }
}

}  // namespace

std::pair<Tensor, Tensor> eig_sym3(const Tensor& s) {
  REVNET_CHECK(s.shape() == (Shape{3, 3}), "eig_sym3: expected a 3x3 tensor");
  const auto& sv = s.values();
  REVNET_CHECK(std::abs(sv[1] - sv[3]) <= 1e-9 &&
                   std::abs(sv[2] - sv[6]) <= 1e-9 &&
                   std::abs(sv[5] - sv[7]) <= 1e-9,
               "eig_sym3: input is not symmetric within 1e-9");
  std::array<double, 9> a;
  std::copy(sv.begin(), sv.end(), a.begin());
  // exact symmetrization removes the (tolerated) asymmetry
  a[1] = a[3] = 0.5 * (a[1] + a[3]);
  a[2] = a[6] = 0.5 * (a[2] + a[6]);
  a[5] = a[7] = 0.5 * (a[5] + a[7]);
  std::array<double, 9> v{1, 0, 0, 0, 1, 0, 0, 0, 1};

  for (int sweep = 0; sweep < 50 && offdiag_max(a) > 1e-12; ++sweep) {
    jacobi_rotate(a, v, 0, 1);
    jacobi_rotate(a, v, 0, 2);
    jacobi_rotate(a, v, 1, 2);
  }

  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    return a[i * 3 + i] > a[j * 3 + j];
  });
  std::vector<double> lambda(3), u(9);
  for (int c = 0; c < 3; ++c) {
    lambda[c] = a[order[c] * 3 + order[c]];
    for (int r = 0; r < 3; ++r) u[r * 3 + c] = v[r * 3 + order[c]];
  }
  return {Tensor::from({3, 3}, std::move(u)),
          Tensor::from({3}, std::move(lambda))};
}

Tensor whitening_transform(const Tensor& sigma, double eps) {
  auto [u, lambda] = eig_sym3(sigma);
  const auto& uv = u.values();
  const auto& lv = lambda.values();
  double d[3];
  for (int i = 0; i < 3; ++i) {
    REVNET_CHECK(lv[i] + eps > 0.0,
                 "whitening_transform: non-positive regularized eigenvalue");
    d[i] = 1.0 / std::sqrt(lv[i] + eps);
  }
  std::vector<double> w(9, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += uv[i * 3 + k] * d[k] * uv[j * 3 + k];
      w[i * 3 + j] = acc;
    }
  return Tensor::from({3, 3}, std::move(w));
}

}  // namespace revnet
