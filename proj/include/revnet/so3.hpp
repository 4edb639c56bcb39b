#pragma once

#include <cstdint>
#include <utility>

#include "revnet/rng.hpp"
#include "revnet/tensor.hpp"

namespace revnet {

/// Proper rotation (element of SO(3)), stored as a 3x3 matrix tensor.
/// Rotations act on VN features and point rows by right-multiplication X*R.
struct Rotation {
  Tensor matrix;  // {3,3}, constant (no grad)

  bool valid(double tol = 1e-10) const;
};

/// Haar-uniform random rotation, deterministic for a fixed seed.
/// Construction: four i.i.d. Gaussians normalized to a unit quaternion.
Rotation random_rotation(std::uint64_t seed);
Rotation random_rotation(Rng& rng);

/// Right-multiplies every 3-row of x by r (values only, no graph).
Tensor rotate_rows(const Tensor& x, const Rotation& r);

/// Eigendecomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps
/// (off-diagonal infinity norm driven to 1e-12, at most 50 sweeps).
/// Returns U with orthonormal eigenvector columns and eigenvalues sorted
/// descending, so that S = U * diag(lambda) * U^T.
/// Throws if S deviates from symmetry by more than 1e-9.
std::pair<Tensor, Tensor> eig_sym3(const Tensor& s);

/// f(S) = U (Lambda + eps)^(-1/2) U^T, the whitening transform of a
/// covariance matrix. Returned as a constant tensor (no gradient flows
/// through the eigendecomposition by design).
Tensor whitening_transform(const Tensor& sigma, double eps);

}  // namespace revnet
