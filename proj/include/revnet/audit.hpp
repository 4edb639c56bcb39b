#pragma once

#include <string>
#include <vector>

#include "revnet/model.hpp"

namespace revnet {

struct AuditCheck {
  std::string name;
  double max_deviation = 0.0;
  double spec_tol = 0.0;  // tolerance the property is held to in the test suite
};

/// Equivariance of every VN layer: max |op(X*R) - op(X)*R| over `trials`
/// random (input, params, rotation) draws per layer.
std::vector<AuditCheck> layer_equivariance_suite(int trials,
                                                 std::uint64_t seed);

/// Invariance of VN-Inv outputs and attention scores under input rotation,
/// plus the frame equivariance T -> T*R.
std::vector<AuditCheck> invariance_suite(int trials, std::uint64_t seed);

/// Equivariance of the bias term alone (linear weight zeroed).
AuditCheck bias_equivariance_check(int trials, std::uint64_t seed);

/// Relative end-to-end deviation of the full model:
/// max |f(P*R) - f(P)*R| / (max |f(P)| + 1e-12) over all outputs.
AuditCheck end_to_end_equivariance_check(const ModelConfig& cfg,
                                         int cloud_size, int trials,
                                         std::uint64_t seed);

}  // namespace revnet
