#pragma once

#include <functional>
#include <string>
#include <vector>

#include "revnet/tensor.hpp"

namespace revnet {

struct GradCheckItem {
  std::string name;
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckItem> items;
  double worst = 0.0;
  double tol = 0.0;
  bool pass = false;
  std::string summary() const;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences taken on the same function. `f` must rebuild its graph
/// from the current leaf values on every call. Relative error uses a 1e-6
/// magnitude floor so that finite-difference noise on zero gradients does
/// not dominate. `max_coords` > 0 checks an evenly strided subset of each
/// parameter (deterministic).
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double tol, double step = 1e-5,
                           int max_coords = -1);

}  // namespace revnet
