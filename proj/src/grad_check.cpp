#include "revnet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace revnet {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (pass ? "PASS" : "FAIL") << " (tol " << tol << ")";
  for (const auto& it : items)
    os << "\n  " << it.name << ": max_rel_err=" << it.max_rel_err << " ("
       << it.coords_checked << " coords)";
  return os.str();
}

GradCheckReport grad_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double tol,
    double step, int max_coords) {
  GradCheckReport report;
  report.tol = tol;

  Tensor loss = f();
  GradMap grads = backward(loss);

  for (const auto& [name, param] : params) {
    REVNET_CHECK(param.is_leaf(), "grad_check: parameters must be leaves");
    GradCheckItem item;
    item.name = name;
    const std::vector<double> analytic = grads.grad(param);
    Tensor p = param;  // non-const handle for leaf_values()
    auto& vals = p.leaf_values();
    const size_t n = vals.size();
    size_t stride = 1;
    if (max_coords > 0 && n > static_cast<size_t>(max_coords))
      stride = (n + max_coords - 1) / max_coords;
    for (size_t i = 0; i < n; i += stride) {
      const double orig = vals[i];
      vals[i] = orig + step;
      const double fp = f().value();
      vals[i] = orig - step;
      const double fm = f().value();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      item.max_rel_err =
          std::max(item.max_rel_err, std::abs(analytic[i] - numeric) / denom);
      ++item.coords_checked;
    }
    report.worst = std::max(report.worst, item.max_rel_err);
    report.items.push_back(std::move(item));
  }
  report.pass = report.worst <= tol;
  return report;
}

}  // namespace revnet
