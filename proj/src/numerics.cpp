// SPDX-License-Identifier: Apache-2.0
#include "switchsim/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace switchsim {

Tensor trunc_normal_init(const Shape& shape, double scale, std::int64_t fan_in, RngStream& rng) {
  if (!(scale > 0.0)) throw InvalidArgument("trunc_normal_init: scale must be > 0, got " + std::to_string(scale));
  if (fan_in < 1) throw InvalidArgument("trunc_normal_init: fan_in must be >= 1, got " + std::to_string(fan_in));
  const double sigma = std::sqrt(scale / static_cast<double>(fan_in));
  Tensor t(shape);
  for (auto& v : t.storage()) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    v = static_cast<float>(sigma * z);
    // float rounding of sigma*z may step just past the bound
    const auto bound = static_cast<float>(2.0 * sigma);
    v = std::clamp(v, -bound, bound);
  }
  return t;
}

double GradReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_rel_error);
  return m;
}

std::string GradReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " tol=" << tolerance;
  for (const auto& p : params)
    os << "\n  " << p.name << ": max_rel_err=" << p.max_rel_error << " (index " << p.worst_index
       << ", analytic=" << p.analytic << ", numeric=" << p.numeric << ")";
  return os.str();
}

GradReport grad_check(const std::function<double()>& loss, std::vector<GradParam>& params, double h, double tol) {
  GradReport report;
  report.tolerance = tol;
  for (auto& p : params) {
    if (p.value == nullptr) throw InvalidArgument("grad_check: parameter '" + p.name + "' has no storage");
    require_same_shape(*p.value, p.analytic, "grad_check");
    ParamError err;
    err.name = p.name;
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      double& x = (*p.value)[i];
      const double orig = x;
      x = orig + h;
      const double fp = loss();
      x = orig - h;
      const double fm = loss();
      x = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: non-finite loss while perturbing " + p.name + "[" + std::to_string(i) + "]");
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p.analytic[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckAbsFloor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (i == 0 || rel > err.max_rel_error) {
        err.max_rel_error = rel;
        err.worst_index = i;
        err.analytic = analytic;
        err.numeric = numeric;
      }
    }
    if (err.max_rel_error > tol) report.passed = false;
    report.params.push_back(std::move(err));
  }
  return report;
}

}  // namespace switchsim
