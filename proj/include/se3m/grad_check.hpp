#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "se3m/tensor.hpp"

namespace se3m {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is zero from dividing roundoff by roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares analytic gradients to central differences over every entry of
/// every parameter.
///
/// `loss()` must evaluate the scalar loss from the current parameter values.
/// `backward()` must zero the gradients, run forward + backward, and leave
/// the analytic gradients in the parameters.
template <typename LossFn, typename BackwardFn>
GradCheckResult grad_check(const ParameterRefs<double>& params, LossFn&& loss, BackwardFn&& backward, double h = 1e-5) {
  backward();
  GradCheckResult res;
  for (auto* p : params) {
    const Tensor<double> analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = loss();
      p->value[i] = saved - h;
      const double down = loss();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++res.checked;
      if (err > res.max_relative_error || res.worst_parameter.empty()) {
        res.max_relative_error = std::max(err, res.max_relative_error);
        if (err >= res.max_relative_error) {
          res.worst_parameter = p->name;
          res.worst_index = i;
          res.worst_analytic = analytic[i];
          res.worst_numeric = numeric;
        }
      }
    }
  }
  return res;
}

}  // namespace se3m
