#pragma once

// Central finite-difference gradient checker shared by the unit tests and
// the acceptance suite. Builds the graph twice per probed coordinate and
// compares the analytic gradient against (f(x+h) - f(x-h)) / 2h.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pmdet/autodiff.hpp"

namespace pmdet::testutil {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // parameter/coordinate of the worst error
  std::size_t checked = 0;
};

// forward() must rebuild the scalar loss graph from the current parameter
// values each call. `expected_sign` flips the analytic/numeric comparison
// for parameters that sit upstream of a gradient reversal.
inline GradCheckResult grad_check(
    const std::function<ad::Var()>& forward,
    const std::vector<ad::Var>& params, double h = 1e-5,
    const std::vector<double>& expected_sign = {}) {
  GradCheckResult result;

  ad::zero_grad(params);
  ad::Var loss = forward();
  ad::backward(loss);

  std::vector<Tensor> analytic;
  for (const auto& p : params)
    analytic.push_back(p->grad.size() ? p->grad : Tensor::zeros(p->value.shape()));

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const double sign = expected_sign.empty() ? 1.0 : expected_sign[pi];
    Tensor& value = params[pi]->value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double a = analytic[pi][i];
      auto rel_at = [&](double step) {
        const double keep = value[i];
        value[i] = keep + step;
        const double up = forward()->value[0];
        value[i] = keep - step;
        const double down = forward()->value[0];
        value[i] = keep;
        const double numeric = sign * (up - down) / (2.0 * step);
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        return std::fabs(a - numeric) / denom;
      };
      double rel = rel_at(h);
      // A large discrepancy that shrinks with the step is a finite-difference
      // artifact of crossing a ReLU/|x| kink, not a wrong gradient: genuine
      // gradient errors do not depend on the step size.
      if (rel > 5e-5) rel = std::min(rel, rel_at(h / 8.0));
      if (rel > 5e-5) rel = std::min(rel, rel_at(h / 64.0));
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = (params[pi]->name.empty() ? "param" : params[pi]->name) +
                       "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace pmdet::testutil
