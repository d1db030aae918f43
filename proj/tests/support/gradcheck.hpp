#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rforge/autodiff/tensor.hpp"
#include "rforge/rng.hpp"

namespace rforge::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "input k, element i"
};

// Compares analytic gradients of the scalar `f(inputs)` against central
// differences. The difference oracle only ever calls `f` forward.
// Relative error uses max(|analytic|, |numeric|, floor) as denominator.
inline GradCheckResult gradcheck(const std::function<ad::Tensor(const std::vector<ad::Tensor>&)>& f,
                                 std::vector<ad::Tensor> inputs, double step = 1e-5, double floor = 1e-3) {
  for (auto& t : inputs) {
    t = t.detach();
    t.set_requires_grad(true);
  }
  ad::Tensor out = f(inputs);
  ad::backward(out);
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = inputs[k].grad();
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      std::vector<ad::Tensor> probe;
      for (const auto& t : inputs) probe.push_back(t.detach());
      const double x0 = probe[k].at(i);
      probe[k].mutable_data()[i] = x0 + step;
      const double fp = f(probe).item();
      probe[k].mutable_data()[i] = x0 - step;
      const double fm = f(probe).item();
      const double numeric = (fp - fm) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (err > result.max_rel_error || std::isnan(err)) {
        result.max_rel_error = std::isnan(err) ? 1e300 : err;
        result.worst = "input " + std::to_string(k) + ", element " + std::to_string(i) + ": analytic " +
                       std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

inline ad::Tensor random_tensor(RngStream& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return ad::Tensor(std::move(shape), std::move(v));
}

}  // namespace rforge::testing
