#pragma once

#include <functional>
#include <vector>

#include "rforge/autodiff/ops.hpp"
#include "support/gradcheck.hpp"

namespace rforge::testing {

// Sum of out * R for a fixed random R, so every output element matters.
inline ad::Tensor project(const ad::Tensor& out, std::uint64_t seed) {
  RngStream rng(seed);
  return ad::sum(out * random_tensor(rng, out.shape()));
}

struct OpCase {
  const char* name;
  std::function<std::vector<ad::Tensor>(RngStream&)> inputs;
  std::function<ad::Tensor(const std::vector<ad::Tensor>&)> op;
};

// Keeps samples away from kinks so central differences stay smooth.
inline ad::Tensor away_from(RngStream& rng, ad::Shape shape, double kink) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) {
    const double mag = rng.uniform(0.05, 1.0);
    x = kink + (rng.uniform() < 0.5 ? -mag : mag);
  }
  return ad::Tensor(std::move(shape), std::move(v));
}

inline std::vector<OpCase> op_cases() {
  using V = std::vector<ad::Tensor>;
  return {
      {"matmul", [](RngStream& r) { return V{random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}; },
       [](const V& x) { return ad::matmul(x[0], x[1]); }},
      {"add_broadcast", [](RngStream& r) { return V{random_tensor(r, {3, 4}), random_tensor(r, {4})}; },
       [](const V& x) { return x[0] + x[1]; }},
      {"sub_broadcast", [](RngStream& r) { return V{random_tensor(r, {3, 1}), random_tensor(r, {1, 4})}; },
       [](const V& x) { return x[0] - x[1]; }},
      {"mul", [](RngStream& r) { return V{random_tensor(r, {2, 3}), random_tensor(r, {2, 3})}; },
       [](const V& x) { return x[0] * x[1]; }},
      {"div", [](RngStream& r) { return V{random_tensor(r, {2, 3}), random_tensor(r, {2, 3}, 0.5, 2.0)}; },
       [](const V& x) { return x[0] / x[1]; }},
      {"exp", [](RngStream& r) { return V{random_tensor(r, {5})}; }, [](const V& x) { return ad::exp(x[0]); }},
      {"log", [](RngStream& r) { return V{random_tensor(r, {5}, 0.2, 3.0)}; },
       [](const V& x) { return ad::log(x[0]); }},
      {"pow", [](RngStream& r) { return V{random_tensor(r, {5}, 0.2, 3.0)}; },
       [](const V& x) { return ad::pow(x[0], 1.7); }},
      {"sqrt", [](RngStream& r) { return V{random_tensor(r, {5}, 0.2, 3.0)}; },
       [](const V& x) { return ad::sqrt(x[0]); }},
      {"sin_cos", [](RngStream& r) { return V{random_tensor(r, {5}, -3.0, 3.0)}; },
       [](const V& x) { return ad::sin(x[0]) * ad::cos(x[0] * 0.7); }},
      {"relu", [](RngStream& r) { return V{away_from(r, {6}, 0.0)}; }, [](const V& x) { return ad::relu(x[0]); }},
      {"clamp", [](RngStream& r) { return V{away_from(r, {6}, 0.0)}; },
       [](const V& x) { return ad::clamp(x[0] * 2.0, -0.5, 0.5); }},
      {"sum_axis", [](RngStream& r) { return V{random_tensor(r, {2, 3, 4})}; },
       [](const V& x) { return ad::sum(x[0], 1); }},
      {"mean_axis", [](RngStream& r) { return V{random_tensor(r, {3, 4})}; },
       [](const V& x) { return ad::mean(x[0], 0, true); }},
      {"max_axis", [](RngStream& r) { return V{random_tensor(r, {3, 4})}; },
       [](const V& x) { return ad::max(x[0], 1); }},
      {"min_axis", [](RngStream& r) { return V{random_tensor(r, {3, 4})}; },
       [](const V& x) { return ad::min(x[0], 0); }},
      {"softmax", [](RngStream& r) { return V{random_tensor(r, {3, 5}, -2.0, 2.0)}; },
       [](const V& x) { return ad::softmax(x[0], 1); }},
      {"logsumexp", [](RngStream& r) { return V{random_tensor(r, {3, 5}, -2.0, 2.0)}; },
       [](const V& x) { return ad::logsumexp(x[0], 0); }},
      {"weighted_softmax",
       [](RngStream& r) { return V{random_tensor(r, {3, 5}, -2.0, 2.0), random_tensor(r, {5}, 0.05, 1.0)}; },
       [](const V& x) { return ad::weighted_softmax(x[0], x[1]); }},
      {"weighted_logsumexp",
       [](RngStream& r) { return V{random_tensor(r, {3, 5}, -2.0, 2.0), random_tensor(r, {5}, 0.05, 1.0)}; },
       [](const V& x) { return ad::weighted_logsumexp(x[0], x[1]); }},
      {"concat_split",
       [](RngStream& r) { return V{random_tensor(r, {2, 3}), random_tensor(r, {2, 2})}; },
       [](const V& x) {
         const ad::Tensor parts[] = {x[0], x[1] * 2.0};
         auto joined = ad::concat(parts, 1);
         const std::size_t sizes[] = {1, 4};
         auto pieces = ad::split(joined, sizes, 1);
         return pieces[1] * pieces[0];
       }},
      {"transpose", [](RngStream& r) { return V{random_tensor(r, {3, 4})}; },
       [](const V& x) { return ad::transpose(x[0]); }},
      {"broadcast_reshape", [](RngStream& r) { return V{random_tensor(r, {1, 3})}; },
       [](const V& x) { return ad::reshape(ad::broadcast_to(x[0], {4, 3}), {12}); }},
      {"gather_rows", [](RngStream& r) { return V{random_tensor(r, {4, 2})}; },
       [](const V& x) {
         const std::size_t idx[] = {3, 0, 3, 1};
         return ad::gather_rows(x[0], idx);
       }},
      {"layer_norm",
       [](RngStream& r) { return V{random_tensor(r, {3, 6}), random_tensor(r, {6}), random_tensor(r, {6})}; },
       [](const V& x) { return ad::layer_norm(x[0], x[1], x[2]); }},
  };
}

}  // namespace rforge::testing
