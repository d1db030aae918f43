#include "rforge/autodiff/optim.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace rforge::ad {

double global_grad_norm(std::span<const Tensor> params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.node()->grad) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_global_norm(std::span<Tensor> params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return norm;
  double scale = max_norm / norm;
  // Rounding can leave the rescaled norm a few ulps above the threshold.
  for (int attempt = 0; attempt < 8; ++attempt) {
    for (auto& p : params) {
      for (double& g : p.node()->grad) g *= scale;
    }
    if (global_grad_norm(params) <= max_norm) break;
    scale = 1.0 - 4.0 * std::numeric_limits<double>::epsilon();
  }
  return norm;
}

AdamState AdamState::for_params(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.first.emplace_back(p.numel(), 0.0);
    s.second.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, AdamState& state, const AdamOptions& options) {
  if (state.first.size() != params.size() || state.second.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state holds " + std::to_string(state.first.size()) +
                                " tensors, got " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.first[k].size() != params[k].numel() || state.second[k].size() != params[k].numel()) {
      throw std::invalid_argument("adam_step: moment shape mismatch for parameter " + std::to_string(k) +
                                  " of shape " + to_string(params[k].shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(options.beta1, t);
  const double c2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Node& n = *params[k].node();
    auto& m = state.first[k];
    auto& v = state.second[k];
    for (std::size_t i = 0; i < n.data.size(); ++i) {
      const double g = n.grad.empty() ? 0.0 : n.grad[i];
      m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g;
      v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g * g;
      n.data[i] -= options.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options.eps);
    }
  }
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace rforge::ad
