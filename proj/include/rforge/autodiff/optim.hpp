#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rforge/autodiff/tensor.hpp"

namespace rforge::ad {

// Global L2 norm over the accumulated grads of `params`.
double global_grad_norm(std::span<const Tensor> params);

// Rescales the grads of `params` so their global L2 norm does not exceed
// `max_norm`. Returns the norm measured before clipping.
double clip_global_norm(std::span<Tensor> params, double max_norm);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  std::uint64_t step = 0;

  static AdamState for_params(std::span<const Tensor> params);
};

// One bias-corrected adaptive-moment update using the grads currently held by
// `params`. Tensors without an accumulated grad are treated as zero-gradient.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamOptions& options);

void zero_grads(std::span<Tensor> params);

}  // namespace rforge::ad
