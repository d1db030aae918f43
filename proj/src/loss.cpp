#include "rforge/loss.hpp"

#include <stdexcept>

#include "rforge/autodiff/ops.hpp"

namespace rforge {

TargetStrategy TargetStrategy::parse(std::string_view name) {
  TargetStrategy s;
  if (name == "identity") return s;
  if (name == "multinomial" || name == "systematic") {
    s.tag = Tag::traditional;
    s.baseline = ResamplerKind::parse(name);
    return s;
  }
  throw std::invalid_argument("unknown target strategy '" + std::string(name) +
                              "' (expected identity|multinomial|systematic)");
}

std::string TargetStrategy::name() const { return tag == Tag::identity ? "identity" : baseline.name(); }

double resampling_loss(const ParticleSet& output, const ParticleSet& targets, const KdeConfig& cfg) {
  if (output.dim() != targets.dim()) {
    throw std::invalid_argument("resampling_loss: output has dimension " + std::to_string(output.dim()) +
                                ", targets " + std::to_string(targets.dim()));
  }
  cfg.validate();
  double total_v = 0.0;
  for (auto v : targets.weights()) total_v += v;
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets.weight(i) == 0.0) continue;
    loss -= targets.weight(i) / total_v * kde_log_density(output, targets.position(i), cfg);
  }
  return loss;
}

ad::Tensor resampling_loss(const TensorParticles& output, const TensorParticles& targets, const KdeConfig& cfg) {
  if (output.dim() != targets.dim()) {
    throw std::invalid_argument("resampling_loss: output has dimension " + std::to_string(output.dim()) +
                                ", targets " + std::to_string(targets.dim()));
  }
  auto log_q = kde_log_density(output, targets.positions, cfg);
  auto v = targets.weights / ad::sum(targets.weights);
  return -ad::sum(v * log_q);
}

ParticleSet build_targets(const ParticleSet& input, const TargetStrategy& strategy, RngStream& rng) {
  if (strategy.tag == TargetStrategy::Tag::identity) return input;
  return resample(strategy.baseline, input, rng);
}

}  // namespace rforge
