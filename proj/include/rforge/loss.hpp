#pragma once

#include <string>
#include <string_view>

#include "rforge/particles.hpp"
#include "rforge/resamplers.hpp"

namespace rforge {

// Where the target particles for the resampling loss come from.
struct TargetStrategy {
  enum class Tag { identity, traditional };

  Tag tag = Tag::identity;
  // Used by `traditional`; multinomial or systematic.
  ResamplerKind baseline = ResamplerKind::parse("systematic");

  // "identity", "multinomial" or "systematic".
  static TargetStrategy parse(std::string_view name);
  std::string name() const;
};

// -sum_i (v_i / sum_j v_j) log q(y_i), q the KDE of `output`.
double resampling_loss(const ParticleSet& output, const ParticleSet& targets, const KdeConfig& cfg);
ad::Tensor resampling_loss(const TensorParticles& output, const TensorParticles& targets, const KdeConfig& cfg);

ParticleSet build_targets(const ParticleSet& input, const TargetStrategy& strategy, RngStream& rng);

}  // namespace rforge
