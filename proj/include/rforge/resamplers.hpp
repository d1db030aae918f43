#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rforge/particles.hpp"
#include "rforge/rng.hpp"

namespace rforge {

struct TransformerParams;

struct ResamplerKind {
  enum class Tag { multinomial, systematic, soft, transformer, none };

  static constexpr double kDefaultSoftAlpha = 0.5;

  Tag tag = Tag::systematic;
  // Mixing coefficient for soft resampling, in (0, 1].
  double alpha = kDefaultSoftAlpha;

  static ResamplerKind parse(std::string_view name, double alpha = kDefaultSoftAlpha);
  std::string name() const;
  void validate() const;
  bool operator==(const ResamplerKind&) const = default;
};

// Ancestors drawn i.i.d. from `probs` (which must sum to 1).
std::vector<std::size_t> multinomial_ancestors(std::span<const double> probs, std::size_t count, RngStream& rng);

// Ancestor for each grid point offset + k/n, k = 0..n-1. Particle i owns the
// half-open span [c_{i-1}, c_i) of the cumulative weights.
std::vector<std::size_t> systematic_ancestors(std::span<const double> weights, double offset);

ParticleSet multinomial_resample(const ParticleSet& set, RngStream& rng);
ParticleSet systematic_resample(const ParticleSet& set, RngStream& rng);
ParticleSet soft_resample(const ParticleSet& set, double alpha, RngStream& rng);

// Graph versions: copied positions carry gradient to their ancestors; soft
// resampling output weights are differentiable w.r.t. input weights.
TensorParticles multinomial_resample(const TensorParticles& set, RngStream& rng);
TensorParticles systematic_resample(const TensorParticles& set, RngStream& rng);
TensorParticles soft_resample(const TensorParticles& set, double alpha, RngStream& rng);

// Dispatch on `kind`. `none` returns the input unchanged; `transformer`
// requires `model`.
TensorParticles resample(const ResamplerKind& kind, const TensorParticles& set, RngStream& rng,
                         const TransformerParams* model = nullptr);
ParticleSet resample(const ResamplerKind& kind, const ParticleSet& set, RngStream& rng,
                     const TransformerParams* model = nullptr);

}  // namespace rforge
