#include "rforge/resamplers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rforge/autodiff/ops.hpp"
#include "rforge/format.hpp"
#include "rforge/transformer.hpp"

namespace rforge {

namespace {

std::vector<double> cumulative(std::span<const double> w) {
  std::vector<double> c(w.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    c[i] = acc;
  }
  return c;
}

// First index whose cumulative weight exceeds u; draws past the rounded total
// fall to the last particle with positive weight.
std::size_t locate(const std::vector<double>& cdf, std::span<const double> w, double u) {
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  std::size_t i = it == cdf.end() ? cdf.size() - 1 : static_cast<std::size_t>(it - cdf.begin());
  while (i > 0 && w[i] == 0.0) --i;
  return i;
}

ParticleSet copy_ancestors(const ParticleSet& set, std::span<const std::size_t> anc) {
  std::vector<double> pos;
  pos.reserve(anc.size() * set.dim());
  for (auto a : anc) {
    auto x = set.position(a);
    pos.insert(pos.end(), x.begin(), x.end());
  }
  return ParticleSet::uniform(set.dim(), std::move(pos));
}

std::vector<double> soft_proposal(std::span<const double> w, double alpha) {
  const double n = static_cast<double>(w.size());
  std::vector<double> q(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) q[i] = alpha * w[i] + (1.0 - alpha) / n;
  return q;
}

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("soft resampling: alpha must lie in (0, 1], got " + format_double(alpha));
  }
}

TensorParticles uniform_copies(const TensorParticles& set, std::span<const std::size_t> anc) {
  const std::size_t n = anc.size();
  return {ad::gather_rows(set.positions, anc), ad::Tensor::full({n}, 1.0 / static_cast<double>(n))};
}

}  // namespace

ResamplerKind ResamplerKind::parse(std::string_view name, double alpha) {
  ResamplerKind k;
  k.alpha = alpha;
  if (name == "multinomial") k.tag = Tag::multinomial;
  else if (name == "systematic") k.tag = Tag::systematic;
  else if (name == "soft") k.tag = Tag::soft;
  else if (name == "transformer") k.tag = Tag::transformer;
  else if (name == "none") k.tag = Tag::none;
  else throw std::invalid_argument("unknown resampler '" + std::string(name) +
                                   "' (expected multinomial|systematic|soft|transformer|none)");
  k.validate();
  return k;
}

std::string ResamplerKind::name() const {
  switch (tag) {
    case Tag::multinomial: return "multinomial";
    case Tag::systematic: return "systematic";
    case Tag::soft: return "soft";
    case Tag::transformer: return "transformer";
    case Tag::none: return "none";
  }
  return "?";
}

void ResamplerKind::validate() const {
  if (tag == Tag::soft) check_alpha(alpha);
}

std::vector<std::size_t> multinomial_ancestors(std::span<const double> probs, std::size_t count, RngStream& rng) {
  const auto cdf = cumulative(probs);
  std::vector<std::size_t> anc(count);
  for (auto& a : anc) a = locate(cdf, probs, rng.uniform() * cdf.back());
  return anc;
}

std::vector<std::size_t> systematic_ancestors(std::span<const double> weights, double offset) {
  const std::size_t n = weights.size();
  const double scale = static_cast<double>(n);
  auto bounds = cumulative(weights);
  const double total = bounds.back();
  // Boundaries in grid units, so grid point k sits at k + n*offset. Rounding in
  // the cumulative sum would otherwise push exact hits (uniform weights,
  // offset 0) across a boundary; values within 1e-9 of an integer snap to it.
  for (auto& b : bounds) {
    b = b / total * scale;
    const double r = std::round(b);
    if (std::abs(b - r) < 1e-9) b = r;
  }
  bounds.back() = scale;
  std::vector<std::size_t> anc(n);
  std::size_t i = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double u = static_cast<double>(k) + offset * scale;
    while (i + 1 < n && bounds[i] <= u) ++i;
    std::size_t j = i;
    while (j > 0 && weights[j] == 0.0) --j;
    anc[k] = j;
  }
  return anc;
}

ParticleSet multinomial_resample(const ParticleSet& set, RngStream& rng) {
  return copy_ancestors(set, multinomial_ancestors(set.weights(), set.size(), rng));
}

ParticleSet systematic_resample(const ParticleSet& set, RngStream& rng) {
  const double offset = rng.uniform() / static_cast<double>(set.size());
  return copy_ancestors(set, systematic_ancestors(set.weights(), offset));
}

ParticleSet soft_resample(const ParticleSet& set, double alpha, RngStream& rng) {
  check_alpha(alpha);
  const auto q = soft_proposal(set.weights(), alpha);
  const auto anc = multinomial_ancestors(q, set.size(), rng);
  std::vector<double> pos, raw;
  for (auto a : anc) {
    auto x = set.position(a);
    pos.insert(pos.end(), x.begin(), x.end());
    raw.push_back(set.weight(a) / q[a]);
  }
  return ParticleSet(set.dim(), std::move(pos), normalize_weights(raw));
}

TensorParticles multinomial_resample(const TensorParticles& set, RngStream& rng) {
  const auto w = set.weights.data();
  return uniform_copies(set, multinomial_ancestors(w, set.size(), rng));
}

TensorParticles systematic_resample(const TensorParticles& set, RngStream& rng) {
  const double offset = rng.uniform() / static_cast<double>(set.size());
  return uniform_copies(set, systematic_ancestors(set.weights.data(), offset));
}

TensorParticles soft_resample(const TensorParticles& set, double alpha, RngStream& rng) {
  check_alpha(alpha);
  const std::size_t n = set.size();
  const auto q_plain = soft_proposal(set.weights.data(), alpha);
  const auto anc = multinomial_ancestors(q_plain, n, rng);
  auto q = set.weights * alpha + (1.0 - alpha) / static_cast<double>(n);
  auto raw = ad::gather_rows(set.weights, anc) / ad::gather_rows(q, anc);
  auto total = ad::sum(raw);
  if (!(total.item() > 0.0)) throw std::domain_error("soft resampling: all sampled ancestors have zero weight");
  return {ad::gather_rows(set.positions, anc), raw / total};
}

TensorParticles resample(const ResamplerKind& kind, const TensorParticles& set, RngStream& rng,
                         const TransformerParams* model) {
  switch (kind.tag) {
    case ResamplerKind::Tag::multinomial: return multinomial_resample(set, rng);
    case ResamplerKind::Tag::systematic: return systematic_resample(set, rng);
    case ResamplerKind::Tag::soft: return soft_resample(set, kind.alpha, rng);
    case ResamplerKind::Tag::none: return set;
    case ResamplerKind::Tag::transformer:
      if (model == nullptr) throw std::invalid_argument("transformer resampler selected without loaded parameters");
      return transformer_resample(set, *model);
  }
  throw std::logic_error("unreachable resampler tag");
}

ParticleSet resample(const ResamplerKind& kind, const ParticleSet& set, RngStream& rng,
                     const TransformerParams* model) {
  switch (kind.tag) {
    case ResamplerKind::Tag::multinomial: return multinomial_resample(set, rng);
    case ResamplerKind::Tag::systematic: return systematic_resample(set, rng);
    case ResamplerKind::Tag::soft: return soft_resample(set, kind.alpha, rng);
    case ResamplerKind::Tag::none: return set;
    case ResamplerKind::Tag::transformer: {
      if (model == nullptr) throw std::invalid_argument("transformer resampler selected without loaded parameters");
      ad::NoGradGuard no_grad;
      return transformer_resample(TensorParticles::from_set(set), *model).to_set();
    }
  }
  throw std::logic_error("unreachable resampler tag");
}

}  // namespace rforge
