#include "rforge/benchmark.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <ostream>
#include <stdexcept>

#include "rforge/format.hpp"
#include "rforge/loss.hpp"
#include "rforge/parallel.hpp"

namespace rforge {

MixtureSpec MixtureSpec::random(RngStream& rng, std::size_t dim) {
  MixtureSpec m;
  const double p1 = rng.uniform(0.2, 0.4);
  const double p2 = rng.uniform(0.2, 0.4);
  m.probs = {p1, p2, 1.0 - p1 - p2};
  for (int c = 0; c < 3; ++c) {
    std::vector<double> mu(dim), sd(dim);
    for (auto& v : mu) v = rng.uniform(-5.0, 5.0);
    for (auto& v : sd) v = rng.uniform(1.0, 3.0);
    m.means.push_back(std::move(mu));
    m.stds.push_back(std::move(sd));
  }
  return m;
}

double MixtureSpec::log_density(std::span<const double> x) const {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  std::vector<double> terms(probs.size());
  for (std::size_t c = 0; c < probs.size(); ++c) {
    double t = std::log(probs[c]);
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double z = (x[k] - means[c][k]) / stds[c][k];
      t -= 0.5 * z * z + std::log(stds[c][k]) + half_log_2pi;
    }
    terms[c] = t;
  }
  const double mx = *std::max_element(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += std::exp(t - mx);
  return mx + std::log(s);
}

std::vector<double> MixtureSpec::sample(RngStream& rng) const {
  const double u = rng.uniform();
  std::size_t c = 0;
  double acc = probs[0];
  while (c + 1 < probs.size() && u >= acc) acc += probs[++c];
  std::vector<double> x(dim());
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = rng.normal(means[c][k], stds[c][k]);
  return x;
}

ParticleSet draw_weighted_set(const MixtureSpec& sampling, const MixtureSpec& weighting, std::size_t n,
                              RngStream& rng) {
  const std::size_t d = sampling.dim();
  std::vector<double> pos;
  pos.reserve(n * d);
  std::vector<double> logw(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto x = sampling.sample(rng);
    logw[i] = weighting.log_density(x);
    pos.insert(pos.end(), x.begin(), x.end());
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  for (auto& v : logw) v = std::exp(v - mx);
  return ParticleSet(d, std::move(pos), normalize_weights(logw));
}

BenchmarkCase generate_case(RngStream& rng, const BenchmarkConfig& cfg) {
  auto sampling = MixtureSpec::random(rng, cfg.dim);
  auto weighting = MixtureSpec::random(rng, cfg.dim);
  auto input = draw_weighted_set(sampling, weighting, cfg.particles, rng);
  auto target = cfg.reuse_inputs_as_targets ? input : draw_weighted_set(sampling, weighting, cfg.particles, rng);
  return {std::move(sampling), std::move(weighting), std::move(input), std::move(target)};
}

DatasetFiles DatasetFiles::in(const std::filesystem::path& dir) {
  return {dir / "train_inputs.pset", dir / "train_targets.pset", dir / "eval_inputs.pset",
          dir / "eval_targets.pset"};
}

namespace {

void write_split(const std::filesystem::path& inputs, const std::filesystem::path& targets, std::size_t count,
                 const RngStream& stream, const BenchmarkConfig& cfg) {
  PsetWriter in_w(inputs, cfg.particles, cfg.dim);
  PsetWriter tgt_w(targets, cfg.particles, cfg.dim);
  constexpr std::size_t kChunk = 4096;
  for (std::size_t start = 0; start < count; start += kChunk) {
    const std::size_t len = std::min(kChunk, count - start);
    std::vector<std::optional<BenchmarkCase>> cases(len);
    parallel_for(len, [&](std::size_t j) {
      RngStream rng = stream.split(start + j);
      cases[j] = generate_case(rng, cfg);
    });
    for (const auto& c : cases) {
      in_w.append(c->input);
      tgt_w.append(c->target);
    }
  }
  in_w.finish();
  tgt_w.finish();
}

}  // namespace

DatasetFiles generate_dataset(const std::filesystem::path& dir, std::size_t train, std::size_t eval,
                              std::uint64_t seed, const BenchmarkConfig& cfg) {
  if (train == 0 || eval == 0) throw std::invalid_argument("generate_dataset: both splits need at least one set");
  const auto files = DatasetFiles::in(dir);
  const RngStream root(seed);
  write_split(files.train_inputs, files.train_targets, train, root.split(0), cfg);
  write_split(files.eval_inputs, files.eval_targets, eval, root.split(1), cfg);
  return files;
}

std::vector<double> default_bandwidths() { return {0.05, 0.1, 0.2, 0.5, 1.0}; }

std::vector<SweepRow> bandwidth_sweep(const ResamplerKind& kind, const std::filesystem::path& inputs,
                                      const std::filesystem::path& targets, std::span<const double> bandwidths,
                                      std::uint64_t seed, const TransformerParams* model) {
  if (bandwidths.empty()) throw std::invalid_argument("bandwidth_sweep: empty bandwidth list");
  for (double h : bandwidths) KdeConfig{h}.validate();
  if (kind.tag == ResamplerKind::Tag::transformer && model == nullptr) {
    throw std::invalid_argument("bandwidth_sweep: transformer resampler requires a checkpoint");
  }
  const auto in_sets = read_pset(inputs);
  const auto tgt_sets = read_pset(targets);
  if (in_sets.size() != tgt_sets.size()) {
    throw std::invalid_argument("bandwidth_sweep: " + inputs.string() + " holds " + std::to_string(in_sets.size()) +
                                " sets but " + targets.string() + " holds " + std::to_string(tgt_sets.size()));
  }
  const std::size_t cases = in_sets.size();
  const std::size_t nb = bandwidths.size();
  std::vector<double> losses(cases * nb);
  const RngStream root(seed);
  parallel_for(cases, [&](std::size_t i) {
    RngStream rng = root.split(i);
    const auto out = resample(kind, in_sets[i], rng, model);
    for (std::size_t b = 0; b < nb; ++b) losses[i * nb + b] = resampling_loss(out, tgt_sets[i], {bandwidths[b]});
  });
  std::vector<SweepRow> rows;
  for (std::size_t b = 0; b < nb; ++b) {
    double mean = 0.0;
    for (std::size_t i = 0; i < cases; ++i) mean += losses[i * nb + b];
    mean /= static_cast<double>(cases);
    double var = 0.0;
    for (std::size_t i = 0; i < cases; ++i) var += std::pow(losses[i * nb + b] - mean, 2);
    const double se = cases > 1 ? std::sqrt(var / static_cast<double>(cases - 1) / static_cast<double>(cases)) : 0.0;
    rows.push_back({kind.name(), bandwidths[b], mean, se, cases});
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << "resampler,bandwidth,mean_loss,stderr,n_cases\n";
  for (const auto& r : rows) {
    os << r.resampler << ',' << format_double(r.bandwidth) << ',' << format_double(r.mean_loss) << ','
       << format_double(r.stderr_loss) << ',' << r.n_cases << '\n';
  }
}

}  // namespace rforge
