#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rforge/particles.hpp"
#include "rforge/resamplers.hpp"
#include "rforge/rng.hpp"

namespace rforge {

// Diagonal-covariance Gaussian mixture.
struct MixtureSpec {
  std::vector<double> probs;               // [components]
  std::vector<std::vector<double>> means;  // [components][dim]
  std::vector<std::vector<double>> stds;   // [components][dim]

  // Three components; means U[-5, 5], stds U[1, 3] per dimension, p1 and p2
  // U[0.2, 0.4], p3 the remainder.
  static MixtureSpec random(RngStream& rng, std::size_t dim = 5);

  std::size_t dim() const { return means.front().size(); }
  double log_density(std::span<const double> x) const;
  std::vector<double> sample(RngStream& rng) const;
};

struct BenchmarkConfig {
  std::size_t particles = 32;
  std::size_t dim = 5;
  // Target sets are fresh draws by default; this makes them copies of the inputs.
  bool reuse_inputs_as_targets = false;
};

struct BenchmarkCase {
  MixtureSpec sampling;
  MixtureSpec weighting;
  ParticleSet input;
  ParticleSet target;
};

// n positions from `sampling`, weights proportional to the `weighting` density.
ParticleSet draw_weighted_set(const MixtureSpec& sampling, const MixtureSpec& weighting, std::size_t n,
                              RngStream& rng);

BenchmarkCase generate_case(RngStream& rng, const BenchmarkConfig& cfg = {});

struct DatasetFiles {
  std::filesystem::path train_inputs, train_targets, eval_inputs, eval_targets;
  static DatasetFiles in(const std::filesystem::path& dir);
};

// Case i of the training split draws from split(0, i) of the seed stream and
// eval case i from split(1, i), so output is independent of thread count.
DatasetFiles generate_dataset(const std::filesystem::path& dir, std::size_t train, std::size_t eval,
                              std::uint64_t seed, const BenchmarkConfig& cfg = {});

struct SweepRow {
  std::string resampler;
  double bandwidth = 0.0;
  double mean_loss = 0.0;
  double stderr_loss = 0.0;
  std::size_t n_cases = 0;
};

std::vector<double> default_bandwidths();

// Resamples every input set once (case i uses split(i) of the seed stream)
// and scores the result against its target at each bandwidth.
std::vector<SweepRow> bandwidth_sweep(const ResamplerKind& kind, const std::filesystem::path& inputs,
                                      const std::filesystem::path& targets, std::span<const double> bandwidths,
                                      std::uint64_t seed, const TransformerParams* model = nullptr);

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows);

}  // namespace rforge
