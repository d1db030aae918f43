#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <span>
#include <vector>

#include "rforge/autodiff/tensor.hpp"

namespace rforge {

// n weighted points in d dimensions. Construction enforces n >= 1, d >= 1,
// non-negative weights summing to 1 within 1e-9.
class ParticleSet {
 public:
  static constexpr double kWeightTolerance = 1e-9;

  ParticleSet(std::size_t dim, std::vector<double> positions, std::vector<double> weights);
  static ParticleSet uniform(std::size_t dim, std::vector<double> positions);

  std::size_t size() const { return weights_.size(); }
  std::size_t dim() const { return dim_; }
  std::span<const double> positions() const { return positions_; }
  std::span<const double> weights() const { return weights_; }
  std::span<const double> position(std::size_t i) const { return {positions_.data() + i * dim_, dim_}; }
  double weight(std::size_t i) const { return weights_[i]; }

  bool operator==(const ParticleSet&) const = default;

 private:
  std::size_t dim_;
  std::vector<double> positions_;
  std::vector<double> weights_;
};

struct KdeConfig {
  double bandwidth = 0.5;
  void validate() const;
};

// Proportional rescaling to unit sum; throws on negative or all-zero input.
std::vector<double> normalize_weights(std::span<const double> raw);

double effective_sample_size(std::span<const double> weights);

// log sum_i w_i N(query; x_i, h^2 I), evaluated with log-sum-exp.
double kde_log_density(const ParticleSet& set, std::span<const double> query, const KdeConfig& cfg);

// A particle set held as graph tensors: positions [n, d], weights [n].
struct TensorParticles {
  ad::Tensor positions;
  ad::Tensor weights;

  std::size_t size() const { return positions.dim(0); }
  std::size_t dim() const { return positions.dim(1); }

  static TensorParticles from_set(const ParticleSet& set, bool requires_grad = false);
  ParticleSet to_set() const;
  TensorParticles detached() const { return {positions.detach(), weights.detach()}; }
};

// Differentiable KDE log-density of `set` at each row of `queries` [m, d];
// returns shape [m].
ad::Tensor kde_log_density(const TensorParticles& set, const ad::Tensor& queries, const KdeConfig& cfg);

// Particle-set dataset file "PSET1": magic, u64 set count, u64 n, u64 d, then
// per set n*d positions followed by n weights, all little-endian.
struct PsetHeader {
  std::uint64_t count = 0;
  std::uint64_t n = 0;
  std::uint64_t d = 0;
};

class PsetWriter {
 public:
  PsetWriter(const std::filesystem::path& path, std::size_t n, std::size_t d);
  ~PsetWriter();
  PsetWriter(const PsetWriter&) = delete;
  PsetWriter& operator=(const PsetWriter&) = delete;

  void append(const ParticleSet& set);
  // Patches the set count into the header and closes the file.
  void finish();
  std::uint64_t count() const { return count_; }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
  std::size_t n_, d_;
  std::uint64_t count_ = 0;
  bool finished_ = false;
};

void write_pset(const std::filesystem::path& path, std::span<const ParticleSet> sets);
PsetHeader read_pset_header(const std::filesystem::path& path);
std::vector<ParticleSet> read_pset(const std::filesystem::path& path);
ParticleSet read_pset_entry(const std::filesystem::path& path, std::uint64_t index);

// Columns dim_0..dim_{d-1}, weight; values at full round-trip precision.
void write_csv(std::ostream& os, const ParticleSet& set);

}  // namespace rforge
