#include "rforge/particles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>

#include "rforge/autodiff/ops.hpp"
#include "rforge/binary_io.hpp"
#include "rforge/format.hpp"

namespace rforge {

ParticleSet::ParticleSet(std::size_t dim, std::vector<double> positions, std::vector<double> weights)
    : dim_(dim), positions_(std::move(positions)), weights_(std::move(weights)) {
  if (dim_ == 0) throw std::invalid_argument("particle set: dimension must be at least 1");
  if (weights_.empty()) throw std::invalid_argument("particle set: needs at least one particle");
  if (positions_.size() != weights_.size() * dim_) {
    throw std::invalid_argument("particle set: " + std::to_string(positions_.size()) + " coordinates for " +
                                std::to_string(weights_.size()) + " particles of dimension " + std::to_string(dim_));
  }
  double total = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("particle set: negative or non-finite weight");
    total += w;
  }
  if (std::abs(total - 1.0) > kWeightTolerance) {
    throw std::invalid_argument("particle set: weights sum to " + format_double(total) + ", expected 1");
  }
  for (double x : positions_) {
    if (!std::isfinite(x)) throw std::invalid_argument("particle set: non-finite position");
  }
}

ParticleSet ParticleSet::uniform(std::size_t dim, std::vector<double> positions) {
  if (dim == 0 || positions.empty() || positions.size() % dim != 0) {
    throw std::invalid_argument("particle set: position count is not a positive multiple of the dimension");
  }
  const std::size_t n = positions.size() / dim;
  return ParticleSet(dim, std::move(positions), std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

void KdeConfig::validate() const {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw std::invalid_argument("kde: bandwidth must be positive, got " + format_double(bandwidth));
  }
}

std::vector<double> normalize_weights(std::span<const double> raw) {
  double total = 0.0;
  for (double w : raw) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw std::domain_error("normalize_weights: negative or non-finite weight " + format_double(w));
    }
    total += w;
  }
  if (!(total > 0.0)) throw std::domain_error("normalize_weights: all weights are zero");
  std::vector<double> out(raw.begin(), raw.end());
  for (double& w : out) w /= total;
  return out;
}

double effective_sample_size(std::span<const double> weights) {
  double sq = 0.0;
  for (double w : weights) sq += w * w;
  return 1.0 / sq;
}

double kde_log_density(const ParticleSet& set, std::span<const double> query, const KdeConfig& cfg) {
  cfg.validate();
  if (query.size() != set.dim()) {
    throw std::invalid_argument("kde_log_density: query has dimension " + std::to_string(query.size()) +
                                ", set has " + std::to_string(set.dim()));
  }
  const double h2 = cfg.bandwidth * cfg.bandwidth;
  const double d = static_cast<double>(set.dim());
  std::vector<double> expo(set.size());
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto x = set.position(i);
    double sq = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) sq += (query[k] - x[k]) * (query[k] - x[k]);
    expo[i] = -sq / (2.0 * h2);
    if (set.weight(i) > 0.0) peak = std::max(peak, expo[i]);
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) acc += set.weight(i) * std::exp(expo[i] - peak);
  return peak + std::log(acc) - 0.5 * d * std::log(2.0 * std::numbers::pi * h2);
}

TensorParticles TensorParticles::from_set(const ParticleSet& set, bool requires_grad) {
  const auto pos = set.positions();
  const auto w = set.weights();
  return {ad::Tensor({set.size(), set.dim()}, std::vector<double>(pos.begin(), pos.end()), requires_grad),
          ad::Tensor({set.size()}, std::vector<double>(w.begin(), w.end()), requires_grad)};
}

ParticleSet TensorParticles::to_set() const {
  return ParticleSet(dim(), positions.to_vector(), weights.to_vector());
}

ad::Tensor kde_log_density(const TensorParticles& set, const ad::Tensor& queries, const KdeConfig& cfg) {
  cfg.validate();
  const std::size_t n = set.size(), d = set.dim();
  if (queries.rank() != 2 || queries.dim(1) != d) {
    throw std::invalid_argument("kde_log_density: queries of shape " + ad::to_string(queries.shape()) +
                                " do not match particle dimension " + std::to_string(d));
  }
  const std::size_t m = queries.dim(0);
  const double h2 = cfg.bandwidth * cfg.bandwidth;
  auto diff = ad::reshape(queries, {m, 1, d}) - ad::reshape(set.positions, {1, n, d});
  auto sq = ad::sum(diff * diff, 2);
  auto lse = ad::weighted_logsumexp(sq * (-0.5 / h2), set.weights);
  return lse - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * h2);
}

namespace {
constexpr std::string_view kPsetMagic = "PSET1";
constexpr std::uint64_t kPsetHeaderBytes = 5 + 3 * 8;
}  // namespace

PsetWriter::PsetWriter(const std::filesystem::path& path, std::size_t n, std::size_t d)
    : path_(path), os_(io::open_out(path)), n_(n), d_(d) {
  io::write_bytes(os_, kPsetMagic);
  io::write_u64(os_, 0);
  io::write_u64(os_, n_);
  io::write_u64(os_, d_);
}

PsetWriter::~PsetWriter() {
  if (!finished_) {
    try {
      finish();
    } catch (...) {
    }
  }
}

void PsetWriter::append(const ParticleSet& set) {
  if (set.size() != n_ || set.dim() != d_) {
    throw std::invalid_argument(path_.string() + ": set of " + std::to_string(set.size()) + "x" +
                                std::to_string(set.dim()) + " does not match file layout " + std::to_string(n_) +
                                "x" + std::to_string(d_));
  }
  for (double v : set.positions()) io::write_f64(os_, v);
  for (double v : set.weights()) io::write_f64(os_, v);
  io::check_stream(os_, path_, "write failed");
  ++count_;
}

void PsetWriter::finish() {
  if (finished_) return;
  finished_ = true;
  os_.seekp(static_cast<std::streamoff>(kPsetMagic.size()));
  io::write_u64(os_, count_);
  os_.flush();
  io::check_stream(os_, path_, "write failed");
  os_.close();
}

void write_pset(const std::filesystem::path& path, std::span<const ParticleSet> sets) {
  if (sets.empty()) throw std::invalid_argument(path.string() + ": refusing to write an empty dataset");
  PsetWriter w(path, sets[0].size(), sets[0].dim());
  for (const auto& s : sets) w.append(s);
  w.finish();
}

namespace {

PsetHeader read_header(std::istream& is, const std::filesystem::path& path) {
  try {
    if (io::read_bytes(is, kPsetMagic.size()) != kPsetMagic) throw std::runtime_error("bad magic, not a PSET1 file");
    PsetHeader h;
    h.count = io::read_u64(is);
    h.n = io::read_u64(is);
    h.d = io::read_u64(is);
    if (h.n == 0 || h.d == 0) throw std::runtime_error("header declares empty particle sets");
    return h;
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

ParticleSet read_one(std::istream& is, const PsetHeader& h, const std::filesystem::path& path) {
  try {
    std::vector<double> pos(h.n * h.d), w(h.n);
    for (auto& v : pos) v = io::read_f64(is);
    for (auto& v : w) v = io::read_f64(is);
    return ParticleSet(h.d, std::move(pos), std::move(w));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace

PsetHeader read_pset_header(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  return read_header(is, path);
}

std::vector<ParticleSet> read_pset(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  const auto h = read_header(is, path);
  std::vector<ParticleSet> out;
  out.reserve(h.count);
  for (std::uint64_t k = 0; k < h.count; ++k) out.push_back(read_one(is, h, path));
  return out;
}

ParticleSet read_pset_entry(const std::filesystem::path& path, std::uint64_t index) {
  auto is = io::open_in(path);
  const auto h = read_header(is, path);
  if (index >= h.count) {
    throw std::out_of_range(path.string() + ": set index " + std::to_string(index) + " out of range [0, " +
                            std::to_string(h.count) + ")");
  }
  const std::uint64_t stride = (h.n * h.d + h.n) * 8;
  is.seekg(static_cast<std::streamoff>(kPsetHeaderBytes + index * stride));
  return read_one(is, h, path);
}

void write_csv(std::ostream& os, const ParticleSet& set) {
  for (std::size_t k = 0; k < set.dim(); ++k) os << "dim_" << k << ',';
  os << "weight\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (double v : set.position(i)) os << format_double(v) << ',';
    os << format_double(set.weight(i)) << '\n';
  }
}

}  // namespace rforge
