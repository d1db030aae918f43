#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "rforge/autodiff/ops.hpp"
#include "rforge/resamplers.hpp"
#include "support/gradcheck.hpp"

using namespace rforge;
using ad::Tensor;

namespace {

ParticleSet indexed_set(std::vector<double> weights) {
  std::vector<double> pos(weights.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<double>(i);
  return ParticleSet(1, pos, weights);
}

// Recovers ancestor indices from a resampled indexed_set (position i = index i).
std::vector<std::size_t> ancestors_of(const ParticleSet& out) {
  std::vector<std::size_t> anc;
  for (std::size_t i = 0; i < out.size(); ++i) anc.push_back(static_cast<std::size_t>(out.position(i)[0]));
  return anc;
}

std::vector<double> random_weights(RngStream& rng, std::size_t n) {
  std::vector<double> raw(n);
  // Cubing spreads the weights so some exceed several multiples of 1/n.
  for (auto& w : raw) w = std::pow(rng.uniform(), 3.0);
  return normalize_weights(raw);
}

}  // namespace

TEST_CASE("parse resampler names") {
  CHECK(ResamplerKind::parse("multinomial").tag == ResamplerKind::Tag::multinomial);
  CHECK(ResamplerKind::parse("soft", 0.3).alpha == 0.3);
  CHECK(ResamplerKind::parse("none").name() == "none");
  CHECK_THROWS_AS(ResamplerKind::parse("stratified"), std::invalid_argument);
  CHECK_THROWS_AS(ResamplerKind::parse("soft", 0.0), std::invalid_argument);
  CHECK_THROWS_AS(ResamplerKind::parse("soft", 1.5), std::invalid_argument);
  CHECK_NOTHROW(ResamplerKind::parse("soft", 1.0));
}

TEST_CASE("multinomial with one-hot weights copies the heavy particle") {
  RngStream rng(1);
  auto out = multinomial_resample(indexed_set({0, 0, 1, 0}), rng);
  CHECK(ancestors_of(out) == std::vector<std::size_t>{2, 2, 2, 2});
  for (auto w : out.weights()) CHECK(w == 0.25);
}

TEST_CASE("multinomial frequencies stay within 4 sigma of the binomial expectation") {
  const std::vector<double> w{0.1, 0.2, 0.3, 0.15, 0.25};
  RngStream rng(2);
  const std::size_t draws = 100000;
  auto anc = multinomial_ancestors(w, draws, rng);
  std::vector<double> counts(w.size(), 0.0);
  for (auto a : anc) counts[a] += 1.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double mean = draws * w[i];
    const double sd = std::sqrt(draws * w[i] * (1 - w[i]));
    CHECK(std::abs(counts[i] - mean) < 4 * sd);
  }
}

TEST_CASE("systematic on uniform weights picks every particle once") {
  for (double offset : {0.0, 0.01, 0.099, 0.05}) {
    auto anc = systematic_ancestors(std::vector<double>(10, 0.1), offset);
    std::sort(anc.begin(), anc.end());
    for (std::size_t i = 0; i < 10; ++i) CHECK(anc[i] == i);
  }
  RngStream rng(4);
  auto set = indexed_set(std::vector<double>(6, 1.0 / 6.0));
  auto anc = ancestors_of(resample(ResamplerKind::parse("systematic"), set, rng));
  std::sort(anc.begin(), anc.end());
  CHECK(anc == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("systematic hand trace with weights 0.75 and 0.25") {
  // Grid points 0.1 and 0.6 both fall below the first cumulative value 0.75.
  CHECK(systematic_ancestors(std::vector<double>{0.75, 0.25}, 0.1) == std::vector<std::size_t>{0, 0});
  CHECK(systematic_ancestors(std::vector<double>{0.75, 0.25}, 0.3) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("systematic never selects zero-weight particles") {
  CHECK(systematic_ancestors(std::vector<double>{0.5, 0.5, 0.0}, 0.49) == std::vector<std::size_t>{0, 1, 1});
  CHECK(systematic_ancestors(std::vector<double>{0.0, 1.0, 0.0}, 0.0) == std::vector<std::size_t>{1, 1, 1});
}

TEST_CASE("systematic samples a particle with weight above c/n at least c times") {
  RngStream rng(7);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(30);
    auto w = random_weights(rng, n);
    const double offset = rng.uniform() / static_cast<double>(n);
    auto anc = systematic_ancestors(w, offset);
    std::vector<std::size_t> counts(n, 0);
    for (auto a : anc) ++counts[a];
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(std::floor(w[i] * static_cast<double>(n)));
      CHECK(counts[i] >= c);
    }
  }
}

TEST_CASE("systematic is deterministic per seed and keeps exact copies") {
  RngStream rng(9);
  auto set = indexed_set(random_weights(rng, 16));
  RngStream a(42), b(42);
  auto x = systematic_resample(set, a);
  auto y = systematic_resample(set, b);
  CHECK(x == y);
  for (auto v : x.positions()) CHECK(v == std::floor(v));
  for (auto w : x.weights()) CHECK(w == 1.0 / 16.0);
}

TEST_CASE("soft resampling with alpha 1 gives uniform weights") {
  RngStream rng(10);
  auto set = indexed_set(random_weights(rng, 8));
  auto out = soft_resample(set, 1.0, rng);
  for (auto w : out.weights()) CHECK(w == doctest::Approx(1.0 / 8.0).epsilon(1e-14));
}

TEST_CASE("soft resampling with tiny alpha weights ancestors by their input weight") {
  RngStream rng(12);
  const std::vector<double> w{0.05, 0.15, 0.3, 0.5};
  auto set = indexed_set(w);
  auto out = soft_resample(set, 1e-9, rng);
  auto anc = ancestors_of(out);
  double total = 0.0;
  for (auto a : anc) total += w[a];
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out.weight(i) == doctest::Approx(w[anc[i]] / total).epsilon(1e-6));
  }
}

TEST_CASE("soft resampling weight gradient matches finite differences") {
  RngStream data(13);
  auto set = indexed_set(random_weights(data, 6));
  auto tp = TensorParticles::from_set(set);
  // Fixed ancestors: the same seed is replayed for every evaluation, and the
  // small probes used here never move a draw across a cumulative boundary.
  auto res = testing::gradcheck(
      [&](const std::vector<Tensor>& in) {
        RngStream rng(99);
        auto out = soft_resample(TensorParticles{in[0], in[1]}, 0.5, rng);
        return ad::sum(out.weights * Tensor::vector({1.0, -2.0, 0.5, 3.0, -1.0, 2.0})) +
               ad::sum(out.positions * out.positions);
      },
      {tp.positions, tp.weights}, 1e-7);
  CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
}

TEST_CASE("soft ancestor frequencies follow the mixture proposal") {
  const std::vector<double> w{0.02, 0.08, 0.4, 0.5};
  for (double alpha : {0.25, 0.5, 1.0}) {
    RngStream rng(static_cast<std::uint64_t>(alpha * 1000));
    auto set = indexed_set(w);
    std::vector<double> counts(w.size(), 0.0);
    const int trials = 25000;
    for (int t = 0; t < trials; ++t) {
      for (auto a : ancestors_of(soft_resample(set, alpha, rng))) counts[a] += 1.0;
    }
    const double draws = trials * 4.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double p = alpha * w[i] + (1 - alpha) / 4.0;
      CHECK(std::abs(counts[i] - draws * p) < 4 * std::sqrt(draws * p * (1 - p)));
    }
  }
}

TEST_CASE("dispatch: none is identity, multinomial deterministic, transformer needs a model") {
  RngStream data(14);
  auto set = indexed_set(random_weights(data, 10));
  RngStream r1(3), r2(3);
  CHECK(resample(ResamplerKind::parse("none"), set, r1) == set);
  auto m = ResamplerKind::parse("multinomial");
  RngStream a(5), b(5);
  CHECK(resample(m, set, a) == resample(m, set, b));
  CHECK_THROWS_WITH_AS(resample(ResamplerKind::parse("transformer"), set, r2),
                       doctest::Contains("without loaded parameters"), std::invalid_argument);
}

TEST_CASE("graph resamplers preserve shape and route gradients to ancestors") {
  RngStream data(15);
  auto set = indexed_set(random_weights(data, 5));
  for (auto name : {"multinomial", "systematic", "soft"}) {
    auto tp = TensorParticles::from_set(set, true);
    RngStream rng(1);
    auto out = resample(ResamplerKind::parse(name), tp, rng);
    CHECK(out.size() == 5);
    CHECK(out.dim() == 1);
    ad::backward(ad::sum(out.positions));
    // Each input position receives one unit of gradient per copy.
    auto g = tp.positions.grad();
    std::vector<double> copies(5, 0.0);
    for (auto v : out.positions.data()) copies[static_cast<std::size_t>(v)] += 1.0;
    CHECK(g == copies);
  }
}
