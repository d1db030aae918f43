#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace rforge {

// Counter-based random stream: draw k of a stream is a pure function of
// (seed, k), and child streams are derived from (seed, key) so work split
// across threads draws the same numbers regardless of scheduling.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  double normal();
  double normal(double mean, double stddev);
  // Uniform on {0, ..., n - 1}.
  std::size_t uniform_index(std::size_t n);

  RngStream split(std::uint64_t key) const;
  RngStream split(std::uint64_t key_a, std::uint64_t key_b) const { return split(key_a).split(key_b); }

  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace rforge
