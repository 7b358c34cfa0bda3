// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace awaker {

/// Independent streams split off one experiment seed.
enum class RngStream : std::uint64_t {
  init = 1,
  noise = 2,
  data = 3,
  pretrain = 4,
  eval = 5,
};

/// Seeded 64-bit Mersenne twister. Streams derived from the same seed are
/// decorrelated through seed_seq mixing of (seed, stream, salt).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  static Rng split(std::uint64_t seed, RngStream stream, std::uint64_t salt = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(salt),
                      static_cast<std::uint32_t>(salt >> 32)};
    Rng r;
    r.engine_.seed(seq);
    return r;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  std::mt19937_64& engine() { return engine_; }

  std::string state() const;
  void restore(std::string_view state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace awaker
