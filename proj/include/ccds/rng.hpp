#pragma once

#include <cstdint>
#include <random>

#include "ccds/tensor.hpp"

namespace ccds {

// Seeded random stream. Identical seed gives an identical sequence on one platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Independent child stream; the same (seed, tag) pair always yields the same child.
  Rng split(std::uint64_t tag) const { return Rng(mix(seed_ ^ mix(tag + 0x9e3779b97f4a7c15ULL))); }

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double sd = 1.0) { return std::normal_distribution<double>(mean, sd)(engine_); }
  int poisson(double rate) { return rate > 0.0 ? std::poisson_distribution<int>(rate)(engine_) : 0; }

  Tensor uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = uniform(lo, hi);
    return t;
  }
  Tensor normal_tensor(Shape shape, double sd = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = normal(0.0, sd);
    return t;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace ccds
