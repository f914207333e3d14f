#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "taseg/tensor.hpp"

namespace taseg {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; derives independent sub-seeds from (seed, counter).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (counter + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// FNV-1a over the bytes of a string.
inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Per-parameter generator factory: every parameter draws from a stream keyed
/// by (model seed, parameter name), so initial values do not depend on which
/// other parameters exist or on construction order.
class Seeder {
 public:
  explicit Seeder(std::uint64_t seed = 0) : seed_(seed) {}

  Rng for_param(std::string_view name) const { return Rng(mix_seed(seed_, hash_string(name))); }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
};

inline Tensor normal_tensor(Shape shape, Scalar stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (Scalar& v : t.data()) v = static_cast<Scalar>(dist(rng));
  return t;
}

inline Tensor uniform_tensor(Shape shape, Scalar lo, Scalar hi, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Scalar& v : t.data()) v = static_cast<Scalar>(dist(rng));
  return t;
}

}  // namespace taseg
