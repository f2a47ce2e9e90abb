#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace dhicm {

// Deterministic splittable RNG. All randomness in the project flows from one
// root seed; subsystems derive independent streams via split(label) so that
// adding a consumer never shifts another stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed)) {}

  // Derives a child stream from this stream's seed and a label.
  Rng split(std::string_view label) const;
  Rng split(std::string_view label, std::uint64_t index) const;

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller (no cached spare; two draws per call).
  double normal();

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Fisher-Yates shuffle of indices 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  explicit Rng(std::uint64_t state, bool /*raw*/) : state_(state) {}
  static std::uint64_t mix(std::uint64_t x);

  std::uint64_t state_;
  std::uint64_t seed_ = 0;
};

// FNV-1a over bytes; used for stream labels and corpus file hashes.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(std::string_view s);

}  // namespace dhicm
