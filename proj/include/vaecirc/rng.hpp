#pragma once

// Deterministic xoshiro256++ generator. The training, intervention and
// statistics paths only require seed-determinism, so the stream is pinned to
// one documented algorithm instead of the implementation-defined std
// distributions.

#include <array>
#include <cstdint>
#include <vector>

namespace vaecirc {

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();

  // Uniform on [0, 1), 53-bit mantissa.
  double uniform();
  // Standard normal via Box-Muller (pairs cached).
  double normal();
  // Uniform integer in [0, n), unbiased via rejection sampling.
  std::size_t uniform_index(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::array<std::uint64_t, 4> state_{};
  std::uint64_t seed_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace vaecirc
