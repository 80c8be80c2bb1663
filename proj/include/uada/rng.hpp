#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

// Deterministic random streams. A stream is addressed by (seed, name, index);
// distinct addresses give statistically independent sequences, and the same
// address always replays the same sequence on any platform. Variate
// generation is hand-rolled (std::uniform_real_distribution and friends are
// implementation-defined and would break cross-platform reproducibility).

namespace uada {

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a64(std::string_view s);

class RngStream {
 public:
  RngStream(uint64_t seed, std::string_view name, uint64_t index = 0);

  uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi); requires lo <= hi.
  double uniform(double lo, double hi);
  // Uniform integer on [lo, hi] inclusive via rejection sampling.
  int64_t uniform_int(int64_t lo, int64_t hi);
  // Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double normal();
  double normal(double mean, double stddev);

  // Fisher-Yates with uniform_int; deterministic across platforms.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i)));
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace uada
