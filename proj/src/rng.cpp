#include "uada/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace uada {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

RngStream::RngStream(uint64_t seed, std::string_view name, uint64_t index) {
  uint64_t s = splitmix64(seed ^ fnv1a64(name));
  s = splitmix64(s ^ index);
  eng_.seed(s);
}

uint64_t RngStream::next_u64() { return eng_(); }

double RngStream::uniform() {
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("uniform: lo > hi");
  return lo + (hi - lo) * uniform();
}

int64_t RngStream::uniform_int(int64_t lo, int64_t hi) {
  if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<int64_t>(eng_());  // full 64-bit range
  const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t r;
  do {
    r = eng_();
  } while (r >= limit);
  return lo + static_cast<int64_t>(r % span);
}

double RngStream::normal() {
  // Box-Muller; u1 is shifted away from zero so log is finite.
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1 + 0x1.0p-53));
  return r * std::cos(2.0 * M_PI * u2);
}

double RngStream::normal(double mean, double stddev) {
  return mean + stddev * normal();
}

}  // namespace uada
