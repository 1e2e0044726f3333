#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace prefrank::nk {

/// SplitMix64 finaliser; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives a stream key from a seed and any number of stream ids.
template <typename... Ids>
constexpr std::uint64_t stream_key(std::uint64_t seed, Ids... ids) {
  std::uint64_t k = mix64(seed);
  ((k = mix64(k ^ mix64(static_cast<std::uint64_t>(ids) + 0x632be59bd9b4e019ULL))), ...);
  return k;
}

/// Counter-based generator: output i of stream (seed, ids...) is a pure
/// function of the key and i, so streams need no shared state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed)) {}
  template <typename... Ids>
  Rng(std::uint64_t seed, Ids... ids) : key_(stream_key(seed, ids...)) {}

  std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++)); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  std::uint64_t counter() const { return counter_; }
  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace prefrank::nk
