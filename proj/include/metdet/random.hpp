#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <string_view>

namespace metdet {

/// SplitMix64 generator. Small state, so a fresh stream per (seed, key...) is
/// cheap; that is how draws stay reproducible regardless of thread layout.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

using Rng = SplitMix64;

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 33;
  x *= 0xFF51AFD7ED558CCDULL;
  x ^= x >> 33;
  x *= 0xC4CEB9FE1A85EC53ULL;
  x ^= x >> 33;
  return x;
}

/// FNV-1a over bytes, used to fold string keys into seeds.
inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Stable child seed for (seed, k0, k1, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(seed ^ 0x6A09E667F3BCC909ULL);
  for (std::uint64_t k : keys) h = mix64(h ^ (k + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2)));
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t h = derive_seed(seed, {hash_string(tag)});
  return keys.size() == 0 ? h : derive_seed(h, keys);
}

}  // namespace metdet
