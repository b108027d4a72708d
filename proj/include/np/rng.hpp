#pragma once

#include <string_view>
#include <vector>

#include "np/common.hpp"

namespace np {
namespace rng {

// Counter-based generator: every draw is a pure function of
// (seed, stream, counter). Draws are order-independent and splittable by
// stream/counter, so init and data generation are reproducible regardless of
// evaluation order or platform.

inline u64 mix(u64 z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline u64 bits(u64 seed, u64 stream, u64 counter) {
  u64 z = mix(seed ^ 0x6A09E667F3BCC909ull);
  z = mix(z ^ stream);
  z = mix(z ^ counter);
  return z;
}

// FNV-1a, used to derive a stream id from a parameter or purpose name.
inline u64 stream_of(std::string_view name) {
  u64 h = 0xCBF29CE484222325ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

inline float unit(u64 seed, u64 stream, u64 counter) {  // [0, 1)
  return static_cast<float>(bits(seed, stream, counter) >> 40) * 0x1.0p-24f;
}

inline float uniform(u64 seed, u64 stream, u64 counter, float lo, float hi) {
  return lo + (hi - lo) * unit(seed, stream, counter);
}

inline u64 below(u64 seed, u64 stream, u64 counter, u64 n) {  // [0, n)
  using u128 = unsigned __int128;
  return static_cast<u64>((u128(bits(seed, stream, counter)) * u128(n)) >> 64);
}

// Seeded Fisher-Yates.
template <typename T>
void shuffle(std::vector<T>& v, u64 seed, u64 stream) {
  for (i64 i = static_cast<i64>(v.size()) - 1; i > 0; --i) {
    u64 j = below(seed, stream, static_cast<u64>(i), static_cast<u64>(i) + 1);
    std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
  }
}

}  // namespace rng
}  // namespace np
