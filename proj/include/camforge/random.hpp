#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace camforge {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to turn structured keys into independent seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// FNV-1a over the bytes of `s`.
constexpr std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Deterministic child seed from a root seed and a path of keys.
/// Streams derived from distinct key paths are independent of evaluation order,
/// so parallel workers can reproduce a sequential run exactly.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t k : keys) h = mix64(h ^ mix64(k));
  return h;
}

inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  return Rng(derive_seed(seed, keys));
}

}  // namespace camforge
