#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace surf2ct {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Named sub-stream of a master seed, optionally keyed by integer indices
// (step, sample, patch origin ...). Streams never depend on call order.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name,
                                 std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t h = splitmix64(master ^ hash_name(name));
  for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t master, std::string_view name,
                    std::initializer_list<std::uint64_t> keys = {}) {
  return Rng(derive_seed(master, name, keys));
}

}  // namespace surf2ct
