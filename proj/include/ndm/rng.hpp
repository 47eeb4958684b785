#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ndm {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent substream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Seed for the substream identified by (seed, ids...). The mapping depends only
// on its arguments, so work split across threads draws the same numbers as a
// sequential run.
inline std::uint64_t substream_seed(std::uint64_t seed,
                                    std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = mix64(seed);
  for (auto id : ids) h = mix64(h ^ mix64(id + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng substream(std::uint64_t seed,
                     std::initializer_list<std::uint64_t> ids) {
  return Rng(substream_seed(seed, ids));
}

// Tags keep substreams of different purposes apart.
namespace stream {
inline constexpr std::uint64_t kLocal = 1;
inline constexpr std::uint64_t kGlobal = 2;
inline constexpr std::uint64_t kElbo = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kSplit = 5;
inline constexpr std::uint64_t kOrder = 6;
inline constexpr std::uint64_t kSim = 7;
}  // namespace stream

}  // namespace ndm
