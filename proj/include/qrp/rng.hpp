#pragma once

#include <cstdint>
#include <random>

namespace qrp {

/// splitmix64 finaliser.
inline std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of an independent stream (e.g. one bootstrap replicate) derived from
/// a base seed, so results do not depend on how work is split over threads.
inline std::uint64_t stream_seed(std::uint64_t base, std::uint64_t stream) noexcept {
  return mix64(mix64(base) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

using Engine64 = std::mt19937_64;

inline Engine64 make_stream(std::uint64_t base, std::uint64_t stream) {
  return Engine64(stream_seed(base, stream));
}

}  // namespace qrp
