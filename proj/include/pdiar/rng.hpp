#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace pdiar {

using Rng = std::mt19937_64;

/// Derives an independent generator for a named sub-stream ("corpus",
/// "sampler", "init", ...) of a single top-level seed, so each component can be
/// reproduced in isolation.
inline Rng substream(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

}  // namespace pdiar
