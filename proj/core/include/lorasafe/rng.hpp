// Copyright 2026 The lorasafe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

namespace lorasafe {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Counter-based stream: the value at a given counter depends only on
/// (seed, key, tag, counter), never on call order or thread.
class KeyedStream {
 public:
  KeyedStream(std::uint64_t seed, std::string_view key, std::string_view tag) noexcept
      : base_(mix64(mix64(seed) ^ mix64(fnv1a64(key)) ^ (mix64(fnv1a64(tag)) << 1))) {}

  std::uint64_t bits(std::uint64_t counter) const noexcept {
    return mix64(base_ ^ mix64(counter + 0x632BE59BD9B4E019ull));
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform(std::uint64_t counter) const noexcept {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t base_;
};

}  // namespace lorasafe
