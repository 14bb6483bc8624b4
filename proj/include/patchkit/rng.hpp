#pragma once

#include <cstdint>
#include <string_view>

namespace patchkit {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t hash = 0xCBF29CE484222325ull;
  for (char c : text) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001B3ull;
  }
  return hash;
}

// Stateless generator: the draw for element `index` of tensor `name` depends
// only on (seed, name, index), so any partition of the work across threads
// produces the same stream.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::string_view name) noexcept
      : key_(splitmix64(seed ^ splitmix64(fnv1a64(name)))) {}

  constexpr std::uint64_t bits(std::uint64_t index) const noexcept {
    return splitmix64(key_ ^ splitmix64(index + 0x632BE59BD9B4E019ull));
  }

  // Uniform in [0, 1) with 53 random bits.
  constexpr double uniform(std::uint64_t index) const noexcept {
    return static_cast<double>(bits(index) >> 11) * 0x1p-53;
  }

 private:
  std::uint64_t key_;
};

}  // namespace patchkit
