#pragma once

// Seeded randomness with fully specified output. The standard distributions
// are implementation-defined, so uniform and Gaussian draws are derived from
// the raw mt19937_64 stream here to keep runs byte-identical across toolchains.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace conpet {

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash = kFnvOffset) noexcept {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= kFnvPrime;
  }
  return hash;
}

inline std::uint64_t fnv1a64_bytes(const void* data, std::size_t size,
                                   std::uint64_t hash = kFnvOffset) noexcept {
  return fnv1a64(std::string_view(static_cast<const char*>(data), size), hash);
}

/// Child seed = FNV-1a(master as 8 little-endian bytes ++ purpose). Adding a
/// new purpose string never shifts the stream of an existing one.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose) noexcept {
  std::uint64_t hash = kFnvOffset;
  for (int i = 0; i < 8; ++i) {
    hash ^= static_cast<unsigned char>((master >> (8 * i)) & 0xFFU);
    hash *= kFnvPrime;
  }
  return fnv1a64(purpose, hash);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::size_t index(std::size_t n) {
    if (n <= 1) return 0;
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t draw = engine_();
    while (draw >= limit) draw = engine_();
    return static_cast<std::size_t>(draw % bound);
  }

  /// Standard normal via Box-Muller; the second variate is kept for the next call.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace conpet
