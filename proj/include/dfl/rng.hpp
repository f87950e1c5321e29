#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace dfl {

// Deterministic RNG on top of mt19937_64. Real/integer draws are hand-rolled
// so streams do not depend on libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), n > 0. Lemire multiply-shift; bias is negligible at these sizes.
  int64_t uniform_int(int64_t n) {
    const auto wide = static_cast<unsigned __int128>(next_u64()) *
                      static_cast<unsigned __int128>(n);
    return static_cast<int64_t>(wide >> 64);
  }

  // Standard normal via Box-Muller, spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // splitmix64 finalizer over a+b; used to derive independent seed streams.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Named sub-stream tags so every consumer of a run seed draws from its own
// deterministic stream.
namespace seed_stream {
inline constexpr uint64_t kModelInit = 0x11;
inline constexpr uint64_t kTeacherInit = 0x22;
inline constexpr uint64_t kReset = 0x33;
inline constexpr uint64_t kShuffle = 0x44;
inline constexpr uint64_t kAugment = 0x55;
inline constexpr uint64_t kData = 0x66;
}  // namespace seed_stream

}  // namespace dfl
