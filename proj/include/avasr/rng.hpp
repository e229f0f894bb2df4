#pragma once

#include <cstdint>
#include <random>

namespace avasr {

// Seedable generator with hand-rolled distributions so that streams are
// reproducible across standard-library implementations. One instance per
// training run; epoch-level streams are derived, never shared.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  static Rng for_epoch(uint64_t seed, uint64_t epoch) {
    // splitmix-style mix so (seed, epoch) pairs land far apart
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (epoch + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return Rng(z ^ (z >> 31));
  }

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform01() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller with a cached spare
  double normal(double mean, double stddev);

  // uniform integer in [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace avasr
