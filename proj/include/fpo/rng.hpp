#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fpo {

// splitmix64 finalizer; used to derive child stream seeds.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stream labels for the seed-derivation hierarchy. Every consumer of
// randomness owns its own stream so that changing one knob (say N_mc)
// never perturbs draws elsewhere.
enum class Stream : uint64_t {
  kEnvReset = 1,
  kEnvDynamics = 2,
  kActionNoise = 3,   // flow prior a0, Gaussian sampling, churn
  kMcDraws = 4,       // (tau, eps) pairs
  kShuffle = 5,
  kEval = 6,
  kInit = 7,          // weight initialization
  kProbe = 8,
};

// Deterministic, splittable RNG. The engine is std::mt19937_64 (bit-exact
// across platforms); uniform/normal are generated with explicit arithmetic
// instead of std::*_distribution, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

  // Child stream addressed by (label, index). Derivation depends only on
  // this stream's seed, never on how much it has been consumed.
  Rng split(Stream label, uint64_t index = 0) const {
    uint64_t k = mix64(seed_ ^ mix64(static_cast<uint64_t>(label) * 0x9e3779b97f4a7c15ULL));
    return Rng(mix64(k ^ mix64(index + 0x706f6c69ULL)));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller with a cached second value.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Fisher-Yates index for shuffling: uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    // Rejection-free modulo is fine here; n is tiny relative to 2^64.
    return engine_() % n;
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fpo
