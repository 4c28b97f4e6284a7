#pragma once

#include <cstdint>
#include <random>

namespace mfconv {

/// Seedable stream with platform-independent uniform and normal draws.
///
/// The standard distributions are implementation-defined, so conversions are
/// done here to keep datasets and masks bit-identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream keyed by (master seed, index).
  static Rng derive(std::uint64_t master, std::uint64_t index);
  static std::uint64_t mix(std::uint64_t master, std::uint64_t index);

  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mfconv
