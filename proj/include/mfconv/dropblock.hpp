#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "mfconv/rng.hpp"
#include "mfconv/tensor.hpp"

namespace mfconv::dropblock {

struct Scheduler {
  enum class Kind { none, linear };
  Kind kind = Kind::none;
  std::size_t ramp_epochs = 0;

  static Scheduler none() { return {}; }
  static Scheduler linear(std::size_t ramp) { return {Kind::linear, ramp}; }
};

struct DropBlockSpec {
  double p = 0.0;
  std::size_t block_size = 1;
  bool shared_across_channels = false;
  Scheduler scheduler;
  /// Scale survivors by total/kept so the expected activation is unchanged.
  bool rescale = true;

  void validate() const;
};

/// Keep-mask over a whole [N, C, spatial...] feature tensor. Entries are 0 or
/// 1; counts are tracked per batch element because each element is scaled by
/// its own total/kept ratio.
struct MaskRealization {
  Shape shape;
  std::vector<double> keep;
  std::vector<std::size_t> kept_per_sample;
  std::size_t kept_count = 0;
  std::size_t total_count = 0;

  double drop_ratio() const {
    return total_count == 0 ? 0.0 : 1.0 - static_cast<double>(kept_count) / static_cast<double>(total_count);
  }
};

class DegenerateMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bernoulli seed rate that makes the expected dropped fraction roughly p:
/// p F^d / (b^d (F - b + 1)^d).
double compute_gamma(double p, std::size_t feature_extent, std::size_t block_size, std::size_t dims);
/// Same for a non-square map: p prod(F_i) / prod(b (F_i - b + 1)).
double compute_gamma(double p, std::span<const std::size_t> extents, std::size_t block_size);

/// Drop probability in effect at `epoch` under the spec's scheduler.
double scheduled_p(const DropBlockSpec& spec, std::size_t epoch);

/// Seeds are drawn only where a full block fits (no partial blocks at the
/// edges); each seed zeroes the b^d block anchored at it.
MaskRealization sample_mask(Rng& rng, const Shape& feature_shape, const DropBlockSpec& spec, double p);
/// Per-batch-element streams: element n draws from *rngs[n].
MaskRealization sample_mask(std::span<Rng* const> rngs, const Shape& feature_shape, const DropBlockSpec& spec,
                            double p);

/// Zeroes dropped entries and rescales survivors per batch element. Throws
/// DegenerateMaskError when some element kept nothing.
Tensor apply(const Tensor& input, const MaskRealization& mask, bool rescale = true);

/// sample_mask + apply, resampling a degenerate element once before failing.
Tensor drop_block(const Tensor& input, std::span<Rng* const> rngs, const DropBlockSpec& spec, double p);

/// Mean dropped fraction over `realizations` masks of a [1, channels, F^d]
/// map with independent channel masks.
double empirical_drop_ratio(Rng& rng, double p, std::size_t feature_extent, std::size_t block_size,
                            std::size_t dims, std::size_t channels, std::size_t realizations);

}  // namespace mfconv::dropblock
