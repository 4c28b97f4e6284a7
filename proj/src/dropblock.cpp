#include "mfconv/dropblock.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "mfconv/ops.hpp"

namespace mfconv::dropblock {
namespace {

struct Layout {
  std::size_t n = 0, c = 0, h = 1, w = 1;
  bool one_d = true;
  std::size_t plane() const { return h * w; }
};

Layout layout_of(const Shape& s) {
  if (s.size() == 3) return {s[0], s[1], 1, s[2], true};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], false};
  throw DimensionError("dropblock: expected [N,C,L] or [N,C,H,W], got " + shape_to_string(s));
}

// Draws one plane's keep-mask into `keep` (already filled with ones).
void sample_plane(Rng& rng, const Layout& l, std::size_t b, double gamma, double* keep) {
  const std::size_t bh = l.one_d ? 1 : b;
  const std::size_t seeds_h = l.h - bh + 1;
  const std::size_t seeds_w = l.w - b + 1;
  for (std::size_t sy = 0; sy < seeds_h; ++sy) {
    for (std::size_t sx = 0; sx < seeds_w; ++sx) {
      if (!rng.bernoulli(gamma)) continue;
      for (std::size_t dy = 0; dy < bh; ++dy) {
        double* row = keep + (sy + dy) * l.w + sx;
        std::fill(row, row + b, 0.0);
      }
    }
  }
}

void sample_element(Rng& rng, const Layout& l, const DropBlockSpec& spec, double gamma, double* keep) {
  const std::size_t plane = l.plane();
  std::fill(keep, keep + l.c * plane, 1.0);
  if (gamma <= 0.0) return;
  if (spec.shared_across_channels) {
    sample_plane(rng, l, spec.block_size, gamma, keep);
    for (std::size_t c = 1; c < l.c; ++c) std::copy_n(keep, plane, keep + c * plane);
  } else {
    for (std::size_t c = 0; c < l.c; ++c) sample_plane(rng, l, spec.block_size, gamma, keep + c * plane);
  }
}

std::size_t count_kept(const double* keep, std::size_t n) {
  return static_cast<std::size_t>(std::count(keep, keep + n, 1.0));
}

}  // namespace

void DropBlockSpec::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("dropblock: p must lie in [0,1], got " + std::to_string(p));
  if (block_size < 1) throw ContractError("dropblock: block size must be >= 1");
}

double compute_gamma(double p, std::size_t feature_extent, std::size_t block_size, std::size_t dims) {
  if (dims != 1 && dims != 2) throw ContractError("dropblock: feature dimensionality must be 1 or 2");
  const std::vector<std::size_t> extents(dims, feature_extent);
  return compute_gamma(p, extents, block_size);
}

double compute_gamma(double p, std::span<const std::size_t> extents, std::size_t block_size) {
  if (block_size < 1) throw ContractError("dropblock: block size must be >= 1");
  // Integer products keep the size ratio exact, so a block spanning the map gives p itself.
  std::uint64_t numerator = 1;
  std::uint64_t denominator = 1;
  for (auto f : extents) {
    if (block_size > f) {
      throw ContractError("dropblock: block size " + std::to_string(block_size) + " exceeds feature extent " +
                          std::to_string(f));
    }
    numerator *= f;
    denominator *= block_size * (f - block_size + 1);
  }
  return p * (static_cast<double>(numerator) / static_cast<double>(denominator));
}

double scheduled_p(const DropBlockSpec& spec, std::size_t epoch) {
  if (spec.scheduler.kind == Scheduler::Kind::none || spec.scheduler.ramp_epochs == 0) return spec.p;
  const double frac = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(spec.scheduler.ramp_epochs));
  return spec.p * frac;
}

MaskRealization sample_mask(Rng& rng, const Shape& feature_shape, const DropBlockSpec& spec, double p) {
  const auto l = layout_of(feature_shape);
  std::vector<Rng*> rngs(l.n, &rng);
  return sample_mask(rngs, feature_shape, spec, p);
}

MaskRealization sample_mask(std::span<Rng* const> rngs, const Shape& feature_shape, const DropBlockSpec& spec,
                            double p) {
  spec.validate();
  const auto l = layout_of(feature_shape);
  if (rngs.size() != l.n) {
    throw DimensionError("dropblock: " + std::to_string(rngs.size()) + " random streams for batch of " +
                         std::to_string(l.n));
  }
  std::vector<std::size_t> extents;
  if (!l.one_d) extents.push_back(l.h);
  extents.push_back(l.w);
  const double gamma = p > 0.0 ? compute_gamma(p, extents, spec.block_size) : 0.0;

  MaskRealization m;
  m.shape = feature_shape;
  const std::size_t per_sample = l.c * l.plane();
  m.keep.resize(l.n * per_sample);
  m.kept_per_sample.resize(l.n);
  for (std::size_t n = 0; n < l.n; ++n) {
    double* keep = m.keep.data() + n * per_sample;
    sample_element(*rngs[n], l, spec, gamma, keep);
    m.kept_per_sample[n] = count_kept(keep, per_sample);
    m.kept_count += m.kept_per_sample[n];
  }
  m.total_count = m.keep.size();
  return m;
}

Tensor apply(const Tensor& input, const MaskRealization& mask, bool rescale) {
  if (input.shape() != mask.shape) {
    throw DimensionError("dropblock: mask " + shape_to_string(mask.shape) + " does not match input " +
                         shape_to_string(input.shape()));
  }
  const std::size_t n = mask.kept_per_sample.size();
  const std::size_t per_sample = n ? mask.keep.size() / n : 0;
  std::vector<double> factors(mask.keep.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (mask.kept_per_sample[i] == 0) {
      throw DegenerateMaskError("dropblock: mask dropped every entry of batch element " + std::to_string(i));
    }
    const double s = rescale ? static_cast<double>(per_sample) / static_cast<double>(mask.kept_per_sample[i]) : 1.0;
    for (std::size_t j = 0; j < per_sample; ++j) factors[i * per_sample + j] = mask.keep[i * per_sample + j] * s;
  }
  return ops::mul_constant(input, factors);
}

Tensor drop_block(const Tensor& input, std::span<Rng* const> rngs, const DropBlockSpec& spec, double p) {
  if (p <= 0.0) return input;
  auto mask = sample_mask(rngs, input.shape(), spec, p);
  const auto l = layout_of(input.shape());
  const std::size_t per_sample = l.c * l.plane();
  for (std::size_t n = 0; n < l.n; ++n) {
    if (mask.kept_per_sample[n] != 0) continue;
    // One retry for this element from its own stream.
    std::vector<double> fresh(per_sample);
    std::vector<std::size_t> extents;
    if (!l.one_d) extents.push_back(l.h);
    extents.push_back(l.w);
    Layout single = l;
    single.n = 1;
    sample_element(*rngs[n], single, spec, compute_gamma(p, extents, spec.block_size), fresh.data());
    std::copy(fresh.begin(), fresh.end(), mask.keep.begin() + static_cast<std::ptrdiff_t>(n * per_sample));
    mask.kept_per_sample[n] = count_kept(fresh.data(), per_sample);
    mask.kept_count += mask.kept_per_sample[n];
  }
  return apply(input, mask, spec.rescale);
}

double empirical_drop_ratio(Rng& rng, double p, std::size_t feature_extent, std::size_t block_size,
                            std::size_t dims, std::size_t channels, std::size_t realizations) {
  DropBlockSpec spec{p, block_size, false, Scheduler::none(), true};
  Shape shape{1, channels, feature_extent};
  if (dims == 2) shape.push_back(feature_extent);
  double total = 0.0;
  for (std::size_t r = 0; r < realizations; ++r) total += sample_mask(rng, shape, spec, p).drop_ratio();
  return realizations ? total / static_cast<double>(realizations) : 0.0;
}

}  // namespace mfconv::dropblock
