#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace mfconv::testing {

/// Reference statistics of one entry across replicas, computed directly.
struct EntryStats {
  double mean, std, p5, median, p95;
};

inline double interpolated_quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline EntryStats reference_stats(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  long double s = 0;
  for (double x : xs) s += x;
  const double mean = static_cast<double>(s / xs.size());
  long double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(static_cast<double>(ss / xs.size())), interpolated_quantile(xs, 0.05),
          interpolated_quantile(xs, 0.5), interpolated_quantile(xs, 0.95)};
}

}  // namespace mfconv::testing
