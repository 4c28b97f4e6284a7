#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mfconv/ops.hpp"
#include "mfconv/rng.hpp"
#include "mfconv/tensor.hpp"

namespace mfconv::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic gradients of a scalar loss against central differences.
/// At most `max_per_tensor` entries of each input are probed, chosen evenly.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                  std::size_t max_per_tensor = 64, double h = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  loss().backward();
  GradCheckResult out;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const std::size_t n = t.numel();
    const std::size_t step = std::max<std::size_t>(1, n / max_per_tensor);
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = t.data()[i];
      t.data()[i] = saved + h;
      const double up = loss().item();
      t.data()[i] = saved - h;
      const double down = loss().item();
      t.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      // Absolute floor keeps near-zero derivatives from dominating.
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-3});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(numeric - analytic[i]) / denom);
      ++out.checked;
    }
  }
  return out;
}

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// sum(x * w) for a fixed random w, so every output entry gets a distinct weight.
inline Tensor project(const Tensor& x, const std::vector<double>& w) { return ops::sum(ops::mul_constant(x, w)); }

inline std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return w;
}

}  // namespace mfconv::testing
