#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "mfconv/tensor.hpp"

// Differentiable operations over tensors laid out as [N, C, L] (1D) or
// [N, C, H, W] (2D). All of them are pure: the same inputs give bit-identical
// outputs.
namespace mfconv::ops {

/// Stride and (possibly asymmetric) zero padding per spatial axis.
struct ConvOptions {
  std::vector<std::size_t> stride;
  std::vector<std::size_t> pad_before;
  std::vector<std::size_t> pad_after;

  static ConvOptions symmetric(std::size_t spatial_dims, std::size_t stride, std::size_t pad);
  /// Stride 1 with total padding K-1 per axis; even kernels pad one extra
  /// pixel after, so the output keeps the input extent.
  static ConvOptions same(std::span<const std::size_t> kernel_extents);
};

/// Cross-correlation. `bias` may be undefined.
Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvOptions& options);
Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
            std::size_t pad);

Tensor max_pool(const Tensor& input, std::size_t window);
Tensor upsample_nearest(const Tensor& input, std::size_t scale);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormState init(std::size_t channels, double momentum = 0.1, double epsilon = 1e-5);
};

enum class Mode { train, eval };

/// Per-channel normalization. Train mode uses batch statistics and updates
/// the running estimates in `state`; eval mode reads them.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  Mode mode);

enum class Activation { identity, relu, tanh };

Tensor activation(const Tensor& input, Activation kind);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::tanh); }

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// x * s where s is a one-element tensor (a learnable scalar, typically).
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor scale(const Tensor& x, double factor);
/// Elementwise product with a constant buffer of the same size as x.
Tensor mul_constant(const Tensor& x, std::span<const double> factors);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);

/// sum_i weights_i * (pred_i - target_i)^2 as a one-element tensor. Only
/// `pred` receives gradient.
Tensor weighted_squared_error(const Tensor& pred, std::span<const double> target,
                              std::span<const double> weights);

}  // namespace mfconv::ops
