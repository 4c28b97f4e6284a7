#include "mfconv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace mfconv::ops {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// 1D tensors are handled as 2D with a unit height.
struct Geometry {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  bool one_d = false;

  std::size_t plane() const { return h * w; }
  Shape shape() const { return one_d ? Shape{n, c, w} : Shape{n, c, h, w}; }
};

Geometry geometry_of(const Tensor& t, const char* op) {
  const auto& s = t.shape();
  if (s.size() == 3) return {s[0], s[1], 1, s[2], true};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], false};
  throw DimensionError(std::string(op) + ": expected [N,C,L] or [N,C,H,W], got " + shape_to_string(s));
}

const char* spatial_axis_name(bool one_d, int axis) {
  if (one_d) return "length (axis 2)";
  return axis == 0 ? "height (axis 2)" : "width (axis 3)";
}

struct ConvGeometry {
  Geometry in, out;
  std::size_t kh = 1, kw = 1;
  std::size_t sh = 1, sw = 1;
  std::size_t ph = 0, pw = 0;  // padding before
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, const ConvOptions& opt) {
  ConvGeometry g;
  g.in = geometry_of(input, "conv");
  const auto& ks = kernel.shape();
  if (ks.size() != input.dim()) {
    throw DimensionError("conv: kernel rank " + std::to_string(ks.size()) + " does not match input rank " +
                         std::to_string(input.dim()));
  }
  if (ks[1] != g.in.c) {
    throw DimensionError("conv: input channel axis (1) has " + std::to_string(g.in.c) +
                         " channels but kernel expects " + std::to_string(ks[1]));
  }
  const std::size_t spatial = g.in.one_d ? 1 : 2;
  if (opt.stride.size() != spatial || opt.pad_before.size() != spatial || opt.pad_after.size() != spatial) {
    throw DimensionError("conv: options must list " + std::to_string(spatial) + " spatial axes");
  }
  std::size_t ph_after = 0, pw_after = 0;
  if (g.in.one_d) {
    g.kw = ks[2];
    g.sw = opt.stride[0];
    g.pw = opt.pad_before[0];
    pw_after = opt.pad_after[0];
  } else {
    g.kh = ks[2];
    g.kw = ks[3];
    g.sh = opt.stride[0];
    g.sw = opt.stride[1];
    g.ph = opt.pad_before[0];
    g.pw = opt.pad_before[1];
    ph_after = opt.pad_after[0];
    pw_after = opt.pad_after[1];
  }
  if (g.sh == 0 || g.sw == 0) throw ContractError("conv: stride must be positive");
  auto out_extent = [&](std::size_t extent, std::size_t k, std::size_t before, std::size_t after,
                        std::size_t stride, int axis) {
    const auto padded = extent + before + after;
    if (padded < k) {
      throw DimensionError(std::string("conv: ") + spatial_axis_name(g.in.one_d, axis) + " extent " +
                           std::to_string(extent) + " with padding is smaller than kernel " + std::to_string(k));
    }
    return (padded - k) / stride + 1;
  };
  g.out = g.in;
  g.out.c = ks[0];
  g.out.h = g.in.one_d ? 1 : out_extent(g.in.h, g.kh, g.ph, ph_after, g.sh, 0);
  g.out.w = out_extent(g.in.w, g.kw, g.pw, pw_after, g.sw, g.in.one_d ? 0 : 1);
  return g;
}

// Output columns ox in [lo, hi) read inside the image for kernel offset kj.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj) {
  const auto off = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pw);
  const auto sw = static_cast<std::ptrdiff_t>(g.sw);
  const auto w = static_cast<std::ptrdiff_t>(g.in.w);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + sw - 1) / sw;
  std::ptrdiff_t hi = w - off <= 0 ? 0 : (w - off + sw - 1) / sw;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(g.out.w));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Writes one image's patches into cols, a row-major [C*kh*kw, ld] matrix;
// this image occupies columns [0, Ho*Wo) of each row.
void im2col(const double* image, const ConvGeometry& g, double* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.in.c; ++c) {
    const double* chan = image + c * g.in.plane();
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto [lo, hi] = valid_columns(g, kj);
        const auto off = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pw);
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oy = 0; oy < g.out.h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.sh + ki) - static_cast<std::ptrdiff_t>(g.ph);
          double* dst = row + oy * g.out.w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.h)) {
            std::fill(dst, dst + g.out.w, 0.0);
            continue;
          }
          const double* src = chan + static_cast<std::size_t>(iy) * g.in.w;
          std::fill(dst, dst + lo, 0.0);
          if (g.sw == 1) {
            std::copy(src + (static_cast<std::ptrdiff_t>(lo) + off), src + (static_cast<std::ptrdiff_t>(hi) + off), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[static_cast<std::ptrdiff_t>(ox * g.sw) + off];
          }
          std::fill(dst + hi, dst + g.out.w, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* image, std::size_t ld) {
  for (std::size_t c = 0; c < g.in.c; ++c) {
    double* chan = image + c * g.in.plane();
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto [lo, hi] = valid_columns(g, kj);
        const auto off = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pw);
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oy = 0; oy < g.out.h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.sh + ki) - static_cast<std::ptrdiff_t>(g.ph);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.h)) continue;
          double* dst = chan + static_cast<std::size_t>(iy) * g.in.w;
          const double* src = row + oy * g.out.w;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox * g.sw) + off] += src[ox];
        }
      }
    }
  }
}

// Batch elements per GEMM so the column buffer stays near 4M doubles.
std::size_t chunk_size(std::size_t patch, std::size_t out_plane, std::size_t n) {
  const std::size_t budget = std::size_t{1} << 22;
  return std::clamp<std::size_t>(budget / std::max<std::size_t>(1, patch * out_plane), 1, std::max<std::size_t>(n, 1));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    std::string detail;
    if (sa.size() != sb.size()) {
      detail = "rank " + std::to_string(sa.size()) + " vs " + std::to_string(sb.size());
    } else {
      for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i] != sb[i]) {
          detail = "axis " + std::to_string(i) + " has " + std::to_string(sa[i]) + " vs " + std::to_string(sb[i]);
          break;
        }
      }
    }
    throw DimensionError(std::string(op) + ": shapes " + shape_to_string(sa) + " and " + shape_to_string(sb) +
                         " differ (" + detail + ")");
  }
}

void accumulate(detail::Node& parent, const std::vector<double>& g, double factor = 1.0) {
  if (!parent.requires_grad) return;
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += factor * g[i];
}

}  // namespace

ConvOptions ConvOptions::symmetric(std::size_t spatial_dims, std::size_t stride, std::size_t pad) {
  return {std::vector<std::size_t>(spatial_dims, stride), std::vector<std::size_t>(spatial_dims, pad),
          std::vector<std::size_t>(spatial_dims, pad)};
}

ConvOptions ConvOptions::same(std::span<const std::size_t> kernel_extents) {
  ConvOptions o;
  for (auto k : kernel_extents) {
    if (k == 0) throw ContractError("conv: kernel extent must be positive");
    o.stride.push_back(1);
    o.pad_before.push_back((k - 1) / 2);
    o.pad_after.push_back(k - 1 - (k - 1) / 2);
  }
  return o;
}

Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t pad) {
  return conv(input, kernel, bias, ConvOptions::symmetric(input.dim() - 2, stride, pad));
}

Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvOptions& options) {
  const auto g = conv_geometry(input, kernel, options);
  if (bias.defined() && bias.numel() != g.out.c) {
    throw DimensionError("conv: bias has " + std::to_string(bias.numel()) + " entries for " +
                         std::to_string(g.out.c) + " output channels");
  }
  const std::size_t patch = g.in.c * g.kh * g.kw;
  const std::size_t out_plane = g.out.plane();
  // The forward product runs one sample at a time: the GEMM kernel may round
  // a column differently depending on where it sits, and a sample's output
  // must not depend on what else shares its batch.
  std::vector<double> out(g.out.n * g.out.c * out_plane);
  std::vector<double> cols(patch * out_plane);
  RowMatrix result(g.out.c, out_plane);
  const ConstMatrixMap weights(kernel.data().data(), g.out.c, patch);
  for (std::size_t n0 = 0; n0 < g.in.n; ++n0) {
    const std::size_t nb = 1;
    const std::size_t ld = nb * out_plane;
    for (std::size_t k = 0; k < nb; ++k) {
      im2col(input.data().data() + (n0 + k) * g.in.c * g.in.plane(), g, cols.data() + k * out_plane, ld);
    }
    auto res = result.leftCols(static_cast<Eigen::Index>(ld));
    res.noalias() = weights * ConstMatrixMap(cols.data(), patch, ld);
    for (std::size_t k = 0; k < nb; ++k) {
      double* dst = out.data() + (n0 + k) * g.out.c * out_plane;
      for (std::size_t co = 0; co < g.out.c; ++co) {
        const double b = bias.defined() ? bias.data()[co] : 0.0;
        const double* src = result.data() + co * result.cols() + k * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) dst[co * out_plane + i] = src[i] + b;
      }
    }
  }
  return Tensor::make_result(
      g.out.shape(), std::move(out), {input, kernel, bias}, [g, patch, out_plane](detail::Node& self) {
        const std::size_t chunk = chunk_size(patch, out_plane, g.in.n);
        auto& in = *self.parents[0];
        auto& ker = *self.parents[1];
        detail::Node* b = self.parents[2].get();
        std::vector<double> cols(patch * out_plane * chunk);
        RowMatrix dout(g.out.c, out_plane * chunk);
        const ConstMatrixMap weights(ker.data.data(), g.out.c, patch);
        for (std::size_t n0 = 0; n0 < g.in.n; n0 += chunk) {
          const std::size_t nb = std::min(chunk, g.in.n - n0);
          const std::size_t ld = nb * out_plane;
          for (std::size_t k = 0; k < nb; ++k) {
            const double* src = self.grad.data() + (n0 + k) * g.out.c * out_plane;
            for (std::size_t co = 0; co < g.out.c; ++co) {
              std::copy_n(src + co * out_plane, out_plane, dout.data() + co * dout.cols() + k * out_plane);
            }
          }
          const auto d = dout.leftCols(static_cast<Eigen::Index>(ld));
          if (b && b->requires_grad) {
            auto& bg = b->ensure_grad();
            for (std::size_t co = 0; co < g.out.c; ++co) bg[co] += d.row(static_cast<Eigen::Index>(co)).sum();
          }
          if (ker.requires_grad) {
            for (std::size_t k = 0; k < nb; ++k) {
              im2col(in.data.data() + (n0 + k) * g.in.c * g.in.plane(), g, cols.data() + k * out_plane, ld);
            }
            MatrixMap dw(ker.ensure_grad().data(), g.out.c, patch);
            dw.noalias() += d * ConstMatrixMap(cols.data(), patch, ld).transpose();
          }
          if (in.requires_grad) {
            MatrixMap(cols.data(), patch, ld).noalias() = weights.transpose() * d;
            auto& ig = in.ensure_grad();
            for (std::size_t k = 0; k < nb; ++k) {
              col2im_add(cols.data() + k * out_plane, g, ig.data() + (n0 + k) * g.in.c * g.in.plane(), ld);
            }
          }
        }
      });
}

Tensor max_pool(const Tensor& input, std::size_t window) {
  const auto g = geometry_of(input, "max_pool");
  if (window == 0) throw ContractError("max_pool: window must be positive");
  const std::size_t wh = g.one_d ? 1 : window;
  if (g.w % window != 0) {
    throw DimensionError(std::string("max_pool: ") + spatial_axis_name(g.one_d, g.one_d ? 0 : 1) + " extent " +
                         std::to_string(g.w) + " not divisible by window " + std::to_string(window));
  }
  if (g.h % wh != 0) {
    throw DimensionError(std::string("max_pool: height (axis 2) extent ") + std::to_string(g.h) +
                         " not divisible by window " + std::to_string(window));
  }
  Geometry o = g;
  o.h = g.h / wh;
  o.w = g.w / window;
  const std::size_t planes = g.n * g.c;
  std::vector<double> out(planes * o.plane());
  std::vector<std::size_t> argmax(out.size());
  const auto src = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < o.h; ++oy) {
      for (std::size_t ox = 0; ox < o.w; ++ox) {
        std::size_t best = p * g.plane() + (oy * wh) * g.w + ox * window;
        for (std::size_t dy = 0; dy < wh; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = p * g.plane() + (oy * wh + dy) * g.w + ox * window + dx;
            if (src[idx] > src[best]) best = idx;  // strict: first index wins ties
          }
        }
        const std::size_t oi = p * o.plane() + oy * o.w + ox;
        out[oi] = src[best];
        argmax[oi] = best;
      }
    }
  }
  return Tensor::make_result(o.shape(), std::move(out), {input}, [argmax = std::move(argmax)](detail::Node& self) {
    auto& in = *self.parents[0];
    auto& ig = in.ensure_grad();
    for (std::size_t i = 0; i < argmax.size(); ++i) ig[argmax[i]] += self.grad[i];
  });
}

Tensor upsample_nearest(const Tensor& input, std::size_t scale) {
  const auto g = geometry_of(input, "upsample_nearest");
  if (scale == 0) throw ContractError("upsample_nearest: scale must be >= 1");
  const std::size_t sh = g.one_d ? 1 : scale;
  Geometry o = g;
  o.h = g.h * sh;
  o.w = g.w * scale;
  const std::size_t planes = g.n * g.c;
  std::vector<double> out(planes * o.plane());
  const auto src = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < o.h; ++y) {
      const double* row = src.data() + p * g.plane() + (y / sh) * g.w;
      double* dst = out.data() + p * o.plane() + y * o.w;
      for (std::size_t x = 0; x < o.w; ++x) dst[x] = row[x / scale];
    }
  }
  return Tensor::make_result(o.shape(), std::move(out), {input}, [g, o, sh, scale](detail::Node& self) {
    auto& ig = self.parents[0]->ensure_grad();
    const std::size_t planes = g.n * g.c;
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < o.h; ++y) {
        double* row = ig.data() + p * g.plane() + (y / sh) * g.w;
        const double* src = self.grad.data() + p * o.plane() + y * o.w;
        for (std::size_t x = 0; x < o.w; ++x) row[x / scale] += src[x];
      }
    }
  });
}

BatchNormState BatchNormState::init(std::size_t channels, double momentum, double epsilon) {
  return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0), momentum, epsilon};
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state, Mode mode) {
  const auto g = geometry_of(input, "batch_norm");
  if (gamma.numel() != g.c || beta.numel() != g.c) {
    throw DimensionError("batch_norm: channel axis (1) has " + std::to_string(g.c) + " channels, gamma/beta have " +
                         std::to_string(gamma.numel()) + "/" + std::to_string(beta.numel()));
  }
  if (state.running_mean.numel() != g.c || state.running_var.numel() != g.c) {
    throw DimensionError("batch_norm: running statistics sized for a different channel count");
  }
  const std::size_t plane = g.plane();
  const std::size_t count = g.n * plane;
  std::vector<double> mean(g.c), inv_std(g.c);
  const auto x = input.data();
  if (mode == Mode::train) {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t c = 0; c < g.c; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < g.n; ++n) {
        const double* p = x.data() + (n * g.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < g.n; ++n) {
        const double* p = x.data() + (n * g.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double biased = v / static_cast<double>(count);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : biased;
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(biased + state.epsilon);
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * m;
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < g.c; ++c) {
      mean[c] = state.running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var.data()[c] + state.epsilon);
    }
  }
  std::vector<double> xhat(x.size());
  std::vector<double> out(x.size());
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.c; ++c) {
      const std::size_t base = (n * g.c + c) * plane;
      const double ga = gamma.data()[c];
      const double be = beta.data()[c];
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[base + i] = (x[base + i] - mean[c]) * inv_std[c];
        out[base + i] = ga * xhat[base + i] + be;
      }
    }
  }
  const bool batch_stats = mode == Mode::train;
  return Tensor::make_result(
      g.shape(), std::move(out), {input, gamma, beta},
      [g, plane, count, batch_stats, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::Node& self) {
        auto& in = *self.parents[0];
        auto& ga = *self.parents[1];
        auto& be = *self.parents[2];
        const auto& dy = self.grad;
        for (std::size_t c = 0; c < g.c; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < g.n; ++n) {
            const std::size_t base = (n * g.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += dy[base + i];
              sum_dy_xhat += dy[base + i] * xhat[base + i];
            }
          }
          if (ga.requires_grad) ga.ensure_grad()[c] += sum_dy_xhat;
          if (be.requires_grad) be.ensure_grad()[c] += sum_dy;
          if (!in.requires_grad) continue;
          auto& dx = in.ensure_grad();
          const double gc = ga.data[c];
          const double m = static_cast<double>(count);
          for (std::size_t n = 0; n < g.n; ++n) {
            const std::size_t base = (n * g.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (batch_stats) {
                dx[base + i] += gc * inv_std[c] / m * (m * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
              } else {
                dx[base + i] += gc * inv_std[c] * dy[base + i];
              }
            }
          }
        }
      });
}

Tensor activation(const Tensor& input, Activation kind) {
  if (kind == Activation::identity) return input;
  const auto x = input.data();
  std::vector<double> out(x.size());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  }
  const bool is_relu = kind == Activation::relu;
  auto result = Tensor::make_result(input.shape(), std::move(out), {input}, {});
  if (!result.requires_grad()) return result;
  // The derivative only needs the output, which lives on the node itself.
  result.node().backward_fn = [is_relu](detail::Node& self) {
    auto& ig = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const double y = self.data[i];
      const double d = is_relu ? (y > 0.0 ? 1.0 : 0.0) : 1.0 - y * y;
      ig[i] += d * self.grad[i];
    }
  };
  return result;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const auto ga = geometry_of(a, "concat_channels");
  const auto gb = geometry_of(b, "concat_channels");
  if (a.dim() != b.dim()) throw DimensionError("concat_channels: rank mismatch");
  for (std::size_t axis = 0; axis < a.dim(); ++axis) {
    if (axis != 1 && a.shape()[axis] != b.shape()[axis]) {
      throw DimensionError("concat_channels: axis " + std::to_string(axis) + " has " +
                           std::to_string(a.shape()[axis]) + " vs " + std::to_string(b.shape()[axis]));
    }
  }
  Geometry o = ga;
  o.c = ga.c + gb.c;
  const std::size_t plane = ga.plane();
  std::vector<double> out(o.n * o.c * plane);
  for (std::size_t n = 0; n < o.n; ++n) {
    std::copy_n(a.data().data() + n * ga.c * plane, ga.c * plane, out.data() + n * o.c * plane);
    std::copy_n(b.data().data() + n * gb.c * plane, gb.c * plane, out.data() + (n * o.c + ga.c) * plane);
  }
  return Tensor::make_result(o.shape(), std::move(out), {a, b}, [ga, gb, o, plane](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t n = 0; n < o.n; ++n) {
      const double* src = self.grad.data() + n * o.c * plane;
      if (pa.requires_grad) {
        double* dst = pa.ensure_grad().data() + n * ga.c * plane;
        for (std::size_t i = 0; i < ga.c * plane; ++i) dst[i] += src[i];
      }
      if (pb.requires_grad) {
        double* dst = pb.ensure_grad().data() + n * gb.c * plane;
        for (std::size_t i = 0; i < gb.c * plane; ++i) dst[i] += src[ga.c * plane + i];
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad, -1.0);
  });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: factor must hold one value, got " + shape_to_string(s.shape()));
  const double k = s.data()[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * x.data()[i];
  return Tensor::make_result(x.shape(), std::move(out), {x, s}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    const double k = ps.data[0];
    if (px.requires_grad) accumulate(px, self.grad, k);
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.data[i];
      ps.ensure_grad()[0] += acc;
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x.data()[i];
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [factor](detail::Node& self) { accumulate(*self.parents[0], self.grad, factor); });
}

Tensor mul_constant(const Tensor& x, std::span<const double> factors) {
  if (factors.size() != x.numel()) {
    throw DimensionError("mul_constant: " + std::to_string(factors.size()) + " factors for tensor " +
                         shape_to_string(x.shape()));
  }
  std::vector<double> f(factors.begin(), factors.end());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f[i] * x.data()[i];
  return Tensor::make_result(x.shape(), std::move(out), {x}, [f = std::move(f)](detail::Node& self) {
    auto& ig = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < f.size(); ++i) ig[i] += f[i] * self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(values), {x},
                             [](detail::Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({1}, {s}, {x}, [](detail::Node& self) {
    auto& ig = self.parents[0]->ensure_grad();
    for (auto& v : ig) v += self.grad[0];
  });
}

Tensor weighted_squared_error(const Tensor& pred, std::span<const double> target, std::span<const double> weights) {
  if (target.size() != pred.numel() || weights.size() != pred.numel()) {
    throw DimensionError("weighted_squared_error: prediction " + shape_to_string(pred.shape()) + " vs " +
                         std::to_string(target.size()) + " targets / " + std::to_string(weights.size()) + " weights");
  }
  std::vector<double> residual(pred.numel());
  double loss = 0.0;
  for (std::size_t i = 0; i < residual.size(); ++i) {
    residual[i] = pred.data()[i] - target[i];
    loss += weights[i] * residual[i] * residual[i];
  }
  std::vector<double> w(weights.begin(), weights.end());
  return Tensor::make_result({1}, {loss}, {pred},
                             [residual = std::move(residual), w = std::move(w)](detail::Node& self) {
                               auto& ig = self.parents[0]->ensure_grad();
                               const double g = self.grad[0];
                               for (std::size_t i = 0; i < w.size(); ++i) ig[i] += 2.0 * w[i] * residual[i] * g;
                             });
}

}  // namespace mfconv::ops
