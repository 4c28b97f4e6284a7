#pragma once

#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mfconv/architectures.hpp"
#include "mfconv/dropblock.hpp"
#include "mfconv/ops.hpp"

namespace mfconv::testing {

struct GradCase {
  std::string name;
  std::function<GradCheckResult()> run;
};

namespace detail {

inline GradCheckResult conv_case(Shape in_shape, Shape k_shape, const ops::ConvOptions& opt, std::uint64_t seed) {
  Rng rng(seed);
  auto x = random_tensor(in_shape, rng);
  auto k = random_tensor(k_shape, rng, true, 0.5);
  auto b = random_tensor({k_shape[0]}, rng);
  const auto probe = ops::conv(x, k, b, opt);
  const auto w = random_weights(probe.numel(), rng);
  return grad_check([&] { return project(ops::conv(x, k, b, opt), w); }, {x, k, b});
}

inline GradCheckResult unary_case(const std::function<Tensor(const Tensor&)>& f, Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  auto x = random_tensor(shape, rng);
  const auto w = random_weights(f(x).numel(), rng);
  return grad_check([&] { return project(f(x), w); }, {x});
}

inline GradCheckResult network_case(NetworkSpec spec, Shape input_shape, std::uint64_t seed, double h) {
  // ReLU kinks would be crossed by the probe step; the smooth activation
  // exercises the same wiring.
  spec.activation = ops::Activation::tanh;
  Rng rng(seed);
  auto net = build_network(spec);
  for (const auto& p : net->parameters()) {
    auto t = p.tensor;
    for (auto& v : t.data()) v += 0.3 * rng.normal();
  }
  const auto x = random_tensor(input_shape, rng, false);
  ForwardContext probe_ctx;
  probe_ctx.mode = ops::Mode::train;
  probe_ctx.p_override = 0.0;
  const auto probe = net->forward(x, probe_ctx).all();
  std::vector<std::vector<double>> w;
  for (const auto& o : probe) w.push_back(random_weights(o.numel(), rng));
  auto loss = [&] {
    ForwardContext ctx;
    ctx.mode = ops::Mode::train;
    ctx.p_override = 0.0;
    const auto outs = net->forward(x, ctx).all();
    Tensor total = project(outs[0], w[0]);
    for (std::size_t i = 1; i < outs.size(); ++i) total = ops::add(total, project(outs[i], w[i]));
    return total;
  };
  std::vector<Tensor> params;
  for (const auto& p : net->parameters()) params.push_back(p.tensor);
  // Biases ahead of batch norm have an exact zero gradient, so their numeric
  // side is pure cancellation noise that shrinks as h grows; max-pool near
  // ties push the other way. Each network gets a step between the two.
  return grad_check(loss, params, 12, h);
}

}  // namespace detail

/// One finite-difference case per layer type plus whole networks.
inline std::vector<GradCase> gradient_cases() {
  using detail::conv_case;
  using detail::unary_case;
  std::vector<GradCase> cases;
  cases.push_back({"conv1d width 2 same", [] {
                     const std::vector<std::size_t> k{2};
                     return conv_case({2, 3, 9}, {4, 3, 2}, ops::ConvOptions::same(k), 1);
                   }});
  cases.push_back({"conv2d 3x3 pad 1", [] {
                     return conv_case({2, 3, 7, 6}, {4, 3, 3, 3}, ops::ConvOptions::symmetric(2, 1, 1), 2);
                   }});
  cases.push_back({"conv2d 3x3 stride 2", [] {
                     return conv_case({1, 2, 9, 9}, {3, 2, 3, 3}, ops::ConvOptions::symmetric(2, 2, 1), 3);
                   }});
  cases.push_back({"conv2d 1x1", [] {
                     return conv_case({2, 5, 4, 4}, {2, 5, 1, 1}, ops::ConvOptions::symmetric(2, 1, 0), 4);
                   }});
  cases.push_back({"max_pool 2d", [] {
                     return unary_case([](const Tensor& x) { return ops::max_pool(x, 2); }, {2, 3, 6, 6}, 5);
                   }});
  cases.push_back({"max_pool 1d", [] {
                     return unary_case([](const Tensor& x) { return ops::max_pool(x, 2); }, {2, 3, 10}, 6);
                   }});
  cases.push_back({"upsample_nearest", [] {
                     return unary_case([](const Tensor& x) { return ops::upsample_nearest(x, 2); }, {2, 3, 4, 5}, 7);
                   }});
  cases.push_back({"relu", [] { return unary_case([](const Tensor& x) { return ops::relu(x); }, {3, 2, 5}, 8); }});
  cases.push_back({"tanh", [] { return unary_case([](const Tensor& x) { return ops::tanh(x); }, {3, 2, 5}, 9); }});
  cases.push_back({"batch_norm train", [] {
                     Rng rng(10);
                     auto x = random_tensor({4, 3, 5, 5}, rng);
                     auto g = random_tensor({3}, rng);
                     auto b = random_tensor({3}, rng);
                     auto state = ops::BatchNormState::init(3);
                     const auto w = random_weights(x.numel(), rng);
                     return grad_check(
                         [&] { return project(ops::batch_norm(x, g, b, state, ops::Mode::train), w); }, {x, g, b});
                   }});
  cases.push_back({"batch_norm eval", [] {
                     Rng rng(11);
                     auto x = random_tensor({2, 3, 4}, rng);
                     auto g = random_tensor({3}, rng);
                     auto b = random_tensor({3}, rng);
                     auto state = ops::BatchNormState::init(3);
                     state.running_mean.data()[1] = 0.4;
                     state.running_var.data()[2] = 2.5;
                     const auto w = random_weights(x.numel(), rng);
                     return grad_check(
                         [&] { return project(ops::batch_norm(x, g, b, state, ops::Mode::eval), w); }, {x, g, b});
                   }});
  cases.push_back({"concat/add/sub/mul_scalar", [] {
                     Rng rng(12);
                     auto a = random_tensor({2, 2, 3}, rng);
                     auto b = random_tensor({2, 3, 3}, rng);
                     auto c = random_tensor({2, 5, 3}, rng);
                     auto s = random_tensor({1}, rng);
                     const auto w = random_weights(30, rng);
                     return grad_check(
                         [&] {
                           const auto cat = ops::concat_channels(a, b);
                           return project(ops::mul_scalar(ops::sub(ops::add(cat, c), ops::scale(c, 0.3)), s), w);
                         },
                         {a, b, c, s});
                   }});
  cases.push_back({"reshape/weighted_squared_error", [] {
                     Rng rng(13);
                     auto x = random_tensor({2, 6}, rng);
                     const auto t = random_weights(12, rng);
                     const auto m = random_weights(12, rng);
                     return grad_check([&] { return ops::weighted_squared_error(ops::reshape(x, {3, 4}), t, m); }, {x});
                   }});
  cases.push_back({"dropblock fixed mask", [] {
                     Rng rng(14);
                     auto x = random_tensor({2, 3, 8, 8}, rng);
                     Rng mask_rng(15);
                     const dropblock::DropBlockSpec spec{0.3, 3, false, {}, true};
                     const auto mask = dropblock::sample_mask(mask_rng, x.shape(), spec, spec.p);
                     const auto w = random_weights(x.numel(), rng);
                     return grad_check([&] { return project(dropblock::apply(x, mask), w); }, {x});
                   }});
  cases.push_back({"toy dense_unet 2 filters 16x16", [] {
                     auto spec = NetworkSpec::dense_default();
                     spec.base_filters = 2;
                     return detail::network_case(spec, {2, 3, 16, 16}, 16, 1e-5);
                   }});
  cases.push_back({"decoder_l2h k=2", [] {
                     auto spec = NetworkSpec::l2h_default();
                     spec.base_filters = 2;
                     return detail::network_case(spec, {8, 2}, 17, 1e-4);
                   }});
  cases.push_back({"oned_mf", [] { return detail::network_case(NetworkSpec::oned_default(), {1, 1, 12}, 18, 1e-5); }});
  return cases;
}

}  // namespace mfconv::testing
