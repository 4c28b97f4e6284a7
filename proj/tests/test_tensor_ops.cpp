#include <doctest.h>

#include <cmath>

#include "grad_cases.hpp"
#include "mfconv/ops.hpp"
#include "mfconv/tensor.hpp"
#include "mfconv/tensor_io.hpp"

using namespace mfconv;

TEST_CASE("finite differences agree with backward for every layer") {
  for (const auto& c : testing::gradient_cases()) {
    CAPTURE(c.name);
    const auto r = c.run();
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("conv matches a direct loop") {
  Rng rng(3);
  const auto x = testing::random_tensor({2, 2, 5, 4}, rng, false);
  const auto k = testing::random_tensor({3, 2, 3, 2}, rng, false);
  const auto b = testing::random_tensor({3}, rng, false);
  const std::vector<std::size_t> ext{3, 2};
  const auto y = ops::conv(x, k, b, ops::ConvOptions::same(ext));
  REQUIRE(y.shape() == Shape{2, 3, 5, 4});
  // same(): pad (K-1)/2 before, the remainder after.
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          double acc = b.at(o);
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t di = 0; di < 3; ++di)
              for (std::size_t dj = 0; dj < 2; ++dj) {
                const long ii = static_cast<long>(i + di) - 1, jj = static_cast<long>(j + dj);
                if (ii < 0 || ii >= 5 || jj >= 4) continue;
                acc += k.at(((o * 2 + c) * 3 + di) * 2 + dj) * x.at(((n * 2 + c) * 5 + ii) * 4 + jj);
              }
          CHECK(y.at(((n * 3 + o) * 5 + i) * 4 + j) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("pooling and upsampling") {
  const auto x = Tensor::from({1, 1, 2, 4}, {1, 5, 2, 0, 3, -1, 7, 8});
  const auto p = ops::max_pool(x, 2);
  CHECK(p.shape() == Shape{1, 1, 1, 2});
  CHECK(p.at(0) == 5);
  CHECK(p.at(1) == 8);
  const auto u = ops::upsample_nearest(p, 2);
  CHECK(u.shape() == Shape{1, 1, 2, 4});
  CHECK(u.at(5) == 5);
  CHECK(u.at(7) == 8);
  CHECK_THROWS_AS(ops::max_pool(Tensor::zeros({1, 1, 3, 3}), 2), DimensionError);
}

TEST_CASE("batch norm normalizes per channel and tracks running statistics") {
  Rng rng(4);
  const auto x = testing::random_tensor({8, 2, 3, 3}, rng, false, 3.0);
  auto state = ops::BatchNormState::init(2, 0.1);
  const auto y = ops::batch_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), state, ops::Mode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, ss = 0, xs = 0;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t k = 0; k < 9; ++k) {
        const auto v = y.at((n * 2 + c) * 9 + k);
        s += v;
        ss += v * v;
        xs += x.at((n * 2 + c) * 9 + k);
      }
    CHECK(s / 72 == doctest::Approx(0.0).scale(1.0));
    CHECK(ss / 72 == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(state.running_mean.at(c) == doctest::Approx(0.1 * xs / 72));
  }
}

TEST_CASE("tensors share storage and no-grad mode records nothing") {
  auto a = Tensor::full({3}, 2.0, true);
  auto alias = a;
  alias.data()[0] = 5.0;
  CHECK(a.at(0) == 5.0);
  CHECK(a.clone().node_ptr() != a.node_ptr());
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(ops::sum(a).requires_grad());
  }
  CHECK(grad_enabled());
  const auto s = ops::sum(ops::scale(a, 3.0));
  s.backward();
  CHECK(a.grad()[2] == 3.0);
}

TEST_CASE("shape errors are reported") {
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  CHECK_THROWS_AS(ops::concat_channels(Tensor::zeros({2, 1, 3}), Tensor::zeros({1, 1, 3})), DimensionError);
}

TEST_CASE("tensor files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "mfconv_test_io";
  std::filesystem::create_directories(dir);
  const auto t = Tensor::from({2, 3}, {1.5, -2, 3e-300, 4, 5, 6});
  save_tensor(t, dir / "t");
  const auto u = load_tensor(dir / "t");
  CHECK(u.shape() == t.shape());
  for (std::size_t i = 0; i < 6; ++i) CHECK(u.at(i) == t.at(i));
  std::filesystem::remove_all(dir);
}
