#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "mfconv/training.hpp"

using namespace mfconv;
using namespace mfconv::training;

namespace {

ExampleSet toy_oned_set(std::size_t L) {
  ExampleSet set;
  set.input_shape = {1, L};
  set.output_shapes = {{1, L}, {1, L}};
  Example e;
  for (std::size_t i = 0; i < L; ++i) e.input.push_back(static_cast<double>(i) / (L - 1));
  Target lf{std::vector<double>(L), std::vector<double>(L, 1.0)};
  Target hf{std::vector<double>(L), std::vector<double>(L, 1.0)};
  for (std::size_t i = 0; i < L; ++i) {
    lf.values[i] = 0.3 + 0.2 * std::sin(3.0 * e.input[i]);
    hf.values[i] = 0.5 * e.input[i];
  }
  e.targets = {lf, hf};
  set.examples.push_back(e);
  return set;
}

NetworkSpec deterministic_oned() {
  auto spec = NetworkSpec::oned_default();
  spec.dropblock.spec.p = 0.0;
  return spec;
}

}  // namespace

TEST_CASE("step decay") {
  CHECK(step_lr(0, 0.01, 500) == 0.01);
  CHECK(step_lr(499, 0.01, 500) == 0.01);
  CHECK(step_lr(500, 0.01, 500) == doctest::Approx(0.009));
  CHECK(step_lr(1700, 0.01, 500) == doctest::Approx(0.01 * 0.729));
  CHECK_THROWS_AS(step_lr(3, 0.01, 0), ContractError);
}

TEST_CASE("first Adam step moves by lr times the normalized gradient") {
  auto w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  ops::sum(ops::mul_constant(w, std::vector<double>{0.5, -4.0, 1e-3})).backward();
  AdamState st;
  adam_step({{"w", w, ParamKind::conv_weight}}, st, 0.1, 0);
  // m_hat = g, v_hat = g^2 after one step.
  const std::vector<double> g{0.5, -4.0, 1e-3}, start{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(w.at(i) == doctest::Approx(start[i] - 0.1 * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-12));
  CHECK(st.step == 1);
}

TEST_CASE("weight decay reaches conv weights only") {
  auto a = Tensor::from({1}, {2.0}, true);
  auto b = Tensor::from({1}, {2.0}, true);
  a.zero_grad();
  b.zero_grad();
  AdamState st;
  adam_step({{"a", a, ParamKind::conv_weight}, {"b", b, ParamKind::bn_gamma}}, st, 0.1, 0, 0.5);
  CHECK(a.at(0) == doctest::Approx(1.9));
  CHECK(b.at(0) == 2.0);
}

TEST_CASE("non-finite gradients are reported with the parameter name") {
  auto w = Tensor::from({1}, {1.0}, true);
  ops::sum(ops::mul_constant(w, std::vector<double>{std::numeric_limits<double>::quiet_NaN()})).backward();
  AdamState st;
  try {
    adam_step({{"enc1.conv1.weight", w, ParamKind::conv_weight}}, st, 0.1, 7);
    FAIL("expected an exception");
  } catch (const NonFiniteGradientError& e) {
    CHECK(e.parameter() == "enc1.conv1.weight");
    CHECK(e.epoch() == 7);
  }
}

TEST_CASE("initializers have the requested moments") {
  auto spec = NetworkSpec::dense_default();
  auto net = build_network(spec);
  Rng rng(3);
  init_weights(*net, InitScheme::xavier_normal, rng);
  const auto* w = net->find("enc4.conv2.weight");
  REQUIRE(w != nullptr);
  double s = 0, ss = 0;
  for (double v : w->data()) {
    s += v;
    ss += v * v;
  }
  const double n = static_cast<double>(w->numel());
  const double fan = 128.0 * 9;
  CHECK(std::abs(s / n) < 0.05 * std::sqrt(2.0 / (2 * fan)));
  CHECK(std::sqrt(ss / n) == doctest::Approx(std::sqrt(2.0 / (2 * fan))).epsilon(0.02));

  init_weights(*net, InitScheme::uniform_fanprod, rng, FanprodBound::inverse_sqrt);
  double mx = 0;
  ss = 0;
  for (double v : w->data()) {
    mx = std::max(mx, std::abs(v));
    ss += v * v;
  }
  CHECK(mx <= 1.0 / std::sqrt(fan));
  CHECK(ss / n == doctest::Approx(1.0 / (3 * fan)).epsilon(0.02));
  init_weights(*net, InitScheme::uniform_fanprod, rng, FanprodBound::literal);
  mx = 0;
  for (double v : net->find("enc1.conv1.weight")->data()) mx = std::max(mx, std::abs(v));
  CHECK(mx <= 27.0);
  CHECK(mx > 20.0);
  for (const auto& p : net->parameters()) {
    if (p.kind == ParamKind::bn_gamma) CHECK(p.tensor.at(0) == 1.0);
    if (p.kind == ParamKind::bn_beta || p.kind == ParamKind::conv_bias) CHECK(p.tensor.at(0) == 0.0);
  }
}

TEST_CASE("multifidelity loss averages over examples carrying each fidelity") {
  ExampleSet set;
  set.input_shape = {1, 2};
  set.output_shapes = {{1, 2}, {1, 2}};
  Example a{{0, 0}, {Target{{1, 1}, {1, 1}}, Target{{2, 2}, {1, 0}}}};
  Example b{{0, 0}, {Target{{3, 3}, {1, 1}}, std::nullopt}};
  set.examples = {a, b};
  MfPrediction pred{{Tensor::zeros({2, 1, 2})}, Tensor::zeros({2, 1, 2})};
  const auto l = mf_loss(pred, set, {0, 1}, {0.25, 0.75});
  // LF: mean of 1 and 9; HF: only example a, one unmasked pixel of error 2.
  CHECK(l.terms[0] == doctest::Approx(5.0));
  CHECK(l.terms[1] == doctest::Approx(4.0));
  CHECK(l.total.item() == doctest::Approx(0.25 * 5 + 0.75 * 4));
  MfPrediction single{{Tensor::zeros({1, 1, 2})}, Tensor::zeros({1, 1, 2})};
  const auto only_b = mf_loss(single, set, {1}, {0.25, 0.75});
  CHECK(std::isnan(only_b.terms[1]));
  CHECK(only_b.total.item() == doctest::Approx(0.25 * 9));
  CHECK(mf_loss(single, set, {1}, {0.25, 0.75}, true).total.item() == doctest::Approx(9.0));
}

TEST_CASE("config validation") {
  auto c = TrainConfig::dense_default();
  CHECK_NOTHROW(c.validate(4));
  CHECK_THROWS(c.validate(2));
  c.loss_weights = {0.5, 0.5, 0.5, 0.5};
  CHECK_THROWS(c.validate(4));
}

TEST_CASE("zero epochs leaves an empty history") {
  auto net = build_network(deterministic_oned());
  auto cfg = TrainConfig::oned_default();
  cfg.epochs = 0;
  const auto set = toy_oned_set(8);
  const auto r = train(*net, set, set, cfg);
  CHECK(r.history.empty());
  CHECK_FALSE(r.best_epoch.has_value());
}

TEST_CASE("a small network overfits one example") {
  auto net = build_network(deterministic_oned());
  auto cfg = TrainConfig::oned_default();
  cfg.fanprod_bound = FanprodBound::inverse_sqrt;
  cfg.lr = 1e-2;
  cfg.epochs = 1500;
  cfg.seed = 2;
  const auto set = toy_oned_set(8);
  const auto r = train(*net, set, set, cfg);
  REQUIRE(r.history.size() == 1500);
  // Validation runs batch norm on running statistics, so only the training
  // loss is expected to vanish.
  CHECK(r.history.back().loss_total < 1e-6);
  CHECK(r.best_val_loss < 1e-3);
  CHECK(r.history.back().lr == doctest::Approx(1e-2 * std::pow(0.9, 3)));
}

TEST_CASE("training is deterministic") {
  const auto set = toy_oned_set(8);
  auto cfg = TrainConfig::oned_default();
  cfg.epochs = 20;
  cfg.seed = 5;
  auto a = build_network(NetworkSpec::oned_default());
  auto b = build_network(NetworkSpec::oned_default());
  const auto ra = train(*a, set, set, cfg);
  const auto rb = train(*b, set, set, cfg);
  CHECK(ra.best_val_loss == rb.best_val_loss);
  CHECK(a->snapshot() == b->snapshot());
}

TEST_CASE("divergence restores the best state and reports the epoch") {
  auto set = toy_oned_set(8);
  auto cfg = TrainConfig::oned_default();
  cfg.epochs = 5;
  auto net = build_network(deterministic_oned());
  set.examples[0].targets[1]->values[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(train(*net, set, set, cfg), DivergenceError);
}

TEST_CASE("checkpoints round trip") {
  auto net = build_network(NetworkSpec::l2h_default());
  Rng rng(1);
  init_weights(*net, InitScheme::xavier_normal, rng);
  const auto dir = std::filesystem::temp_directory_path() / "mfconv_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(*net, dir);
  auto other = build_network(NetworkSpec::l2h_default());
  load_checkpoint(*other, dir);
  CHECK(other->snapshot() == net->snapshot());
  auto wrong = build_network(NetworkSpec::oned_default());
  CHECK_THROWS(load_checkpoint(*wrong, dir));
  std::filesystem::remove_all(dir);
}
