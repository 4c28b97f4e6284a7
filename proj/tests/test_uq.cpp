#include <doctest.h>

#include <filesystem>
#include <numeric>

#include "ensemble_oracle.hpp"
#include "mfconv/datagen.hpp"
#include "mfconv/training.hpp"
#include "mfconv/uq_metrics.hpp"

using namespace mfconv;
using namespace mfconv::uq;

TEST_CASE("percentiles interpolate between order statistics") {
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 0.0);
  CHECK(percentile_sorted(v, 0.05) == doctest::Approx(4.95));
  CHECK(percentile_sorted(v, 0.95) == doctest::Approx(94.05));
  CHECK(percentile_sorted(v, 0.5) == doctest::Approx(49.5));
  CHECK(percentile_sorted({7.0}, 0.3) == 7.0);
  CHECK_THROWS_AS(percentile_sorted({}, 0.5), ContractError);
}

TEST_CASE("ensemble statistics match a direct recomputation") {
  Rng rng(8);
  ReplicaStack st{{1, 1, 3, 2}, {}};
  for (int r = 0; r < 57; ++r) {
    std::vector<double> row(6);
    for (auto& x : row) x = rng.normal() * 3 + 1;
    st.values.push_back(row);
  }
  const auto s = ensemble_stats(st);
  for (std::size_t k = 0; k < 6; ++k) {
    std::vector<double> col;
    for (const auto& r : st.values) col.push_back(r[k]);
    const auto ref = testing::reference_stats(col);
    CHECK(std::abs(s.mean[k] - ref.mean) < 1e-12);
    CHECK(std::abs(s.std[k] - ref.std) < 1e-12);
    CHECK(std::abs(s.p5[k] - ref.p5) < 1e-12);
    CHECK(std::abs(s.median[k] - ref.median) < 1e-12);
    CHECK(std::abs(s.p95[k] - ref.p95) < 1e-12);
  }
  st.values.resize(1);
  CHECK_THROWS_AS(ensemble_stats(st), ContractError);
}

TEST_CASE("coefficient of determination") {
  CHECK(r_squared({1, 2, 4}, {1, 2, 3}, {1, 1, 1}) == doctest::Approx(0.5));
  CHECK(r_squared({1, 2, 4, 100}, {1, 2, 3, 0}, {1, 1, 1, 0}) == doctest::Approx(0.5));
  CHECK(r_squared({1, 2, 3}, {1, 2, 3}, {1, 1, 1}) == 1.0);
  CHECK_THROWS_AS(r_squared({1, 2}, {3, 3}, {1, 1}), UndefinedMetricError);
  CHECK_THROWS_AS(r_squared({1, 2}, {3, 3}, {0, 0}), ContractError);
}

TEST_CASE("pixel cost bookkeeping") {
  const auto ledger = CostLedger::standard();
  CHECK(ledger.pixel_cost("HF 116/0") == 475136u);
  CHECK(ledger.pixel_cost("HF 32/0") == 131072u);
  CHECK(ledger.pixel_cost("MF 32/116") == 286976u);
  CHECK(ledger.cost_ratio("HF 32/0", "HF 116/0") == doctest::Approx(0.276).epsilon(0.002));
  CHECK(ledger.cost_ratio("MF 32/116", "HF 116/0") == doctest::Approx(0.604).epsilon(0.002));
  // Published normalized accuracy of the implicit-concat MF network.
  CHECK(normalized_accuracy(0.9672, ledger, "MF 32/116") == doctest::Approx(3.370e-06).epsilon(1e-3));
  CHECK_THROWS_AS(ledger.pixel_cost("HF 1/0"), ContractError);
  CostLedger custom(4, {2});
  custom.add("x", 3, 5);
  CHECK(custom.pixel_cost("x") == 3u * 16 + 5u * 4);
}

TEST_CASE("centerline and slices follow the fluid band") {
  const std::size_t n = 64;
  std::vector<double> full(n * n, 1.0);
  CHECK(centerline_row(full, n, n) == 32);
  std::vector<double> band(n * n, 0.0);
  for (std::size_t i = 10; i <= 20; ++i)
    for (std::size_t j = 0; j < n; ++j) band[i * n + j] = 1.0;
  CHECK(centerline_row(band, n, n) == 15);
  std::vector<double> split = band;
  for (std::size_t j = 0; j < n; ++j) split[15 * n + j] = 0.0;
  CHECK_THROWS_AS(centerline_row(split, n, n), ContractError);
  CHECK_THROWS_AS(centerline_row(std::vector<double>(n * n, 0.0), n, n), ContractError);

  Rng rng(1);
  const auto s = datagen::gen_poiseuille(0.5, 1.0, {}, n, 10.0, 0.1, rng);
  const auto slices = extract_slices(s.pressure_hf.values, s.fluid_mask.values, n, n);
  CHECK(slices.size() == 32);
  for (const auto& sl : slices)
    for (std::size_t j = 1; j < sl.size(); ++j) CHECK(sl[j] < sl[j - 1]);
  const auto c = extract_centerline(s.pressure_hf.values, s.fluid_mask.values, n, n);
  CHECK(c == slices[16]);
}

TEST_CASE("location statistics on a hand-made stack") {
  const std::size_t h = 2, w = 3;
  std::vector<double> mask(h * w, 1.0);
  // centerline_row picks row 1 of a full 2-row band.
  ReplicaStack st{{1, 1, h, w}, {{0, 0, 0, 1, 2, 3}, {0, 0, 0, 3, 2, 1}}};
  const std::vector<double> truth{0, 0, 0, 2, 2, 0};
  const auto ls = location_stats({st}, {truth}, {mask}, h, w);
  CHECK(ls.mse == std::vector<double>{0.0, 0.0, 4.0});
  CHECK(ls.mean_std == std::vector<double>{1.0, 0.0, 1.0});
  CHECK(ls.replica_mse == std::vector<double>{1.0, 0.0, 5.0});
}

TEST_CASE("replica stacks persist exactly") {
  ReplicaStack st{{2, 2}, {{1, 2, 3, 4}, {5, 6, 7, 8.5}, {0, -1, 1e-9, 3}}};
  const auto dir = std::filesystem::temp_directory_path() / "mfconv_test_stack";
  std::filesystem::create_directories(dir);
  save_stack(st, dir / "s");
  const auto back = load_stack(dir / "s");
  CHECK(back.shape == st.shape);
  CHECK(back.values == st.values);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ensembles do not depend on how replicas are grouped") {
  auto spec = NetworkSpec::l2h_default();
  spec.base_filters = 2;
  auto net = build_network(spec);
  Rng init(4);
  training::init_weights(*net, training::InitScheme::xavier_normal, init);
  const auto x = Tensor::from({1, 2}, {0.6, 1.2});
  EnsembleOptions one, many;
  one.replicas_per_pass = 1;
  many.replicas_per_pass = 7;
  const auto a = mc_ensemble(*net, x, 10, 42, one);
  const auto b = mc_ensemble(*net, x, 10, 42, many);
  CHECK(a.values == b.values);
  CHECK(a.values[0] != a.values[1]);
  EnsembleOptions off = many;
  off.p_override = 0.0;
  const auto c = mc_ensemble(*net, x, 3, 42, off);
  CHECK(c.values[0] == c.values[2]);
}
