#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mfconv/rng.hpp"

namespace mfconv::datagen {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateGeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// One-dimensional function pairs

struct FunctionPair {
  double low;
  double high;
};

/// Continuous pair: y_L = 0.5 (6x-2)^2 sin(12x-4) + 10(x-0.5) - 5, y_H = (6x-2)^2 sin(12x-4).
FunctionPair eval_example1(double x);
/// Discontinuous pair with jumps at x = 0.5.
FunctionPair eval_example2(double x);

/// Affine map taking [min, max] onto [0, 1].
struct Rescale {
  double min = 0.0;
  double max = 1.0;

  static Rescale fit(const std::vector<double>& values);
  double apply(double v) const { return (v - min) / (max - min); }
  double invert(double v) const { return min + v * (max - min); }
};

struct OneDOverrides {
  std::optional<std::vector<double>> lf_x;
  std::optional<std::vector<double>> hf_x;
};

struct OneDDataset {
  int example = 1;
  std::vector<double> lf_x, lf_y;  // rescaled
  std::vector<double> hf_x, hf_y;  // rescaled
  std::vector<double> test_x;      // 101 points on [0, 1]
  std::vector<double> test_lf, test_hf;  // rescaled with the training maps
  Rescale lf_scale, hf_scale;
};

std::vector<double> default_lf_locations(int example);
std::vector<double> default_hf_locations(int example);
OneDDataset build_1d_dataset(int example, const OneDOverrides& overrides = {});

// ---------------------------------------------------------------------------
// Poiseuille pressure fields

struct FluidProps {
  double mu = 1.0;
  double length = 1.0;
};

/// Square field, row-major, rows along the transverse axis y in [-1, 1],
/// columns along the axial axis x in [0, length].
struct Field {
  std::size_t extent = 0;
  std::vector<double> values;

  double at(std::size_t row, std::size_t col) const { return values[row * extent + col]; }
};

struct PressureNormalization {
  /// Raw pressure at the mid-length section; maps to 0.5.
  double offset = 0.0;
  /// Raw pressure difference that spans one normalized unit.
  double scale = 1.0;
};

/// Coarse levels ordered coarsest first: 8x8, 16x16, 32x32.
struct LfStack {
  std::array<Field, 3> pressure;
  std::array<Field, 3> fluid_mask;
};

struct PoiseuilleSample {
  double r = 0.0;
  double v_max = 0.0;
  Field concentration;  // noisy fluid indicator c
  Field velocity_x;
  Field velocity_y;     // identically zero
  Field pressure_hf;    // normalized, 0 outside the fluid
  Field fluid_mask;     // binary truth c_b
  PressureNormalization normalization;
  LfStack lf;
};

enum class Subsampling { stride, block_average };

double axial_velocity(double y, double r, double v_max);
/// Hagen-Poiseuille pressure drop over the whole length: 4 mu L v_max / r^2.
double pressure_drop(double r, double v_max, const FluidProps& props);

/// Single sample on a grid x grid axial slice; LF levels are left empty.
PoiseuilleSample gen_poiseuille(double r, double v_max, const FluidProps& props, std::size_t grid,
                                double pressure_scale, double concentration_noise, Rng& rng);

LfStack derive_lf_stack(const Field& hf, const Field& fluid_mask, double noise_ratio, Rng& rng,
                        Subsampling method = Subsampling::stride);

/// field + ratio * (max - min), uniformly.
Field inject_bias(const Field& lf3, double ratio);

// ---------------------------------------------------------------------------
// Splits

enum class Split { train, val, test };
const char* to_string(Split s);

struct SplitAssignment {
  std::vector<Split> tags;
  std::uint64_t seed = 0;

  std::vector<std::size_t> ids(Split which) const;
};

SplitAssignment assign_splits(std::size_t n_samples, std::array<double, 3> probs, std::uint64_t seed);
/// k ids drawn without replacement, returned in ascending order.
std::vector<std::size_t> subsample_hf(const std::vector<std::size_t>& train_ids, std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Whole dataset

struct PoiseuilleConfig {
  std::size_t n_samples = 200;
  std::size_t grid = 64;
  std::array<double, 2> r_range{0.4, 0.95};
  std::array<double, 2> v_range{0.5, 2.0};
  FluidProps props;
  double concentration_noise = 0.1;
  double lf_noise_ratio = 0.05;
  double lf3_bias_ratio = 0.0;
  Subsampling subsampling = Subsampling::stride;
  std::array<double, 3> split_probs{0.6, 0.2, 0.2};
  std::size_t hf_subset = 32;
  std::uint64_t seed = 0;
  /// Yields 116 / 49 / 35 train / val / test samples out of 200.
  std::uint64_t split_seed = 963;

  /// Largest pressure drop the parameter ranges allow; used as the common
  /// normalization scale.
  double reference_pressure_drop() const;
};

struct PoiseuilleDataset {
  PoiseuilleConfig config;
  std::vector<PoiseuilleSample> samples;
  SplitAssignment splits;
  std::vector<std::size_t> hf_subset_ids;
};

PoiseuilleDataset build_poiseuille_dataset(const PoiseuilleConfig& config);

/// manifest.json plus one raw f64 file per field.
void save_dataset(const PoiseuilleDataset& dataset, const std::filesystem::path& dir);
PoiseuilleConfig load_manifest_config(const std::filesystem::path& dir);

}  // namespace mfconv::datagen
