#include "mfconv/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <string>

#include "mfconv/tensor_io.hpp"

namespace mfconv::datagen {
namespace {

double forrester(double x) { return (6.0 * x - 2.0) * (6.0 * x - 2.0) * std::sin(12.0 * x - 4.0); }

std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

void require_distinct(std::vector<double> xs, const char* which) {
  std::sort(xs.begin(), xs.end());
  if (std::adjacent_find(xs.begin(), xs.end()) != xs.end()) {
    throw ValidationError(std::string("1D dataset: duplicate x location among ") + which + " points");
  }
  for (double x : xs) {
    if (!(x >= 0.0 && x <= 1.0)) throw ValidationError(std::string("1D dataset: ") + which + " location outside [0,1]");
  }
}

Field make_field(std::size_t extent, double value = 0.0) { return {extent, std::vector<double>(extent * extent, value)}; }

Field subsample(const Field& f, std::size_t stride, Subsampling method) {
  const std::size_t n = f.extent / stride;
  Field out = make_field(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (method == Subsampling::stride) {
        out.values[i * n + j] = f.at(i * stride, j * stride);
      } else {
        double s = 0.0;
        for (std::size_t a = 0; a < stride; ++a)
          for (std::size_t b = 0; b < stride; ++b) s += f.at(i * stride + a, j * stride + b);
        out.values[i * n + j] = s / static_cast<double>(stride * stride);
      }
    }
  }
  return out;
}

std::pair<double, double> min_max(const std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return {*lo, *hi};
}

std::uint64_t sample_key(std::uint64_t seed, std::size_t index) { return Rng::mix(seed, index + 1); }

}  // namespace

FunctionPair eval_example1(double x) {
  const double high = forrester(x);
  const double low = 0.5 * high + 10.0 * (x - 0.5) - 5.0;
  return {low, high};
}

FunctionPair eval_example2(double x) {
  const double l = 0.5 * forrester(x) + 10.0 * (x - 0.5) - 5.0;
  const double low = x <= 0.5 ? l : 3.0 + l;
  const double h = 2.0 * low - 20.0 * x + 20.0;
  const double high = x <= 0.5 ? h : 4.0 + h;
  return {low, high};
}

Rescale Rescale::fit(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("rescale: no values");
  const auto [lo, hi] = min_max(values);
  if (!(hi > lo)) throw ValidationError("rescale: training values have zero range");
  return {lo, hi};
}

std::vector<double> default_lf_locations(int example) {
  if (example == 1) return linspace(0.0, 1.0, 11);
  if (example == 2) return linspace(0.0, 1.0, 38);
  throw ValidationError("1D dataset: example must be 1 or 2");
}

std::vector<double> default_hf_locations(int example) {
  if (example == 1) return {0.0, 0.4, 0.6, 1.0};
  if (example == 2) {
    std::vector<double> xs(5);
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = (static_cast<double>(i) + 0.5) / 5.0;
    return xs;
  }
  throw ValidationError("1D dataset: example must be 1 or 2");
}

OneDDataset build_1d_dataset(int example, const OneDOverrides& overrides) {
  auto eval = example == 1 ? eval_example1 : eval_example2;
  OneDDataset d;
  d.example = example;
  d.lf_x = overrides.lf_x.value_or(default_lf_locations(example));
  d.hf_x = overrides.hf_x.value_or(default_hf_locations(example));
  require_distinct(d.lf_x, "LF");
  require_distinct(d.hf_x, "HF");
  std::sort(d.lf_x.begin(), d.lf_x.end());
  std::sort(d.hf_x.begin(), d.hf_x.end());
  std::vector<double> lf_raw, hf_raw;
  for (double x : d.lf_x) lf_raw.push_back(eval(x).low);
  for (double x : d.hf_x) hf_raw.push_back(eval(x).high);
  d.lf_scale = Rescale::fit(lf_raw);
  d.hf_scale = Rescale::fit(hf_raw);
  for (double y : lf_raw) d.lf_y.push_back(d.lf_scale.apply(y));
  for (double y : hf_raw) d.hf_y.push_back(d.hf_scale.apply(y));
  d.test_x = linspace(0.0, 1.0, 101);
  for (double x : d.test_x) {
    const auto v = eval(x);
    d.test_lf.push_back(d.lf_scale.apply(v.low));
    d.test_hf.push_back(d.hf_scale.apply(v.high));
  }
  return d;
}

double axial_velocity(double y, double r, double v_max) {
  if (std::abs(y) > r) return 0.0;
  const double t = y / r;
  return v_max * (1.0 - t * t);
}

double pressure_drop(double r, double v_max, const FluidProps& props) {
  return 4.0 * props.mu * props.length * v_max / (r * r);
}

PoiseuilleSample gen_poiseuille(double r, double v_max, const FluidProps& props, std::size_t grid,
                                double pressure_scale, double concentration_noise, Rng& rng) {
  if (!(r > 0.0 && r <= 1.0)) throw ValidationError("poiseuille: radius must lie in (0, 1]");
  if (!(v_max > 0.0)) throw ValidationError("poiseuille: v_max must be positive");
  if (!(props.mu > 0.0)) throw ValidationError("poiseuille: viscosity must be positive");
  if (grid == 0) throw ValidationError("poiseuille: grid must be positive");
  if (!(pressure_scale > 0.0)) throw ValidationError("poiseuille: pressure scale must be positive");

  PoiseuilleSample s;
  s.r = r;
  s.v_max = v_max;
  s.concentration = make_field(grid);
  s.velocity_x = make_field(grid);
  s.velocity_y = make_field(grid);
  s.pressure_hf = make_field(grid);
  s.fluid_mask = make_field(grid);

  const double dp = pressure_drop(r, v_max, props);
  s.normalization = {0.5 * dp, pressure_scale};
  const double dy = 2.0 / static_cast<double>(grid);
  const double dx = props.length / static_cast<double>(grid);
  std::size_t fluid_rows = 0;
  for (std::size_t i = 0; i < grid; ++i) {
    const double y = -1.0 + (static_cast<double>(i) + 0.5) * dy;
    const bool fluid = std::abs(y) <= r;
    fluid_rows += fluid ? 1 : 0;
    for (std::size_t j = 0; j < grid; ++j) {
      const std::size_t k = i * grid + j;
      const double x = (static_cast<double>(j) + 0.5) * dx;
      s.fluid_mask.values[k] = fluid ? 1.0 : 0.0;
      s.velocity_x.values[k] = fluid ? axial_velocity(y, r, v_max) : 0.0;
      const double p = dp * (1.0 - x / props.length);
      s.pressure_hf.values[k] = fluid ? 0.5 + (p - s.normalization.offset) / s.normalization.scale : 0.0;
    }
  }
  if (fluid_rows < 2) {
    throw DegenerateGeometryError("poiseuille: radius " + std::to_string(r) + " leaves " + std::to_string(fluid_rows) +
                                  " fluid rows on a " + std::to_string(grid) + " grid");
  }
  for (std::size_t k = 0; k < s.concentration.values.size(); ++k) {
    const double noisy = s.fluid_mask.values[k] + rng.uniform(0.0, concentration_noise);
    s.concentration.values[k] = std::clamp(noisy, 0.0, 1.0);
  }
  return s;
}

LfStack derive_lf_stack(const Field& hf, const Field& fluid_mask, double noise_ratio, Rng& rng, Subsampling method) {
  if (hf.extent == 0 || hf.extent % 8 != 0 || hf.values.size() != hf.extent * hf.extent) {
    throw ValidationError("lf stack: high-fidelity field must be square with extent divisible by 8");
  }
  LfStack out;
  const std::array<std::size_t, 3> strides{8, 4, 2};
  for (std::size_t level = 0; level < 3; ++level) {
    auto lf = subsample(hf, strides[level], method);
    const auto [lo, hi] = min_max(lf.values);
    const double amplitude = noise_ratio * (hi - lo);
    for (auto& v : lf.values) v += rng.uniform(0.0, amplitude);
    out.pressure[level] = std::move(lf);
    out.fluid_mask[level] = subsample(fluid_mask, strides[level], Subsampling::stride);
  }
  return out;
}

Field inject_bias(const Field& lf3, double ratio) {
  Field out = lf3;
  if (out.values.empty()) return out;
  const auto [lo, hi] = min_max(out.values);
  const double shift = ratio * (hi - lo);
  for (auto& v : out.values) v += shift;
  return out;
}

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::vector<std::size_t> SplitAssignment::ids(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tags.size(); ++i)
    if (tags[i] == which) out.push_back(i);
  return out;
}

SplitAssignment assign_splits(std::size_t n_samples, std::array<double, 3> probs, std::uint64_t seed) {
  const double total = probs[0] + probs[1] + probs[2];
  if (std::abs(total - 1.0) > 1e-9 || probs[0] < 0 || probs[1] < 0 || probs[2] < 0) {
    throw ValidationError("splits: probabilities must be nonnegative and sum to 1");
  }
  SplitAssignment a;
  a.seed = seed;
  a.tags.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    // One uniform per sample, keyed by its index.
    const double u = Rng::derive(seed, i).uniform();
    if (u < probs[0]) {
      a.tags.push_back(Split::train);
    } else if (u < probs[0] + probs[1]) {
      a.tags.push_back(Split::val);
    } else {
      a.tags.push_back(Split::test);
    }
  }
  return a;
}

std::vector<std::size_t> subsample_hf(const std::vector<std::size_t>& train_ids, std::size_t k, std::uint64_t seed) {
  if (k > train_ids.size()) {
    throw ValidationError("hf subset: requested " + std::to_string(k) + " of " + std::to_string(train_ids.size()) +
                          " training samples");
  }
  auto pool = train_ids;
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

double PoiseuilleConfig::reference_pressure_drop() const {
  return pressure_drop(r_range[0], v_range[1], props);
}

PoiseuilleDataset build_poiseuille_dataset(const PoiseuilleConfig& config) {
  if (config.r_range[0] > config.r_range[1] || config.v_range[0] > config.v_range[1]) {
    throw ValidationError("poiseuille: parameter ranges must be ordered");
  }
  PoiseuilleDataset d;
  d.config = config;
  d.splits = assign_splits(config.n_samples, config.split_probs, config.split_seed);
  d.hf_subset_ids = subsample_hf(d.splits.ids(Split::train), std::min(config.hf_subset, d.splits.ids(Split::train).size()),
                                 Rng::mix(config.split_seed, 0xfeed));
  const double scale = config.reference_pressure_drop();
  Rng params = Rng::derive(config.seed, 0);
  d.samples.reserve(config.n_samples);
  for (std::size_t i = 0; i < config.n_samples; ++i) {
    const double r = params.uniform(config.r_range[0], config.r_range[1]);
    const double v = params.uniform(config.v_range[0], config.v_range[1]);
    const auto key = sample_key(config.seed, i);
    Rng conc = Rng::derive(key, 1);
    Rng lf_noise = Rng::derive(key, 2);
    auto s = gen_poiseuille(r, v, config.props, config.grid, scale, config.concentration_noise, conc);
    s.lf = derive_lf_stack(s.pressure_hf, s.fluid_mask, config.lf_noise_ratio, lf_noise, config.subsampling);
    if (config.lf3_bias_ratio != 0.0 && d.splits.tags[i] == Split::train) {
      s.lf.pressure[2] = inject_bias(s.lf.pressure[2], config.lf3_bias_ratio);
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

namespace {

nlohmann::json config_to_json(const PoiseuilleConfig& c) {
  return {{"n_samples", c.n_samples},
          {"grid", c.grid},
          {"r_range", c.r_range},
          {"v_range", c.v_range},
          {"mu", c.props.mu},
          {"length", c.props.length},
          {"concentration_noise", c.concentration_noise},
          {"lf_noise_ratio", c.lf_noise_ratio},
          {"lf3_bias_ratio", c.lf3_bias_ratio},
          {"subsampling", c.subsampling == Subsampling::stride ? "stride" : "block_average"},
          {"split_probs", c.split_probs},
          {"hf_subset", c.hf_subset},
          {"seed", c.seed},
          {"split_seed", c.split_seed}};
}

PoiseuilleConfig config_from_json(const nlohmann::json& j) {
  PoiseuilleConfig c;
  c.n_samples = j.at("n_samples").get<std::size_t>();
  c.grid = j.at("grid").get<std::size_t>();
  c.r_range = j.at("r_range").get<std::array<double, 2>>();
  c.v_range = j.at("v_range").get<std::array<double, 2>>();
  c.props.mu = j.at("mu").get<double>();
  c.props.length = j.at("length").get<double>();
  c.concentration_noise = j.at("concentration_noise").get<double>();
  c.lf_noise_ratio = j.at("lf_noise_ratio").get<double>();
  c.lf3_bias_ratio = j.at("lf3_bias_ratio").get<double>();
  c.subsampling = j.at("subsampling").get<std::string>() == "stride" ? Subsampling::stride : Subsampling::block_average;
  c.split_probs = j.at("split_probs").get<std::array<double, 3>>();
  c.hf_subset = j.at("hf_subset").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.split_seed = j.at("split_seed").get<std::uint64_t>();
  return c;
}

std::string sample_prefix(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04zu", i);
  return buf;
}

}  // namespace

void save_dataset(const PoiseuilleDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "mfconv-poiseuille/1";
  manifest["config"] = config_to_json(dataset.config);
  manifest["hf_subset_ids"] = dataset.hf_subset_ids;
  auto& samples = manifest["samples"];
  samples = nlohmann::json::array();
  const std::vector<std::size_t> subset(dataset.hf_subset_ids.begin(), dataset.hf_subset_ids.end());
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    const auto prefix = sample_prefix(i);
    std::vector<std::pair<std::string, const Field*>> fields{
        {"concentration", &s.concentration}, {"velocity_x", &s.velocity_x}, {"velocity_y", &s.velocity_y},
        {"pressure_hf", &s.pressure_hf},     {"fluid_mask", &s.fluid_mask}};
    for (std::size_t level = 0; level < 3; ++level) {
      fields.emplace_back("lf" + std::to_string(level + 1) + "_pressure", &s.lf.pressure[level]);
      fields.emplace_back("lf" + std::to_string(level + 1) + "_fluid_mask", &s.lf.fluid_mask[level]);
    }
    nlohmann::json files = nlohmann::json::object();
    for (const auto& [name, field] : fields) {
      const auto file = prefix + "_" + name + ".f64";
      write_f64(dir / file, field->values);
      files[name] = {{"file", file}, {"extent", field->extent}};
    }
    const auto key = sample_key(dataset.config.seed, i);
    samples.push_back({{"index", i},
                       {"r", s.r},
                       {"v_max", s.v_max},
                       {"split", to_string(dataset.splits.tags[i])},
                       {"hf_subset", std::binary_search(subset.begin(), subset.end(), i)},
                       {"pressure_offset", s.normalization.offset},
                       {"pressure_scale", s.normalization.scale},
                       {"noise_seed", key},
                       {"files", files}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw FormatError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(1) << '\n';
}

PoiseuilleConfig load_manifest_config(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("missing " + (dir / "manifest.json").string());
  try {
    const auto manifest = nlohmann::json::parse(is);
    return config_from_json(manifest.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad dataset manifest: " + std::string(e.what()));
  }
}

}  // namespace mfconv::datagen
