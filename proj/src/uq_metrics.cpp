#include "mfconv/uq_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mfconv/tensor_io.hpp"

namespace mfconv::uq {

Rng replica_stream(std::uint64_t master_seed, std::size_t replica, std::size_t element) {
  return Rng::derive(Rng::mix(master_seed, replica), element);
}

ReplicaStack mc_ensemble(Network& net, const Tensor& input, std::size_t n, std::uint64_t master_seed,
                         const EnsembleOptions& options) {
  if (n < 1) throw ContractError("mc_ensemble: n must be >= 1");
  NoGradGuard no_grad;
  const std::size_t per_pass = std::max<std::size_t>(1, options.replicas_per_pass);
  const std::size_t batch = input.extent(0);
  const std::size_t in_numel = input.numel();
  Shape tiled_shape = input.shape();
  ReplicaStack stack;
  stack.values.reserve(n);
  for (std::size_t r0 = 0; r0 < n; r0 += per_pass) {
    const std::size_t count = std::min(per_pass, n - r0);
    std::vector<double> tiled;
    tiled.reserve(count * in_numel);
    std::vector<Rng> streams;
    streams.reserve(count * batch);
    for (std::size_t r = 0; r < count; ++r) {
      tiled.insert(tiled.end(), input.data().begin(), input.data().end());
      for (std::size_t k = 0; k < batch; ++k) streams.push_back(replica_stream(master_seed, r0 + r, k));
    }
    tiled_shape[0] = count * batch;
    ForwardContext ctx;
    ctx.mode = ops::Mode::eval;
    for (auto& s : streams) ctx.rngs.push_back(&s);
    ctx.p_override = options.p_override;
    const auto outputs = net.forward(Tensor::from(tiled_shape, std::move(tiled)), ctx).all();
    const std::size_t which = options.output.value_or(outputs.size() - 1);
    if (which >= outputs.size()) throw ContractError("mc_ensemble: output index out of range");
    const auto& out = outputs[which];
    const std::size_t out_numel = out.numel() / count;
    if (stack.shape.empty()) {
      stack.shape = out.shape();
      stack.shape[0] = batch;
    }
    for (std::size_t r = 0; r < count; ++r) {
      const auto begin = out.data().begin() + static_cast<std::ptrdiff_t>(r * out_numel);
      stack.values.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(out_numel));
    }
  }
  return stack;
}

double pairwise_sum(const double* values, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(values, half) + pairwise_sum(values + half, n - half);
}

double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ContractError("percentile: empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ContractError("percentile: q must lie in [0,1]");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

EnsembleStats ensemble_stats(const ReplicaStack& stack) {
  const std::size_t n = stack.replicas();
  if (n < 2) throw ContractError("ensemble_stats: at least 2 replicas are needed for a standard deviation");
  const std::size_t m = stack.numel();
  for (const auto& r : stack.values) {
    if (r.size() != m) throw DimensionError("ensemble_stats: replica size does not match stack shape");
  }
  EnsembleStats s;
  s.n_replicas = n;
  s.shape = stack.shape;
  s.mean.resize(m);
  s.std.resize(m);
  s.p5.resize(m);
  s.median.resize(m);
  s.p95.resize(m);
  std::vector<double> column(n), dev(n);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = stack.values[i][j];
    // Sorting first makes every reduction independent of replica order.
    std::sort(column.begin(), column.end());
    const double mean = pairwise_sum(column.data(), n) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) dev[i] = (column[i] - mean) * (column[i] - mean);
    s.mean[j] = mean;
    s.std[j] = std::sqrt(pairwise_sum(dev.data(), n) / static_cast<double>(n));
    s.p5[j] = percentile_sorted(column, 0.05);
    s.median[j] = percentile_sorted(column, 0.5);
    s.p95[j] = percentile_sorted(column, 0.95);
  }
  return s;
}

double r_squared(const std::vector<double>& pred, const std::vector<double>& truth, const std::vector<double>& mask) {
  if (pred.size() != truth.size() || mask.size() != truth.size()) {
    throw DimensionError("r_squared: prediction, truth and mask sizes differ");
  }
  std::vector<double> selected;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (mask[i] > 0.5) selected.push_back(truth[i]);
  if (selected.empty()) throw ContractError("r_squared: empty mask");
  const double mean = pairwise_sum(selected.data(), selected.size()) / static_cast<double>(selected.size());
  std::vector<double> res, tot;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (mask[i] <= 0.5) continue;
    res.push_back((truth[i] - pred[i]) * (truth[i] - pred[i]));
    tot.push_back((truth[i] - mean) * (truth[i] - mean));
  }
  const double ss_tot = pairwise_sum(tot.data(), tot.size());
  if (!(ss_tot > 0.0)) throw UndefinedMetricError("r_squared: truth has zero variance over the mask");
  return 1.0 - pairwise_sum(res.data(), res.size()) / ss_tot;
}

CostLedger::CostLedger(std::size_t hf_extent, std::vector<std::size_t> lf_extents)
    : hf_extent_(hf_extent), lf_extents_(std::move(lf_extents)) {}

CostLedger CostLedger::standard() {
  CostLedger ledger;
  ledger.add("HF 116/0", 116, 0);
  ledger.add("HF 32/0", 32, 0);
  ledger.add("MF 32/116", 32, 116);
  return ledger;
}

void CostLedger::add(const std::string& id, std::size_t hf_images, std::size_t lf_images) {
  entries_[id] = {hf_images, lf_images};
}

std::uint64_t CostLedger::pixel_cost(const std::string& id) const {
  const auto it = entries_.find(id);
  if (it == entries_.end()) throw ContractError("cost ledger: unknown dataset '" + id + "'");
  std::uint64_t lf_pixels = 0;
  for (auto e : lf_extents_) lf_pixels += static_cast<std::uint64_t>(e) * e;
  const auto hf_pixels = static_cast<std::uint64_t>(hf_extent_) * hf_extent_;
  return it->second.hf_images * hf_pixels + it->second.lf_images * lf_pixels;
}

double CostLedger::cost_ratio(const std::string& id, const std::string& reference) const {
  return static_cast<double>(pixel_cost(id)) / static_cast<double>(pixel_cost(reference));
}

double normalized_accuracy(double r2, const CostLedger& ledger, const std::string& dataset_id) {
  return r2 / static_cast<double>(ledger.pixel_cost(dataset_id));
}

namespace {

std::vector<std::size_t> fluid_rows(const std::vector<double>& mask, std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw DimensionError("fluid mask size does not match height x width");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < height; ++i) {
    bool fluid = false;
    for (std::size_t j = 0; j < width && !fluid; ++j) fluid = mask[i * width + j] > 0.5;
    if (fluid) rows.push_back(i);
  }
  if (rows.empty()) throw ContractError("fluid mask is empty");
  for (std::size_t k = 1; k < rows.size(); ++k) {
    if (rows[k] != rows[k - 1] + 1) throw ContractError("fluid rows do not form a contiguous band");
  }
  return rows;
}

std::vector<double> row_of(const std::vector<double>& field, std::size_t row, std::size_t width) {
  const auto begin = field.begin() + static_cast<std::ptrdiff_t>(row * width);
  return {begin, begin + static_cast<std::ptrdiff_t>(width)};
}

}  // namespace

std::size_t centerline_row(const std::vector<double>& fluid_mask, std::size_t height, std::size_t width) {
  const auto rows = fluid_rows(fluid_mask, height, width);
  return rows[rows.size() / 2];
}

std::vector<double> extract_centerline(const std::vector<double>& field, const std::vector<double>& fluid_mask,
                                       std::size_t height, std::size_t width) {
  if (field.size() != height * width) throw DimensionError("field size does not match height x width");
  return row_of(field, centerline_row(fluid_mask, height, width), width);
}

std::vector<std::vector<double>> extract_slices(const std::vector<double>& field, const std::vector<double>& fluid_mask,
                                                std::size_t height, std::size_t width) {
  if (field.size() != height * width) throw DimensionError("field size does not match height x width");
  std::vector<std::vector<double>> slices;
  for (auto r : fluid_rows(fluid_mask, height, width)) slices.push_back(row_of(field, r, width));
  return slices;
}

LocationStats location_stats(const std::vector<ReplicaStack>& stacks, const std::vector<std::vector<double>>& truth,
                             const std::vector<std::vector<double>>& masks, std::size_t height, std::size_t width) {
  if (stacks.size() != truth.size() || masks.size() != truth.size() || stacks.empty()) {
    throw DimensionError("location_stats: need one stack, truth and mask per test sample");
  }
  LocationStats out;
  std::vector<std::vector<double>> sq(width), sd(width), rep(width);
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const auto stats = ensemble_stats(stacks[s]);
    const auto row = centerline_row(masks[s], height, width);
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t k = row * width + j;
      const double t = truth[s][k];
      sq[j].push_back((stats.mean[k] - t) * (stats.mean[k] - t));
      sd[j].push_back(stats.std[k]);
      std::vector<double> errs;
      for (const auto& r : stacks[s].values) errs.push_back((r[k] - t) * (r[k] - t));
      rep[j].push_back(pairwise_sum(errs.data(), errs.size()) / static_cast<double>(errs.size()));
    }
  }
  const auto mean_of = [](const std::vector<double>& v) { return pairwise_sum(v.data(), v.size()) / static_cast<double>(v.size()); };
  for (std::size_t j = 0; j < width; ++j) {
    out.mse.push_back(mean_of(sq[j]));
    out.mean_std.push_back(mean_of(sd[j]));
    out.replica_mse.push_back(mean_of(rep[j]));
  }
  return out;
}

void write_location_csv(const std::filesystem::path& file, const LocationStats& stats) {
  std::ofstream os(file);
  if (!os) throw FormatError("cannot write " + file.string());
  os.precision(17);
  os << "# location: axial pixel index; std: population std over replicas; mse: squared error of the ensemble mean\n";
  os << "location,mse,mean_std,replica_mse\n";
  for (std::size_t j = 0; j < stats.mse.size(); ++j) {
    os << j << ',' << stats.mse[j] << ',' << stats.mean_std[j] << ',' << stats.replica_mse[j] << '\n';
  }
}

void save_stack(const ReplicaStack& stack, const std::filesystem::path& stem) {
  Shape shape{stack.replicas()};
  shape.insert(shape.end(), stack.shape.begin(), stack.shape.end());
  std::vector<double> flat;
  flat.reserve(shape_numel(shape));
  for (const auto& r : stack.values) flat.insert(flat.end(), r.begin(), r.end());
  save_tensor(Tensor::from(std::move(shape), std::move(flat)), stem);
}

ReplicaStack load_stack(const std::filesystem::path& stem) {
  const auto t = load_tensor(stem);
  if (t.dim() < 1) throw FormatError("replica stack must have a leading replica axis");
  ReplicaStack s;
  s.shape.assign(t.shape().begin() + 1, t.shape().end());
  const std::size_t m = s.numel();
  for (std::size_t i = 0; i < t.extent(0); ++i) {
    const auto begin = t.data().begin() + static_cast<std::ptrdiff_t>(i * m);
    s.values.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(m));
  }
  return s;
}

}  // namespace mfconv::uq
