#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfconv/architectures.hpp"

namespace mfconv::uq {

class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Replica predictions for one output; values[i] is replica i flattened.
struct ReplicaStack {
  Shape shape;
  std::vector<std::vector<double>> values;

  std::size_t replicas() const { return values.size(); }
  std::size_t numel() const { return shape_numel(shape); }
};

struct EnsembleOptions {
  /// Which output to collect; unset means the HF output.
  std::optional<std::size_t> output;
  /// Forces every DropBlock to this probability.
  std::optional<double> p_override;
  /// Replicas evaluated together in one forward pass.
  std::size_t replicas_per_pass = 8;
};

/// The random stream used by replica `replica` for batch element `element`.
Rng replica_stream(std::uint64_t master_seed, std::size_t replica, std::size_t element);

/// n eval-mode forward passes with DropBlocks active. Results are the same
/// however replicas are grouped into passes.
ReplicaStack mc_ensemble(Network& net, const Tensor& input, std::size_t n, std::uint64_t master_seed,
                         const EnsembleOptions& options = {});

struct EnsembleStats {
  std::size_t n_replicas = 0;
  Shape shape;
  std::vector<double> mean, std, p5, median, p95;
};

/// Sort-based per-entry statistics; population std.
EnsembleStats ensemble_stats(const ReplicaStack& stack);

/// Linear interpolation between order statistics of an ascending sequence.
double percentile_sorted(const std::vector<double>& sorted, double q);
/// Pairwise (cascade) summation.
double pairwise_sum(const double* values, std::size_t n);

/// 1 - SS_res / SS_tot over masked entries.
double r_squared(const std::vector<double>& pred, const std::vector<double>& truth, const std::vector<double>& mask);

class CostLedger {
 public:
  struct Entry {
    std::size_t hf_images = 0;
    std::size_t lf_images = 0;
  };

  explicit CostLedger(std::size_t hf_extent = 64, std::vector<std::size_t> lf_extents = {32, 16, 8});
  /// HF 116/0, HF 32/0 and MF 32/116.
  static CostLedger standard();

  void add(const std::string& id, std::size_t hf_images, std::size_t lf_images);
  bool contains(const std::string& id) const { return entries_.count(id) != 0; }
  std::uint64_t pixel_cost(const std::string& id) const;
  double cost_ratio(const std::string& id, const std::string& reference) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::size_t hf_extent_;
  std::vector<std::size_t> lf_extents_;
  std::map<std::string, Entry> entries_;
};

double normalized_accuracy(double r2, const CostLedger& ledger, const std::string& dataset_id);

/// Row of the band's vertical midpoint; even bands take the lower-middle row.
std::size_t centerline_row(const std::vector<double>& fluid_mask, std::size_t height, std::size_t width);
std::vector<double> extract_centerline(const std::vector<double>& field, const std::vector<double>& fluid_mask,
                                       std::size_t height, std::size_t width);
/// Every fluid row, top to bottom.
std::vector<std::vector<double>> extract_slices(const std::vector<double>& field, const std::vector<double>& fluid_mask,
                                                std::size_t height, std::size_t width);

struct LocationStats {
  /// Per axial location along the centerline.
  std::vector<double> mse;
  std::vector<double> mean_std;
  std::vector<double> replica_mse;
};

/// Per-location curves across test samples. stacks[s] holds the replicas of
/// sample s shaped [1, 1, H, W]; truth and masks are flattened H x W.
LocationStats location_stats(const std::vector<ReplicaStack>& stacks, const std::vector<std::vector<double>>& truth,
                             const std::vector<std::vector<double>>& masks, std::size_t height, std::size_t width);

void write_location_csv(const std::filesystem::path& file, const LocationStats& stats);

/// Replica stacks persist as one tensor [n, ...shape].
void save_stack(const ReplicaStack& stack, const std::filesystem::path& stem);
ReplicaStack load_stack(const std::filesystem::path& stem);

}  // namespace mfconv::uq
