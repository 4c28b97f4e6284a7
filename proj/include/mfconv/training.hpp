#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfconv/architectures.hpp"
#include "mfconv/rng.hpp"

namespace mfconv::training {

/// Loss became NaN or infinite. The network has already been restored to the
/// best checkpoint seen so far.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t epoch) : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

/// A gradient entry was NaN or infinite.
class NonFiniteGradientError : public DivergenceError {
 public:
  NonFiniteGradientError(const std::string& parameter, std::size_t epoch);
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

enum class InitScheme { uniform_fanprod, xavier_normal };
/// How the uniform_fanprod bound s is formed from the fan product n k0 k1.
enum class FanprodBound { literal, inverse_sqrt };

struct TrainConfig {
  double lr = 1e-2;
  std::size_t lr_step = 500;
  double lr_decay = 0.9;
  std::size_t batch_size = 16;
  std::size_t epochs = 2000;
  InitScheme init = InitScheme::xavier_normal;
  FanprodBound fanprod_bound = FanprodBound::literal;
  /// One weight per network output, coarsest first; must sum to 1.
  std::vector<double> loss_weights{0.25, 0.25, 0.25, 0.25};
  double weight_decay = 0.0;
  /// Train with batch norm frozen at its running statistics.
  bool batch_norm_eval = false;
  std::uint64_t seed = 0;

  void validate(std::size_t outputs) const;
  static TrainConfig oned_default();
  static TrainConfig dense_default();
  static TrainConfig l2h_default();
};

/// Per-fidelity target for one example; mask marks the pixels that count.
struct Target {
  std::vector<double> values;
  std::vector<double> mask;
};

struct Example {
  std::vector<double> input;
  /// One slot per network output; empty when that fidelity is unavailable.
  std::vector<std::optional<Target>> targets;
};

struct ExampleSet {
  /// Per-example input shape (no batch axis).
  Shape input_shape;
  /// Per-example output shapes (no batch axis), one per network output.
  std::vector<Shape> output_shapes;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  void validate() const;
  Tensor batch_input(const std::vector<std::size_t>& ids) const;
};

struct LossBreakdown {
  Tensor total;
  /// Unweighted per-fidelity masked MSE; NaN when absent from the batch.
  std::vector<double> terms;
};

/// Weighted sum over fidelities of the masked MSE, each averaged over the
/// batch examples that carry that fidelity. Fidelities absent from the batch
/// contribute nothing; with renormalize the present weights are rescaled to
/// sum to 1.
LossBreakdown mf_loss(const MfPrediction& pred, const ExampleSet& set, const std::vector<std::size_t>& ids,
                      const std::vector<double>& weights, bool renormalize = false);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;
};

/// One bias-corrected Adam update over every parameter of the network.
void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr, std::size_t epoch,
               double weight_decay = 0.0);

double step_lr(std::size_t epoch, double base_lr, std::size_t step, double decay = 0.9);

void init_weights(Network& net, InitScheme scheme, Rng& rng, FanprodBound bound = FanprodBound::literal);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double p_effective = 0.0;
  double loss_total = 0.0;
  std::vector<double> terms;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::optional<std::size_t> best_epoch;
};

/// Trains in place and leaves the network at its best-validation state.
/// Validation runs with DropBlocks active at their full probability and
/// batch norm in eval mode. Weights are initialized from cfg.seed first
/// unless `initialize` is false.
TrainResult train(Network& net, const ExampleSet& train_set, const ExampleSet& val_set, const TrainConfig& cfg,
                  bool initialize = true);

/// Validation loss as used for checkpointing.
double validation_loss(Network& net, const ExampleSet& val_set, const TrainConfig& cfg, std::uint64_t stream);

std::vector<std::string> output_names(std::size_t outputs);
void write_history_csv(const std::filesystem::path& file, const TrainResult& result, std::size_t outputs);

/// checkpoint.json plus one tensor file per parameter and buffer.
void save_checkpoint(const Network& net, const std::filesystem::path& dir);
void load_checkpoint(Network& net, const std::filesystem::path& dir);

}  // namespace mfconv::training
