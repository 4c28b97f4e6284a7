#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfconv/architectures.hpp"
#include "mfconv/datagen.hpp"
#include "mfconv/training.hpp"

namespace mfconv::experiment {

/// Config violates the schema; what() starts with the offending field path.
class SchemaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A report was requested for a directory lacking the needed run outputs.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { oned_ex1, oned_ex2, dense, l2h };
std::string to_string(Kind k);

enum class Persist { none, centerline, full };

struct EvalConfig {
  std::size_t n_replicas = 1000;
  std::size_t replicas_per_pass = 8;
  Persist persist = Persist::centerline;
};

struct ExperimentConfig {
  Kind kind = Kind::dense;
  std::uint64_t seed = 0;
  /// 2D: "MF 32/116", "HF 32/0" or "HF 116/0". 1D: "MF" or "HF".
  std::string dataset = "MF 32/116";
  datagen::PoiseuilleConfig poiseuille;
  datagen::OneDOverrides oned;
  NetworkSpec network;
  training::TrainConfig train;
  EvalConfig eval;
  /// Dotted config paths mapped to candidate values.
  nlohmann::ordered_json sweep = nlohmann::ordered_json::object();

  bool multifidelity() const { return dataset.rfind("MF", 0) == 0; }
};

/// Defaults for a kind before any user overrides.
ExperimentConfig defaults(Kind kind);
ExperimentConfig parse_config(const nlohmann::ordered_json& j);
ExperimentConfig load_config(const std::filesystem::path& file);
/// Fully resolved config, suitable for rerunning.
nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

struct Splits {
  training::ExampleSet train, val, test;
};

/// Training, validation and test sets for the Poiseuille kinds.
Splits poiseuille_examples(const datagen::PoiseuilleDataset& data, const ExperimentConfig& cfg);
/// Training (also used for validation) and test-grid sets for the 1D kinds.
Splits oned_examples(const datagen::OneDDataset& data, const ExperimentConfig& cfg);

struct Summary {
  double r2 = 0.0;
  double normalized_r2 = 0.0;
  std::uint64_t cost = 0;
  double best_val_loss = 0.0;
};

nlohmann::ordered_json to_json(const Summary& s);

/// generate, train, evaluate; writes every artifact under out_dir.
Summary run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

struct SweepRow {
  std::size_t index = 0;
  nlohmann::ordered_json values;
  double best_val_loss = 0.0;
  std::filesystem::path dir;
};

/// Cartesian product of the sweep block; rows ranked by best validation loss.
std::vector<SweepRow> sweep(const nlohmann::ordered_json& base, const std::filesystem::path& out_dir);

extern const std::vector<std::string> kExhibits;
/// Writes the exhibit's CSV into dir and returns its path.
std::filesystem::path report(const std::filesystem::path& dir, const std::string& exhibit);

/// Rows of the DropBlock drop-ratio table.
struct DropRatioRow {
  std::size_t block_size;
  double p;
  std::size_t feature_extent;
  double gamma;
  double empirical;
  double expected;
};
std::vector<DropRatioRow> drop_ratio_table(std::size_t realizations, std::uint64_t seed);
/// Exact expected fraction of dropped entries for one plane.
double expected_drop_ratio(double p, std::size_t feature_extent, std::size_t block_size, std::size_t dims);

}  // namespace mfconv::experiment
