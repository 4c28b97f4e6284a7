// Command-line front end: run, sweep, report.
#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "mfconv/experiment.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
namespace ex = mfconv::experiment;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kSchema = 2;
constexpr int kDivergence = 3;
constexpr int kMissing = 4;

json read_config_json(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw ex::SchemaError("config: cannot open " + file.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ex::SchemaError(std::string("config: invalid JSON: ") + e.what());
  }
}

fs::path default_out(const fs::path& config) { return fs::path("runs") / config.stem(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multifidelity convolutional surrogates with MC DropBlock uncertainty"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::uint64_t> seed;
  std::string out;
  app.add_option("--seed", seed, "Override the config's master seed");
  app.add_option("--out", out, "Output directory");

  std::string config_path, report_dir, exhibit;
  auto* run_cmd = app.add_subcommand("run", "Generate data, train and evaluate one configuration");
  run_cmd->add_option("config", config_path, "Experiment config (JSON)")->required();
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid search over the config's sweep block");
  sweep_cmd->add_option("config", config_path, "Experiment config (JSON)")->required();
  auto* report_cmd = app.add_subcommand("report", "Emit the data behind a figure or table");
  report_cmd->add_option("dir", report_dir, "Run or results directory")->required();
  report_cmd->add_option("--exhibit", exhibit, "Exhibit name")
      ->required()
      ->check(CLI::IsMember(ex::kExhibits));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kSchema;
  }

  try {
    if (*run_cmd) {
      auto j = read_config_json(config_path);
      if (seed) j["seed"] = *seed;
      const auto cfg = ex::parse_config(j);
      const fs::path dir = out.empty() ? default_out(config_path) : fs::path(out);
      const auto summary = ex::run(cfg, dir);
      std::cout << ex::to_json(summary).dump(2) << '\n';
    } else if (*sweep_cmd) {
      auto j = read_config_json(config_path);
      if (seed) j["seed"] = *seed;
      const fs::path dir = out.empty() ? default_out(config_path) : fs::path(out);
      const auto rows = ex::sweep(j, dir);
      std::cout << "ranked " << rows.size() << " runs; best: " << rows.front().dir.string() << " (val loss "
                << rows.front().best_val_loss << ")\n";
    } else if (*report_cmd) {
      std::cout << ex::report(report_dir, exhibit).string() << '\n';
    }
  } catch (const ex::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << '\n';
    return kSchema;
  } catch (const mfconv::training::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const ex::MissingArtifactError& e) {
    std::cerr << "missing artifacts: " << e.what() << '\n';
    return kMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}
