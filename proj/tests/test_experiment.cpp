#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "mfconv/experiment.hpp"

using namespace mfconv;
using namespace mfconv::experiment;
using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

json tiny_dense() {
  return json::parse(R"({
    "kind": "dense", "dataset": "MF 32/116", "seed": 3,
    "data": {"n_samples": 16, "hf_subset": 3},
    "network": {"base_filters": 2},
    "train": {"epochs": 2, "batch_size": 4},
    "eval": {"n_replicas": 3, "replicas_per_pass": 2}
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mfconv_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(MFCONV_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

}  // namespace

TEST_CASE("schema errors name the offending field") {
  auto j = tiny_dense();
  j["train"]["learning_rate"] = 0.1;
  try {
    parse_config(j);
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).rfind("train.learning_rate", 0) == 0);
  }
  j = tiny_dense();
  j["network"]["dropblock"] = {{"p", "high"}};
  CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("network.dropblock.p"), SchemaError);
  j = tiny_dense();
  j["network"]["skip"] = "multiply";
  CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("network.skip"), SchemaError);
  j = tiny_dense();
  j["dataset"] = "MF 1/2";
  CHECK_THROWS_AS(parse_config(j), SchemaError);
  j = tiny_dense();
  j["train"]["loss_weights"] = {0.5, 0.5, 0.5, 0.5};
  CHECK_THROWS_AS(parse_config(j), SchemaError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"seed": 1})")), SchemaError);
}

TEST_CASE("resolved configs round trip") {
  const auto c = parse_config(tiny_dense());
  const auto again = parse_config(to_json(c));
  CHECK(to_json(again).dump() == to_json(c).dump());
  CHECK(c.network.base_filters == 2);
  CHECK(c.poiseuille.n_samples == 16);
  const auto oned = defaults(Kind::oned_ex2);
  CHECK(oned.network.dropblock.sites == std::vector<std::size_t>{5, 6, 7, 8});
  CHECK(defaults(Kind::oned_ex1).network.dropblock.sites == std::vector<std::size_t>{3, 4, 5, 6, 7, 8});
  CHECK(defaults(Kind::oned_ex1).train.lr == 9e-4);
}

TEST_CASE("a tiny run writes every artifact and is reproducible") {
  const auto dir = scratch("run");
  const auto cfg = parse_config(tiny_dense());
  const auto s = run(cfg, dir / "a");
  run(cfg, dir / "b");
  CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json"));
  CHECK(s.cost == 286976u);
  for (const auto* f : {"config.json", "history.csv", "checkpoint/checkpoint.json", "eval/metrics.json",
                        "eval/centerline.csv", "eval/location_stats.csv", "eval/hf_mean.f64",
                        "eval/centerline_stack.f64", "data/manifest.json"}) {
    CAPTURE(f);
    CHECK(fs::exists(dir / "a" / f));
  }
  CHECK(report(dir, "fig9").filename() == "fig9.csv");
  CHECK(report(dir, "table1").filename() == "table1.csv");
  CHECK_THROWS_AS(report(dir, "fig6"), MissingArtifactError);
  fs::remove_all(dir);
}

TEST_CASE("sweeps rank runs by validation loss") {
  const auto dir = scratch("sweep");
  auto j = tiny_dense();
  j["train"]["epochs"] = 1;
  j["sweep"] = {{"train.lr", {1e-3, 1e-2}}, {"network.dropblock.p", {0.1, 0.3}}};
  const auto rows = sweep(j, dir);
  REQUIRE(rows.size() == 4);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i - 1].best_val_loss <= rows[i].best_val_loss);
  CHECK(fs::exists(dir / "ranking.csv"));
  j["sweep"] = json::object();
  CHECK_THROWS_AS(sweep(j, dir), SchemaError);
  fs::remove_all(dir);
}

TEST_CASE("command line exit codes") {
  const auto dir = scratch("cli");
  CHECK(cli("") == 2);
  CHECK(cli("run " + (dir / "missing.json").string()) == 2);
  auto bad = tiny_dense();
  bad["bogus"] = 1;
  write(dir / "bad.json", bad);
  CHECK(cli("run " + (dir / "bad.json").string()) == 2);
  auto diverge = tiny_dense();
  diverge["train"]["lr"] = 1e300;
  write(dir / "diverge.json", diverge);
  CHECK(cli("run " + (dir / "diverge.json").string() + " --out " + (dir / "d").string()) == 3);
  CHECK(cli("report " + (dir / "empty").string() + " --exhibit fig11") == 4);
  CHECK(cli("report " + dir.string() + " --exhibit table99") == 2);
  CHECK(cli("report " + dir.string() + " --exhibit table5") == 0);
  CHECK(fs::exists(dir / "table5.csv"));
  write(dir / "ok.json", tiny_dense());
  CHECK(cli("--seed 9 run " + (dir / "ok.json").string() + " --out " + (dir / "ok").string()) == 0);
  CHECK(slurp(dir / "ok" / "config.json").find("\"seed\": 9") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("shipped example configs parse") {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(MFCONV_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_config(entry.path()));
    ++n;
  }
  CHECK(n >= 9);
}
