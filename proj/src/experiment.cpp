#include "mfconv/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mfconv/tensor_io.hpp"
#include "mfconv/uq_metrics.hpp"

namespace mfconv::experiment {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Schema reading

template <class T>
constexpr const char* type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else if constexpr (std::is_unsigned_v<T>) return "a nonnegative integer";
  else return "a number";
}

template <class T>
T convert(const json& v, const std::string& path) {
  bool ok = false;
  if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
  else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
  else if constexpr (std::is_unsigned_v<T>) ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  else ok = v.is_number();
  if (!ok) throw SchemaError(path + ": expected " + type_name<T>() + ", got " + v.dump());
  return v.get<T>();
}

template <class T>
std::vector<T> convert_list(const json& v, const std::string& path) {
  if (!v.is_array()) throw SchemaError(path + ": expected an array, got " + v.dump());
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(convert<T>(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SchemaError(path_ + ": expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (const auto* v = find(key)) out = convert<T>(*v, at(key));
  }

  template <class T>
  void read_list(const std::string& key, std::vector<T>& out) {
    if (const auto* v = find(key)) out = convert_list<T>(*v, at(key));
  }

  template <class T, std::size_t N>
  void read_array(const std::string& key, std::array<T, N>& out) {
    if (const auto* v = find(key)) {
      const auto list = convert_list<T>(*v, at(key));
      if (list.size() != N) throw SchemaError(at(key) + ": expected " + std::to_string(N) + " entries");
      std::copy(list.begin(), list.end(), out.begin());
    }
  }

  template <class E>
  void read_enum(const std::string& key, E& out, const std::vector<std::pair<std::string, E>>& options) {
    const auto* v = find(key);
    if (!v) return;
    const auto name = convert<std::string>(*v, at(key));
    for (const auto& [n, e] : options) {
      if (n == name) {
        out = e;
        return;
      }
    }
    std::string allowed;
    for (const auto& [n, e] : options) allowed += (allowed.empty() ? "" : ", ") + n;
    throw SchemaError(at(key) + ": unknown value '" + name + "' (allowed: " + allowed + ")");
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw SchemaError(at(key) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const std::vector<std::pair<std::string, Kind>> kKinds{
    {"oned_ex1", Kind::oned_ex1}, {"oned_ex2", Kind::oned_ex2}, {"dense", Kind::dense}, {"l2h", Kind::l2h}};
const std::vector<std::pair<std::string, SkipMode>> kSkips{{"add", SkipMode::add}, {"concat", SkipMode::concat}};
const std::vector<std::pair<std::string, Coupling>> kCouplings{{"implicit", Coupling::implicit},
                                                               {"explicit", Coupling::explicit_feedback}};
const std::vector<std::pair<std::string, ops::Activation>> kActivations{
    {"relu", ops::Activation::relu}, {"tanh", ops::Activation::tanh}, {"identity", ops::Activation::identity}};
const std::vector<std::pair<std::string, dropblock::Scheduler::Kind>> kSchedulers{
    {"none", dropblock::Scheduler::Kind::none}, {"linear", dropblock::Scheduler::Kind::linear}};
const std::vector<std::pair<std::string, training::InitScheme>> kInits{
    {"uniform_fanprod", training::InitScheme::uniform_fanprod}, {"xavier_normal", training::InitScheme::xavier_normal}};
const std::vector<std::pair<std::string, training::FanprodBound>> kBounds{
    {"literal", training::FanprodBound::literal}, {"inverse_sqrt", training::FanprodBound::inverse_sqrt}};
const std::vector<std::pair<std::string, Persist>> kPersist{
    {"none", Persist::none}, {"centerline", Persist::centerline}, {"full", Persist::full}};
const std::vector<std::pair<std::string, datagen::Subsampling>> kSubsampling{
    {"stride", datagen::Subsampling::stride}, {"block_average", datagen::Subsampling::block_average}};

template <class E>
std::string name_of(E value, const std::vector<std::pair<std::string, E>>& options) {
  for (const auto& [n, e] : options)
    if (e == value) return n;
  return "?";
}

bool is_oned(Kind k) { return k == Kind::oned_ex1 || k == Kind::oned_ex2; }

void read_data(Reader& r, ExperimentConfig& c) {
  const auto* d = r.find("data");
  if (!d) return;
  Reader in(*d, r.at("data"));
  if (is_oned(c.kind)) {
    std::vector<double> lf, hf;
    if (in.find("lf_x")) {
      in.read_list("lf_x", lf);
      c.oned.lf_x = lf;
    }
    if (in.find("hf_x")) {
      in.read_list("hf_x", hf);
      c.oned.hf_x = hf;
    }
  } else {
    auto& p = c.poiseuille;
    in.read("n_samples", p.n_samples);
    in.read("grid", p.grid);
    in.read_array("r_range", p.r_range);
    in.read_array("v_range", p.v_range);
    in.read("mu", p.props.mu);
    in.read("length", p.props.length);
    in.read("concentration_noise", p.concentration_noise);
    in.read("lf_noise_ratio", p.lf_noise_ratio);
    in.read("lf3_bias_ratio", p.lf3_bias_ratio);
    in.read_enum("subsampling", p.subsampling, kSubsampling);
    in.read_array("split_probs", p.split_probs);
    in.read("hf_subset", p.hf_subset);
    in.read("seed", p.seed);
    in.read("split_seed", p.split_seed);
  }
  in.finish();
}

void read_network(Reader& r, NetworkSpec& n) {
  const auto* j = r.find("network");
  if (!j) return;
  Reader in(*j, r.at("network"));
  in.read_enum("skip", n.skip_mode, kSkips);
  in.read_enum("coupling", n.coupling, kCouplings);
  in.read("base_filters", n.base_filters);
  in.read_enum("activation", n.activation, kActivations);
  in.read("bn_momentum", n.bn_momentum);
  in.read("bn_epsilon", n.bn_epsilon);
  if (const auto* d = in.find("dropblock")) {
    Reader db(*d, in.at("dropblock"));
    auto& s = n.dropblock.spec;
    db.read("p", s.p);
    db.read("block_size", s.block_size);
    db.read("shared", s.shared_across_channels);
    db.read("rescale", s.rescale);
    if (const auto* sch = db.find("scheduler")) {
      Reader sr(*sch, db.at("scheduler"));
      sr.read_enum("kind", s.scheduler.kind, kSchedulers);
      sr.read("ramp_epochs", s.scheduler.ramp_epochs);
      sr.finish();
    }
    db.read_list("sites", n.dropblock.sites);
    db.read_list("block_sizes", n.dropblock.block_sizes);
    db.finish();
  }
  in.finish();
}

void read_train(Reader& r, training::TrainConfig& t) {
  const auto* j = r.find("train");
  if (!j) return;
  Reader in(*j, r.at("train"));
  in.read("lr", t.lr);
  in.read("lr_step", t.lr_step);
  in.read("lr_decay", t.lr_decay);
  in.read("batch_size", t.batch_size);
  in.read("epochs", t.epochs);
  in.read_enum("init", t.init, kInits);
  in.read_enum("fanprod_bound", t.fanprod_bound, kBounds);
  in.read_list("loss_weights", t.loss_weights);
  in.read("weight_decay", t.weight_decay);
  in.read("batch_norm_eval", t.batch_norm_eval);
  in.finish();
}

void read_eval(Reader& r, EvalConfig& e) {
  const auto* j = r.find("eval");
  if (!j) return;
  Reader in(*j, r.at("eval"));
  in.read("n_replicas", e.n_replicas);
  in.read("replicas_per_pass", e.replicas_per_pass);
  in.read_enum("persist", e.persist, kPersist);
  in.finish();
}

void check_semantics(const ExperimentConfig& c) {
  const auto fail = [](const std::string& m) { throw SchemaError(m); };
  if (is_oned(c.kind)) {
    if (c.dataset != "MF" && c.dataset != "HF") fail("dataset: 1D kinds accept \"MF\" or \"HF\"");
  } else if (!uq::CostLedger::standard().contains(c.dataset)) {
    fail("dataset: expected \"MF 32/116\", \"HF 32/0\" or \"HF 116/0\"");
  }
  if (!(c.train.lr > 0.0)) fail("train.lr: must be positive");
  if (c.train.lr_step < 1) fail("train.lr_step: must be >= 1");
  if (c.train.batch_size < 1) fail("train.batch_size: must be >= 1");
  const std::size_t outputs = is_oned(c.kind) ? 2 : 4;
  if (c.train.loss_weights.size() != outputs) {
    fail("train.loss_weights: expected " + std::to_string(outputs) + " entries");
  }
  double total = 0.0;
  for (double w : c.train.loss_weights) total += w;
  if (std::abs(total - 1.0) > 1e-9) fail("train.loss_weights: must sum to 1");
  const auto& s = c.network.dropblock.spec;
  if (!(s.p >= 0.0 && s.p <= 1.0)) fail("network.dropblock.p: must lie in [0,1]");
  if (s.block_size < 1) fail("network.dropblock.block_size: must be >= 1");
  if (c.eval.n_replicas < 2) fail("eval.n_replicas: must be >= 2");
  const auto sum = c.poiseuille.split_probs[0] + c.poiseuille.split_probs[1] + c.poiseuille.split_probs[2];
  if (std::abs(sum - 1.0) > 1e-9) fail("data.split_probs: must sum to 1");
}

// ---------------------------------------------------------------------------
// Datasets to examples

training::Target full_target(const std::vector<double>& values, const std::vector<double>& mask) {
  return {values, mask};
}

training::Example poiseuille_example(const datagen::PoiseuilleSample& s, Kind kind, bool with_lf, bool with_hf) {
  training::Example e;
  if (kind == Kind::dense) {
    for (const auto* f : {&s.concentration, &s.velocity_x, &s.velocity_y})
      e.input.insert(e.input.end(), f->values.begin(), f->values.end());
  } else {
    e.input = {s.r, s.v_max};
  }
  for (std::size_t level = 0; level < 3; ++level) {
    if (with_lf) {
      e.targets.push_back(full_target(s.lf.pressure[level].values, s.lf.fluid_mask[level].values));
    } else {
      e.targets.emplace_back();
    }
  }
  if (with_hf) {
    e.targets.push_back(full_target(s.pressure_hf.values, s.fluid_mask.values));
  } else {
    e.targets.emplace_back();
  }
  return e;
}

training::ExampleSet empty_poiseuille_set(Kind kind, std::size_t grid) {
  training::ExampleSet set;
  set.input_shape = kind == Kind::dense ? Shape{3, grid, grid} : Shape{2};
  for (std::size_t e : {grid / 8, grid / 4, grid / 2, grid}) set.output_shapes.push_back({1, e, e});
  return set;
}

// ---------------------------------------------------------------------------
// Files

void write_json(const fs::path& file, const json& j) {
  std::ofstream os(file);
  if (!os) throw FormatError("cannot write " + file.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw MissingArtifactError("missing " + file.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw MissingArtifactError("unreadable " + file.string() + ": " + e.what());
  }
}

std::ofstream open_csv(const fs::path& file) {
  std::ofstream os(file);
  if (!os) throw FormatError("cannot write " + file.string());
  os.precision(17);
  return os;
}

std::vector<double> slice(const std::vector<double>& v, std::size_t index, std::size_t n) {
  const auto begin = v.begin() + static_cast<std::ptrdiff_t>(index * n);
  return {begin, begin + static_cast<std::ptrdiff_t>(n)};
}

double mean_squared(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

std::uint64_t eval_seed(const ExperimentConfig& cfg) { return Rng::mix(cfg.seed, 0xe7a1); }

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double r2 = 0.0;
  json metrics = json::object();
};

EvalResult evaluate_poiseuille(Network& net, const datagen::PoiseuilleDataset& data, const Splits& splits,
                               const ExperimentConfig& cfg, const fs::path& dir) {
  const std::size_t g = cfg.poiseuille.grid;
  const std::size_t plane = g * g;
  const auto test_ids = data.splits.ids(datagen::Split::test);
  const std::size_t n_test = splits.test.size();
  std::vector<double> mean, stdev, p5, p95, truth, mask, centerline_stack;
  std::vector<uq::ReplicaStack> stacks;
  stacks.reserve(n_test);
  const auto seed = eval_seed(cfg);
  uq::EnsembleOptions opts;
  opts.replicas_per_pass = cfg.eval.replicas_per_pass;
  for (std::size_t s = 0; s < n_test; ++s) {
    auto stack = uq::mc_ensemble(net, splits.test.batch_input({s}), cfg.eval.n_replicas, Rng::mix(seed, s), opts);
    const auto stats = uq::ensemble_stats(stack);
    const auto& sample = data.samples[test_ids[s]];
    mean.insert(mean.end(), stats.mean.begin(), stats.mean.end());
    stdev.insert(stdev.end(), stats.std.begin(), stats.std.end());
    p5.insert(p5.end(), stats.p5.begin(), stats.p5.end());
    p95.insert(p95.end(), stats.p95.begin(), stats.p95.end());
    truth.insert(truth.end(), sample.pressure_hf.values.begin(), sample.pressure_hf.values.end());
    mask.insert(mask.end(), sample.fluid_mask.values.begin(), sample.fluid_mask.values.end());
    stacks.push_back(std::move(stack));
  }
  EvalResult out;
  out.r2 = uq::r_squared(mean, truth, mask);

  const fs::path eval_dir = dir / "eval";
  fs::create_directories(eval_dir);
  const Shape field_shape{n_test, g, g};
  save_tensor(Tensor::from(field_shape, mean), eval_dir / "hf_mean");
  save_tensor(Tensor::from(field_shape, stdev), eval_dir / "hf_std");
  save_tensor(Tensor::from(field_shape, p5), eval_dir / "hf_p5");
  save_tensor(Tensor::from(field_shape, p95), eval_dir / "hf_p95");
  save_tensor(Tensor::from(field_shape, truth), eval_dir / "hf_truth");
  save_tensor(Tensor::from(field_shape, mask), eval_dir / "fluid_mask");

  // Centerline curves for every test sample.
  auto csv = open_csv(eval_dir / "centerline.csv");
  csv << "# x: axial position in units of the cylinder length; pressure normalized\n";
  csv << "sample,dataset_index,x,truth,mean,p5,p95\n";
  std::vector<std::vector<double>> truths, masks;
  for (std::size_t s = 0; s < n_test; ++s) {
    const auto m = slice(mask, s, plane);
    const auto row = uq::centerline_row(m, g, g);
    for (std::size_t j = 0; j < g; ++j) {
      const std::size_t k = s * plane + row * g + j;
      const double x = (static_cast<double>(j) + 0.5) * cfg.poiseuille.props.length / static_cast<double>(g);
      csv << s << ',' << test_ids[s] << ',' << x << ',' << truth[k] << ',' << mean[k] << ',' << p5[k] << ','
          << p95[k] << '\n';
    }
    truths.push_back(slice(truth, s, plane));
    masks.push_back(m);
  }
  const auto loc = uq::location_stats(stacks, truths, masks, g, g);
  uq::write_location_csv(eval_dir / "location_stats.csv", loc);

  if (cfg.eval.persist == Persist::centerline) {
    // [replica, sample, location]
    std::vector<double> flat;
    for (std::size_t r = 0; r < cfg.eval.n_replicas; ++r) {
      for (std::size_t s = 0; s < n_test; ++s) {
        const auto row = uq::centerline_row(masks[s], g, g);
        const auto begin = stacks[s].values[r].begin() + static_cast<std::ptrdiff_t>(row * g);
        flat.insert(flat.end(), begin, begin + static_cast<std::ptrdiff_t>(g));
      }
    }
    save_tensor(Tensor::from({cfg.eval.n_replicas, n_test, g}, std::move(flat)), eval_dir / "centerline_stack");
  } else if (cfg.eval.persist == Persist::full) {
    for (std::size_t s = 0; s < n_test; ++s) {
      uq::save_stack(stacks[s], eval_dir / ("stack_" + std::to_string(s)));
    }
  }
  double mean_std = 0.0, count = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 0.5) {
      mean_std += stdev[i];
      count += 1.0;
    }
  }
  out.metrics["test_samples"] = n_test;
  out.metrics["mean_std_fluid"] = mean_std / count;
  out.metrics["mean_std_centerline"] = std::accumulate(loc.mean_std.begin(), loc.mean_std.end(), 0.0) /
                                       static_cast<double>(loc.mean_std.size());
  return out;
}

EvalResult evaluate_oned(Network& net, const datagen::OneDDataset& data, const Splits& splits,
                         const ExperimentConfig& cfg, const fs::path& dir) {
  uq::EnsembleOptions opts;
  opts.replicas_per_pass = cfg.eval.replicas_per_pass;
  const auto input = splits.test.batch_input({0});
  const auto seed = eval_seed(cfg);
  opts.output = 0;
  const auto& grid_mask = splits.test.examples[0].targets[1]->mask;
  const auto on_grid = [&](uq::ReplicaStack stack) {
    for (auto& r : stack.values) {
      std::vector<double> kept;
      for (std::size_t i = 0; i < r.size(); ++i)
        if (grid_mask[i] > 0.5) kept.push_back(r[i]);
      r = std::move(kept);
    }
    stack.shape = {1, 1, data.test_x.size()};
    return stack;
  };
  const auto lf = uq::ensemble_stats(on_grid(uq::mc_ensemble(net, input, cfg.eval.n_replicas, seed, opts)));
  opts.output = 1;
  const auto hf_stack = on_grid(uq::mc_ensemble(net, input, cfg.eval.n_replicas, seed, opts));
  const auto hf = uq::ensemble_stats(hf_stack);
  EvalResult out;
  const std::vector<double> ones(data.test_x.size(), 1.0);
  out.r2 = uq::r_squared(hf.mean, data.test_hf, ones);
  out.metrics["test_mse_hf"] = mean_squared(hf.mean, data.test_hf);
  out.metrics["test_mse_lf"] = mean_squared(lf.mean, data.test_lf);

  const fs::path eval_dir = dir / "eval";
  fs::create_directories(eval_dir);
  auto csv = open_csv(eval_dir / "oned.csv");
  csv << "# values rescaled to [0,1] with the training min/max of each fidelity\n";
  csv << "x,truth_lf,truth_hf,lf_mean,lf_p5,lf_p95,hf_mean,hf_std,hf_p5,hf_p95\n";
  for (std::size_t i = 0; i < data.test_x.size(); ++i) {
    csv << data.test_x[i] << ',' << data.test_lf[i] << ',' << data.test_hf[i] << ',' << lf.mean[i] << ','
        << lf.p5[i] << ',' << lf.p95[i] << ',' << hf.mean[i] << ',' << hf.std[i] << ',' << hf.p5[i] << ','
        << hf.p95[i] << '\n';
  }
  if (cfg.eval.persist != Persist::none) uq::save_stack(hf_stack, eval_dir / "hf_stack");
  return out;
}

// ---------------------------------------------------------------------------
// Run discovery for reports

struct RunArtifacts {
  fs::path dir;
  json config;
  json summary;
};

std::vector<RunArtifacts> find_runs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingArtifactError("no such directory: " + dir.string());
  std::vector<fs::path> dirs;
  if (fs::exists(dir / "summary.json")) dirs.push_back(dir);
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "summary.json" && entry.path().parent_path() != dir) {
      dirs.push_back(entry.path().parent_path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<RunArtifacts> runs;
  for (const auto& d : dirs) runs.push_back({d, read_json(d / "config.json"), read_json(d / "summary.json")});
  if (runs.empty()) throw MissingArtifactError("no completed runs under " + dir.string());
  return runs;
}

std::string run_label(const RunArtifacts& r, const fs::path& root) {
  auto rel = fs::relative(r.dir, root).generic_string();
  return rel == "." ? r.dir.filename().string() : rel;
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& file, std::string& header) {
  std::ifstream is(file);
  if (!is) throw MissingArtifactError("missing " + file.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  header.clear();
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header.empty()) {
      header = line;
      continue;
    }
    rows.emplace_back();
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) rows.back().push_back(cell);
  }
  return rows;
}

// Prefixes every row of each run's CSV with the run label.
fs::path gather_csv(const std::vector<RunArtifacts>& runs, const fs::path& root, const fs::path& relative,
                    const fs::path& out_file, const std::string& note) {
  auto os = open_csv(out_file);
  if (!note.empty()) os << "# " << note << '\n';
  bool header_written = false;
  for (const auto& r : runs) {
    std::string header;
    const auto rows = read_csv_rows(r.dir / relative, header);
    if (!header_written) {
      os << "run,dataset," << header << '\n';
      header_written = true;
    }
    const auto label = run_label(r, root);
    const auto dataset = r.config.value("dataset", "");
    for (const auto& row : rows) {
      os << label << ',' << dataset;
      for (const auto& c : row) os << ',' << c;
      os << '\n';
    }
  }
  return out_file;
}

std::vector<RunArtifacts> runs_of_kind(const fs::path& dir, const std::set<std::string>& kinds) {
  std::vector<RunArtifacts> selected;
  for (auto& r : find_runs(dir))
    if (kinds.count(r.config.value("kind", ""))) selected.push_back(std::move(r));
  if (selected.empty()) throw MissingArtifactError("no matching runs under " + dir.string());
  return selected;
}

}  // namespace

std::string to_string(Kind k) { return name_of(k, kKinds); }

ExperimentConfig defaults(Kind kind) {
  ExperimentConfig c;
  c.kind = kind;
  switch (kind) {
    case Kind::oned_ex1:
    case Kind::oned_ex2:
      c.dataset = "MF";
      c.network = NetworkSpec::oned_default();
      c.network.dropblock.sites = kind == Kind::oned_ex1 ? std::vector<std::size_t>{3, 4, 5, 6, 7, 8}
                                                         : std::vector<std::size_t>{5, 6, 7, 8};
      c.train = training::TrainConfig::oned_default();
      break;
    case Kind::dense:
      c.network = NetworkSpec::dense_default();
      c.train = training::TrainConfig::dense_default();
      break;
    case Kind::l2h:
      c.network = NetworkSpec::l2h_default();
      c.train = training::TrainConfig::l2h_default();
      break;
  }
  return c;
}

ExperimentConfig parse_config(const json& j) {
  Reader root(j, "");
  Kind kind = Kind::dense;
  if (!root.find("kind")) throw SchemaError("kind: required");
  root.read_enum("kind", kind, kKinds);
  auto c = defaults(kind);
  root.read("seed", c.seed);
  root.read("dataset", c.dataset);
  read_data(root, c);
  read_network(root, c.network);
  read_train(root, c.train);
  read_eval(root, c.eval);
  if (const auto* s = root.find("sweep")) {
    if (!s->is_object()) throw SchemaError("sweep: expected an object of path -> list");
    for (const auto& [key, value] : s->items()) {
      if (!value.is_array()) throw SchemaError("sweep." + key + ": expected a list of values");
    }
    c.sweep = *s;
  }
  root.finish();
  c.train.seed = c.seed;
  check_semantics(c);
  return c;
}

ExperimentConfig load_config(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw SchemaError("config: cannot open " + file.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config: invalid JSON: ") + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["kind"] = to_string(c.kind);
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  if (is_oned(c.kind)) {
    json d = json::object();
    if (c.oned.lf_x) d["lf_x"] = *c.oned.lf_x;
    if (c.oned.hf_x) d["hf_x"] = *c.oned.hf_x;
    j["data"] = d;
  } else {
    const auto& p = c.poiseuille;
    j["data"] = {{"n_samples", p.n_samples},
                 {"grid", p.grid},
                 {"r_range", p.r_range},
                 {"v_range", p.v_range},
                 {"mu", p.props.mu},
                 {"length", p.props.length},
                 {"concentration_noise", p.concentration_noise},
                 {"lf_noise_ratio", p.lf_noise_ratio},
                 {"lf3_bias_ratio", p.lf3_bias_ratio},
                 {"subsampling", name_of(p.subsampling, kSubsampling)},
                 {"split_probs", p.split_probs},
                 {"hf_subset", p.hf_subset},
                 {"seed", p.seed},
                 {"split_seed", p.split_seed}};
  }
  const auto& n = c.network;
  const auto& s = n.dropblock.spec;
  j["network"] = {{"skip", name_of(n.skip_mode, kSkips)},
                  {"coupling", name_of(n.coupling, kCouplings)},
                  {"base_filters", n.base_filters},
                  {"activation", name_of(n.activation, kActivations)},
                  {"bn_momentum", n.bn_momentum},
                  {"bn_epsilon", n.bn_epsilon},
                  {"dropblock",
                   {{"p", s.p},
                    {"block_size", s.block_size},
                    {"shared", s.shared_across_channels},
                    {"rescale", s.rescale},
                    {"scheduler", {{"kind", name_of(s.scheduler.kind, kSchedulers)}, {"ramp_epochs", s.scheduler.ramp_epochs}}},
                    {"sites", n.dropblock.sites},
                    {"block_sizes", n.dropblock.block_sizes}}}};
  const auto& t = c.train;
  j["train"] = {{"lr", t.lr},
                {"lr_step", t.lr_step},
                {"lr_decay", t.lr_decay},
                {"batch_size", t.batch_size},
                {"epochs", t.epochs},
                {"init", name_of(t.init, kInits)},
                {"fanprod_bound", name_of(t.fanprod_bound, kBounds)},
                {"loss_weights", t.loss_weights},
                {"weight_decay", t.weight_decay},
                {"batch_norm_eval", t.batch_norm_eval}};
  j["eval"] = {{"n_replicas", c.eval.n_replicas},
               {"replicas_per_pass", c.eval.replicas_per_pass},
               {"persist", name_of(c.eval.persist, kPersist)}};
  if (!c.sweep.empty()) j["sweep"] = c.sweep;
  return j;
}

Splits poiseuille_examples(const datagen::PoiseuilleDataset& data, const ExperimentConfig& cfg) {
  Splits out;
  const std::size_t g = data.config.grid;
  out.train = out.val = out.test = empty_poiseuille_set(cfg.kind, g);
  const auto train_ids = data.splits.ids(datagen::Split::train);
  const std::set<std::size_t> subset(data.hf_subset_ids.begin(), data.hf_subset_ids.end());
  for (auto id : train_ids) {
    const bool in_subset = subset.count(id) != 0;
    if (cfg.dataset == "MF 32/116") {
      out.train.examples.push_back(poiseuille_example(data.samples[id], cfg.kind, true, in_subset));
    } else if (cfg.dataset == "HF 116/0" || in_subset) {
      out.train.examples.push_back(poiseuille_example(data.samples[id], cfg.kind, false, true));
    }
  }
  for (auto id : data.splits.ids(datagen::Split::val))
    out.val.examples.push_back(poiseuille_example(data.samples[id], cfg.kind, false, true));
  for (auto id : data.splits.ids(datagen::Split::test))
    out.test.examples.push_back(poiseuille_example(data.samples[id], cfg.kind, false, true));
  return out;
}

// Input lattice: kOnedRefine slots per test-grid step, plus kOnedMargin test
// steps of padding on each side of [0, 1].
constexpr std::size_t kOnedRefine = 4;
constexpr std::size_t kOnedMargin = 8;

Splits oned_examples(const datagen::OneDDataset& data, const ExperimentConfig& cfg) {
  Splits out;
  const bool mf = cfg.multifidelity();
  // Training and prediction share one uniformly spaced input sequence, so the
  // convolutions see the same neighbourhoods everywhere. Each location takes
  // the nearest lattice slot and keeps its exact x as the input value. The
  // margin keeps the end points away from the zero padding; otherwise the
  // padded edge alone identifies them and gets memorized.
  if (data.test_x.size() < 2) throw datagen::ValidationError("1D: test grid needs at least two points");
  const double step = (data.test_x.back() - data.test_x.front()) / static_cast<double>(data.test_x.size() - 1);
  const double spacing = step / static_cast<double>(kOnedRefine);
  const std::size_t pad = kOnedMargin * kOnedRefine;
  const std::size_t inner = (data.test_x.size() - 1) * kOnedRefine + 1;
  const std::size_t L = inner + 2 * pad;
  std::vector<double> xs(L);
  for (std::size_t k = 0; k < L; ++k) xs[k] = (static_cast<double>(k) - static_cast<double>(pad)) * spacing;
  auto slot_of = [&](double x) {
    return pad + static_cast<std::size_t>(std::llround((x - data.test_x.front()) / spacing));
  };
  for (std::size_t i = 0; i < data.test_x.size(); ++i) xs[pad + i * kOnedRefine] = data.test_x[i];
  std::vector<bool> taken(L, false);
  auto place = [&](const std::vector<double>& px) {
    for (double x : px) {
      const auto k = slot_of(x);
      if (taken[k] && xs[k] != x) {
        throw datagen::ValidationError("1D: locations " + std::to_string(xs[k]) + " and " + std::to_string(x) +
                                       " are closer than the input resolution " + std::to_string(spacing));
      }
      taken[k] = true;
      xs[k] = x;
    }
  };
  place(data.hf_x);
  if (mf) place(data.lf_x);

  training::ExampleSet set;
  set.input_shape = {1, L};
  set.output_shapes = {{1, L}, {1, L}};
  auto target_for = [&](const std::vector<double>& px, const std::vector<double>& py) {
    training::Target t{std::vector<double>(L, 0.0), std::vector<double>(L, 0.0)};
    for (std::size_t i = 0; i < px.size(); ++i) {
      const auto k = slot_of(px[i]);
      t.values[k] = py[i];
      t.mask[k] = 1.0;
    }
    return t;
  };
  training::Example e;
  e.input = xs;
  if (mf) {
    e.targets.push_back(target_for(data.lf_x, data.lf_y));
  } else {
    e.targets.emplace_back();
  }
  e.targets.push_back(target_for(data.hf_x, data.hf_y));
  set.examples.push_back(e);
  out.train = set;
  out.val = set;

  out.test = set;
  out.test.examples[0].targets = {target_for(data.test_x, data.test_lf), target_for(data.test_x, data.test_hf)};
  return out;
}

json to_json(const Summary& s) {
  json j;
  j["r2"] = s.r2;
  j["normalized_r2"] = s.normalized_r2;
  j["cost"] = s.cost;
  j["best_val_loss"] = s.best_val_loss;
  return j;
}

Summary run(const ExperimentConfig& input_cfg, const fs::path& out_dir) {
  ExperimentConfig cfg = input_cfg;
  cfg.train.seed = cfg.seed;
  if (!cfg.multifidelity()) {
    // HF-only training sees a single fidelity.
    std::fill(cfg.train.loss_weights.begin(), cfg.train.loss_weights.end(), 0.0);
    cfg.train.loss_weights.back() = 1.0;
  }
  fs::create_directories(out_dir);
  write_json(out_dir / "config.json", to_json(input_cfg));

  std::optional<datagen::PoiseuilleDataset> poiseuille;
  std::optional<datagen::OneDDataset> oned;
  Splits splits;
  std::uint64_t cost = 0;
  if (is_oned(cfg.kind)) {
    oned = datagen::build_1d_dataset(cfg.kind == Kind::oned_ex1 ? 1 : 2, cfg.oned);
    splits = oned_examples(*oned, cfg);
    fs::create_directories(out_dir / "data");
    write_json(out_dir / "data" / "points.json", {{"example", oned->example},
                                                  {"lf_x", oned->lf_x},
                                                  {"lf_y", oned->lf_y},
                                                  {"hf_x", oned->hf_x},
                                                  {"hf_y", oned->hf_y},
                                                  {"lf_scale", {oned->lf_scale.min, oned->lf_scale.max}},
                                                  {"hf_scale", {oned->hf_scale.min, oned->hf_scale.max}}});
    cost = oned->hf_x.size() + (cfg.multifidelity() ? oned->lf_x.size() : 0);
  } else {
    poiseuille = datagen::build_poiseuille_dataset(cfg.poiseuille);
    splits = poiseuille_examples(*poiseuille, cfg);
    datagen::save_dataset(*poiseuille, out_dir / "data");
    cost = uq::CostLedger::standard().pixel_cost(cfg.dataset);
  }

  NetworkSpec spec = cfg.network;
  spec.family = is_oned(cfg.kind) ? Family::oned_mf : cfg.kind == Kind::dense ? Family::dense_unet : Family::decoder_l2h;
  auto net = build_network(spec);
  training::TrainResult result;
  try {
    result = training::train(*net, splits.train, splits.val, cfg.train);
  } catch (const training::DivergenceError&) {
    training::save_checkpoint(*net, out_dir / "checkpoint");
    throw;
  }
  training::write_history_csv(out_dir / "history.csv", result, net->output_count());
  training::save_checkpoint(*net, out_dir / "checkpoint");

  const auto eval = oned ? evaluate_oned(*net, *oned, splits, cfg, out_dir)
                         : evaluate_poiseuille(*net, *poiseuille, splits, cfg, out_dir);
  Summary s;
  s.r2 = eval.r2;
  s.cost = cost;
  s.normalized_r2 = eval.r2 / static_cast<double>(cost);
  s.best_val_loss = result.best_val_loss;
  auto metrics = eval.metrics;
  metrics["best_epoch"] = result.best_epoch ? json(*result.best_epoch) : json(nullptr);
  write_json(out_dir / "eval" / "metrics.json", metrics);
  write_json(out_dir / "summary.json", to_json(s));
  return s;
}

std::vector<SweepRow> sweep(const json& base, const fs::path& out_dir) {
  const auto parsed = parse_config(base);
  const auto& grid = parsed.sweep;
  if (grid.empty()) throw SchemaError("sweep: empty grid");
  std::vector<std::string> keys;
  std::vector<json> values;
  for (const auto& [key, list] : grid.items()) {
    if (list.empty()) throw SchemaError("sweep." + key + ": empty grid");
    keys.push_back(key);
    values.push_back(list);
  }
  std::size_t total = 1;
  for (const auto& v : values) total *= v.size();

  std::vector<SweepRow> rows;
  for (std::size_t index = 0; index < total; ++index) {
    json cfg_json = base;
    cfg_json.erase("sweep");
    SweepRow row;
    row.index = index;
    row.values = json::object();
    std::size_t rest = index;
    for (std::size_t k = keys.size(); k-- > 0;) {
      const auto& choice = values[k][rest % values[k].size()];
      rest /= values[k].size();
      row.values[keys[k]] = choice;
      json* node = &cfg_json;
      std::stringstream path(keys[k]);
      std::string part;
      std::vector<std::string> parts;
      while (std::getline(path, part, '.')) parts.push_back(part);
      for (std::size_t p = 0; p + 1 < parts.size(); ++p) {
        if (!node->contains(parts[p])) (*node)[parts[p]] = json::object();
        node = &(*node)[parts[p]];
      }
      (*node)[parts.back()] = choice;
    }
    char name[32];
    std::snprintf(name, sizeof name, "run_%03zu", index);
    row.dir = out_dir / name;
    const auto cfg = parse_config(cfg_json);
    try {
      row.best_val_loss = run(cfg, row.dir).best_val_loss;
    } catch (const training::DivergenceError&) {
      row.best_val_loss = std::numeric_limits<double>::infinity();
    }
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const SweepRow& a, const SweepRow& b) { return a.best_val_loss < b.best_val_loss; });
  fs::create_directories(out_dir);
  auto os = open_csv(out_dir / "ranking.csv");
  os << "# ranked by best validation loss (DropBlocks active)\n";
  os << "rank,run";
  for (const auto& k : keys) os << ',' << k;
  os << ",best_val_loss\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    os << r + 1 << ',' << rows[r].dir.filename().string();
    for (const auto& k : keys) os << ',' << rows[r].values[k].dump();
    os << ',' << rows[r].best_val_loss << '\n';
  }
  return rows;
}

const std::vector<std::string> kExhibits{"fig6", "fig7", "fig9", "fig11", "fig13", "table1", "table2", "table5"};

double expected_drop_ratio(double p, std::size_t feature_extent, std::size_t block_size, std::size_t dims) {
  const double gamma = dropblock::compute_gamma(p, feature_extent, block_size, dims);
  const std::size_t F = feature_extent, b = block_size;
  // Number of seed positions whose block covers index i along one axis.
  std::vector<double> cover(F);
  for (std::size_t i = 0; i < F; ++i) {
    const std::size_t lo = i + 1 >= b ? i + 1 - b : 0;
    const std::size_t hi = std::min(i, F - b);
    cover[i] = static_cast<double>(hi - lo + 1);
  }
  double total = 0.0;
  if (dims == 1) {
    for (double c : cover) total += 1.0 - std::pow(1.0 - gamma, c);
    return total / static_cast<double>(F);
  }
  for (double ci : cover)
    for (double cj : cover) total += 1.0 - std::pow(1.0 - gamma, ci * cj);
  return total / static_cast<double>(F * F);
}

std::vector<DropRatioRow> drop_ratio_table(std::size_t realizations, std::uint64_t seed) {
  const std::vector<std::tuple<std::size_t, double, std::size_t>> cases{
      {3, 0.2, 3},  {3, 0.9, 3},  {3, 0.2, 4}, {3, 0.9, 4},  {3, 0.2, 8}, {3, 0.9, 8},
      {3, 0.2, 16}, {3, 0.9, 16}, {5, 0.2, 8}, {5, 0.9, 8},  {5, 0.2, 16}, {5, 0.9, 16},
      {7, 0.2, 8},  {7, 0.9, 8},  {7, 0.2, 16}, {7, 0.9, 16}};
  std::vector<DropRatioRow> rows;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto [b, p, F] = cases[i];
    Rng rng = Rng::derive(seed, i);
    rows.push_back({b, p, F, dropblock::compute_gamma(p, F, b, 1),
                    dropblock::empirical_drop_ratio(rng, p, F, b, 1, 8, realizations), expected_drop_ratio(p, F, b, 1)});
  }
  return rows;
}

fs::path report(const fs::path& dir, const std::string& exhibit) {
  if (std::find(kExhibits.begin(), kExhibits.end(), exhibit) == kExhibits.end()) {
    throw SchemaError("--exhibit: unknown exhibit '" + exhibit + "'");
  }
  if (exhibit == "table5") {
    fs::create_directories(dir);
    const auto file = dir / "table5.csv";
    auto os = open_csv(file);
    os << "# 1D feature maps, 8 channels, independent masks, 1000 realizations; ratios are fractions of entries\n";
    os << "block_size,p,feature_size,gamma,actual_drop_ratio,expected_drop_ratio\n";
    for (const auto& r : drop_ratio_table(1000, 0)) {
      os << r.block_size << ',' << r.p << ',' << r.feature_extent << ',' << r.gamma << ',' << r.empirical << ','
         << r.expected << '\n';
    }
    return file;
  }
  if (exhibit == "fig6" || exhibit == "fig7") {
    const auto runs = runs_of_kind(dir, {exhibit == "fig6" ? "oned_ex1" : "oned_ex2"});
    return gather_csv(runs, dir, fs::path("eval") / "oned.csv", dir / (exhibit + ".csv"),
                      "values rescaled to [0,1] per fidelity; p5/p95 are ensemble percentiles");
  }
  if (exhibit == "fig9") {
    return gather_csv(find_runs(dir), dir, "history.csv", dir / "fig9.csv",
                      "losses are fluid-masked mean squared errors of normalized pressure");
  }
  if (exhibit == "fig11") {
    return gather_csv(runs_of_kind(dir, {"dense", "l2h"}), dir, fs::path("eval") / "centerline.csv",
                      dir / "fig11.csv", "x in units of the cylinder length; normalized pressure");
  }
  if (exhibit == "fig13") {
    return gather_csv(runs_of_kind(dir, {"dense", "l2h"}), dir, fs::path("eval") / "location_stats.csv",
                      dir / "fig13.csv", "location is the axial pixel index; population std");
  }
  // table1 / table2
  const auto runs = runs_of_kind(dir, {"dense", "l2h"});
  const auto file = dir / (exhibit + ".csv");
  auto os = open_csv(file);
  os << "# cost in training pixels; normalized_r2 = r2 / cost\n";
  os << "run,kind,bias_ratio,skip,network_type,feedback,hf_lf,r2,normalized_r2,cost\n";
  for (const auto& r : runs) {
    const auto& c = r.config;
    const double bias = c.at("data").value("lf3_bias_ratio", 0.0);
    const auto dataset = c.value("dataset", "");
    const bool mf = dataset.rfind("MF", 0) == 0;
    if (exhibit == "table2" && !mf) continue;
    os << run_label(r, dir) << ',' << c.value("kind", "") << ',' << bias << ','
       << c.at("network").value("skip", "") << ',' << (mf ? "MF" : "HF") << ','
       << (mf ? c.at("network").value("coupling", "") : "-") << ',' << dataset.substr(dataset.find(' ') + 1) << ','
       << r.summary.at("r2").get<double>() << ',' << r.summary.at("normalized_r2").get<double>() << ','
       << r.summary.at("cost").get<std::uint64_t>() << '\n';
  }
  return file;
}

}  // namespace mfconv::experiment
