#include "mfconv/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "mfconv/tensor_io.hpp"

namespace mfconv::training {
namespace {

std::size_t kernel_volume(const Shape& s) {
  std::size_t v = 1;
  for (std::size_t i = 2; i < s.size(); ++i) v *= s[i];
  return v;
}

std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

void shuffle(std::vector<std::size_t>& ids, Rng& rng) {
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
}

bool finite(double x) { return std::isfinite(x); }

}  // namespace

NonFiniteGradientError::NonFiniteGradientError(const std::string& parameter, std::size_t epoch)
    : DivergenceError("non-finite gradient in parameter '" + parameter + "' at epoch " + std::to_string(epoch), epoch),
      parameter_(parameter) {}

void TrainConfig::validate(std::size_t outputs) const {
  if (!(lr > 0.0)) throw ContractError("train config: lr must be positive");
  if (lr_step < 1) throw ContractError("train config: lr_step must be >= 1");
  if (!(lr_decay > 0.0)) throw ContractError("train config: lr_decay must be positive");
  if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (loss_weights.size() != outputs) {
    throw ContractError("train config: " + std::to_string(loss_weights.size()) + " loss weights for " +
                        std::to_string(outputs) + " outputs");
  }
  double total = 0.0;
  for (double w : loss_weights) {
    if (w < 0.0) throw ContractError("train config: loss weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("train config: loss weights must sum to 1");
  if (weight_decay < 0.0) throw ContractError("train config: weight_decay must be nonnegative");
}

TrainConfig TrainConfig::oned_default() {
  TrainConfig c;
  c.lr = 9e-4;
  c.lr_step = 450;
  c.batch_size = 1;
  c.epochs = 20000;
  c.init = InitScheme::uniform_fanprod;
  c.loss_weights = {0.5, 0.5};
  return c;
}

TrainConfig TrainConfig::dense_default() {
  TrainConfig c;
  c.lr = 1e-2;
  c.lr_step = 500;
  c.batch_size = 16;
  c.epochs = 2000;
  return c;
}

TrainConfig TrainConfig::l2h_default() {
  TrainConfig c = dense_default();
  c.lr_step = 1000;
  return c;
}

void ExampleSet::validate() const {
  const std::size_t in_numel = shape_numel(input_shape);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    if (e.input.size() != in_numel) {
      throw DimensionError("example " + std::to_string(i) + ": input has " + std::to_string(e.input.size()) +
                           " values, expected " + std::to_string(in_numel));
    }
    if (e.targets.size() != output_shapes.size()) {
      throw DimensionError("example " + std::to_string(i) + ": " + std::to_string(e.targets.size()) +
                           " target slots for " + std::to_string(output_shapes.size()) + " outputs");
    }
    for (std::size_t f = 0; f < e.targets.size(); ++f) {
      if (!e.targets[f]) continue;
      const std::size_t n = shape_numel(output_shapes[f]);
      if (e.targets[f]->values.size() != n || e.targets[f]->mask.size() != n) {
        throw DimensionError("example " + std::to_string(i) + ": target " + std::to_string(f) +
                             " does not match output shape " + shape_to_string(output_shapes[f]));
      }
    }
  }
}

Tensor ExampleSet::batch_input(const std::vector<std::size_t>& ids) const {
  const std::size_t n = shape_numel(input_shape);
  std::vector<double> values;
  values.reserve(ids.size() * n);
  for (auto id : ids) values.insert(values.end(), examples.at(id).input.begin(), examples.at(id).input.end());
  Shape shape{ids.size()};
  shape.insert(shape.end(), input_shape.begin(), input_shape.end());
  return Tensor::from(std::move(shape), std::move(values));
}

LossBreakdown mf_loss(const MfPrediction& pred, const ExampleSet& set, const std::vector<std::size_t>& ids,
                      const std::vector<double>& weights, bool renormalize) {
  const auto outputs = pred.all();
  if (outputs.size() != set.output_shapes.size() || weights.size() != outputs.size()) {
    throw DimensionError("mf_loss: " + std::to_string(outputs.size()) + " predictions, " +
                         std::to_string(set.output_shapes.size()) + " target fidelities, " +
                         std::to_string(weights.size()) + " weights");
  }
  std::vector<std::size_t> present(outputs.size(), 0);
  for (std::size_t f = 0; f < outputs.size(); ++f)
    for (auto id : ids) present[f] += set.examples.at(id).targets[f].has_value() ? 1 : 0;

  double weight_total = 0.0;
  for (std::size_t f = 0; f < outputs.size(); ++f) weight_total += present[f] ? weights[f] : 0.0;
  if (weight_total <= 0.0) throw ContractError("mf_loss: batch carries no target with positive weight");
  const double norm = renormalize ? weight_total : 1.0;

  LossBreakdown out;
  out.terms.assign(outputs.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t f = 0; f < outputs.size(); ++f) {
    if (!present[f]) continue;
    const std::size_t n = shape_numel(set.output_shapes[f]);
    Shape expected{ids.size()};
    expected.insert(expected.end(), set.output_shapes[f].begin(), set.output_shapes[f].end());
    if (outputs[f].shape() != expected) {
      throw DimensionError("mf_loss: prediction " + std::to_string(f) + " has shape " +
                           shape_to_string(outputs[f].shape()) + ", target expects " + shape_to_string(expected));
    }
    std::vector<double> target(ids.size() * n, 0.0), w(ids.size() * n, 0.0);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto& t = set.examples[ids[k]].targets[f];
      if (!t) continue;
      const double count = std::accumulate(t->mask.begin(), t->mask.end(), 0.0);
      if (count <= 0.0) {
        throw ContractError("mf_loss: example " + std::to_string(ids[k]) + " has an empty mask for output " +
                            std::to_string(f));
      }
      for (std::size_t i = 0; i < n; ++i) {
        target[k * n + i] = t->values[i];
        w[k * n + i] = t->mask[i] / (count * static_cast<double>(present[f]));
      }
    }
    const auto term = ops::weighted_squared_error(outputs[f], target, w);
    out.terms[f] = term.item();
    const auto weighted = ops::scale(term, weights[f] / norm);
    out.total = out.total.defined() ? ops::add(out.total, weighted) : weighted;
  }
  return out;
}

void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr, std::size_t epoch,
               double weight_decay) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam: state does not match parameter list");
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!finite(g)) throw NonFiniteGradientError(p.name, epoch);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    auto values = t.data();
    const auto grad = std::as_const(t).grad();
    if (grad.empty()) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != values.size()) throw DimensionError("adam: moment size mismatch for " + params[k].name);
    for (std::size_t i = 0; i < values.size(); ++i) {
      double g = grad[i];
      if (weight_decay > 0.0 && params[k].kind == ParamKind::conv_weight) g += weight_decay * values[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
    }
  }
}

double step_lr(std::size_t epoch, double base_lr, std::size_t step, double decay) {
  if (step < 1) throw ContractError("step_lr: step must be >= 1");
  return base_lr * std::pow(decay, static_cast<double>(epoch / step));
}

void init_weights(Network& net, InitScheme scheme, Rng& rng, FanprodBound bound) {
  for (const auto& p : net.parameters()) {
    Tensor t = p.tensor;
    auto values = t.data();
    switch (p.kind) {
      case ParamKind::conv_weight: {
        const auto& s = t.shape();
        const double vol = static_cast<double>(kernel_volume(s));
        const double fan_in = static_cast<double>(s[1]) * vol;
        const double fan_out = static_cast<double>(s[0]) * vol;
        if (scheme == InitScheme::uniform_fanprod) {
          const double limit = bound == FanprodBound::literal ? fan_in : 1.0 / std::sqrt(fan_in);
          for (auto& v : values) v = rng.uniform(-limit, limit);
        } else {
          const double sd = std::sqrt(2.0 / (fan_in + fan_out));
          for (auto& v : values) v = sd * rng.normal();
        }
        break;
      }
      case ParamKind::conv_bias:
      case ParamKind::bn_beta: std::fill(values.begin(), values.end(), 0.0); break;
      case ParamKind::bn_gamma: std::fill(values.begin(), values.end(), 1.0); break;
      case ParamKind::mix: std::fill(values.begin(), values.end(), 0.5); break;
      case ParamKind::buffer: break;
    }
  }
  for (const auto& b : net.buffers()) {
    Tensor t = b.tensor;
    const bool is_var = b.name.ends_with("running_var");
    std::fill(t.data().begin(), t.data().end(), is_var ? 1.0 : 0.0);
  }
}

double validation_loss(Network& net, const ExampleSet& val_set, const TrainConfig& cfg, std::uint64_t stream) {
  if (val_set.size() == 0) throw ContractError("validation: empty validation set");
  NoGradGuard no_grad;
  Rng rng = Rng::derive(Rng::mix(cfg.seed, 3), stream);
  ForwardContext ctx;
  ctx.mode = ops::Mode::eval;
  ctx.rngs = {&rng};
  double total = 0.0;
  double count = 0.0;
  const auto ids = iota_ids(val_set.size());
  for (std::size_t start = 0; start < ids.size(); start += cfg.batch_size) {
    const std::vector<std::size_t> batch(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                         ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), start + cfg.batch_size)));
    const auto pred = net.forward(val_set.batch_input(batch), ctx);
    const auto loss = mf_loss(pred, val_set, batch, cfg.loss_weights, true);
    total += loss.total.item() * static_cast<double>(batch.size());
    count += static_cast<double>(batch.size());
  }
  return total / count;
}

TrainResult train(Network& net, const ExampleSet& train_set, const ExampleSet& val_set, const TrainConfig& cfg,
                  bool initialize) {
  cfg.validate(net.output_count());
  train_set.validate();
  val_set.validate();
  if (train_set.size() == 0) throw ContractError("train: empty training set");
  if (initialize) {
    Rng init_rng = Rng::derive(cfg.seed, 0);
    init_weights(net, cfg.init, init_rng, cfg.fanprod_bound);
  }
  Rng order_rng = Rng::derive(cfg.seed, 1);
  Rng drop_rng = Rng::derive(cfg.seed, 2);
  AdamState adam;
  TrainResult result;
  auto best = net.snapshot();
  const auto& params = net.parameters();
  auto ids = iota_ids(train_set.size());

  auto diverge = [&](const std::string& what, std::size_t epoch) {
    net.restore(best);
    throw DivergenceError(what + " at epoch " + std::to_string(epoch), epoch);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = step_lr(epoch, cfg.lr, cfg.lr_step, cfg.lr_decay);
    rec.p_effective = dropblock::scheduled_p(net.spec().dropblock.spec, epoch);
    shuffle(ids, order_rng);
    std::vector<double> term_sum(net.output_count(), 0.0), term_count(net.output_count(), 0.0);
    double total_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < ids.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> batch(
          ids.begin() + static_cast<std::ptrdiff_t>(start),
          ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), start + cfg.batch_size)));
      ForwardContext ctx;
      ctx.mode = cfg.batch_norm_eval ? ops::Mode::eval : ops::Mode::train;
      ctx.rngs = {&drop_rng};
      ctx.epoch = epoch;
      const auto pred = net.forward(train_set.batch_input(batch), ctx);
      const auto loss = mf_loss(pred, train_set, batch, cfg.loss_weights);
      const double value = loss.total.item();
      if (!finite(value)) diverge("training loss is not finite", epoch);
      for (const auto& p : params) Tensor(p.tensor).zero_grad();
      loss.total.backward();
      try {
        adam_step(params, adam, rec.lr, epoch, cfg.weight_decay);
      } catch (const NonFiniteGradientError&) {
        net.restore(best);
        throw;
      }
      total_sum += value;
      ++batches;
      for (std::size_t f = 0; f < loss.terms.size(); ++f) {
        if (std::isnan(loss.terms[f])) continue;
        term_sum[f] += loss.terms[f];
        term_count[f] += 1.0;
      }
    }
    rec.loss_total = total_sum / static_cast<double>(batches);
    rec.terms.resize(term_sum.size());
    for (std::size_t f = 0; f < term_sum.size(); ++f) {
      rec.terms[f] = term_count[f] > 0 ? term_sum[f] / term_count[f] : std::numeric_limits<double>::quiet_NaN();
    }
    rec.val_loss = validation_loss(net, val_set, cfg, epoch);
    if (!finite(rec.val_loss)) diverge("validation loss is not finite", epoch);
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      best = net.snapshot();
    }
    result.history.push_back(std::move(rec));
  }
  net.restore(best);
  return result;
}

std::vector<std::string> output_names(std::size_t outputs) {
  if (outputs == 2) return {"lf", "hf"};
  std::vector<std::string> names;
  for (std::size_t i = 1; i < outputs; ++i) names.push_back("lf" + std::to_string(i));
  names.push_back("hf");
  return names;
}

void write_history_csv(const std::filesystem::path& file, const TrainResult& result, std::size_t outputs) {
  std::ofstream os(file);
  if (!os) throw FormatError("cannot write " + file.string());
  os.precision(17);
  os << "epoch,lr,p_effective,loss_total";
  for (const auto& n : output_names(outputs)) os << ",loss_" << n;
  os << ",val_loss\n";
  for (const auto& r : result.history) {
    os << r.epoch << ',' << r.lr << ',' << r.p_effective << ',' << r.loss_total;
    for (double t : r.terms) os << ',' << t;
    os << ',' << r.val_loss << '\n';
  }
}

void save_checkpoint(const Network& net, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["family"] = to_string(net.spec().family);
  auto& entries = manifest["tensors"];
  entries = nlohmann::json::array();
  for (const auto* group : {&net.parameters(), &net.buffers()}) {
    for (const auto& p : *group) {
      save_tensor(p.tensor, dir / p.name);
      entries.push_back(p.name);
    }
  }
  std::ofstream os(dir / "checkpoint.json");
  if (!os) throw FormatError("cannot write " + (dir / "checkpoint.json").string());
  os << manifest.dump(1) << '\n';
}

void load_checkpoint(Network& net, const std::filesystem::path& dir) {
  std::ifstream is(dir / "checkpoint.json");
  if (!is) throw FormatError("missing " + (dir / "checkpoint.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("family", "") != to_string(net.spec().family)) {
    throw FormatError("checkpoint family does not match network");
  }
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.get<std::string>();
    Tensor* dst = net.find(name);
    if (!dst) throw FormatError("checkpoint tensor '" + name + "' has no match in the network");
    const auto loaded = load_tensor(dir / name);
    if (loaded.shape() != dst->shape()) throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
    std::copy(loaded.data().begin(), loaded.data().end(), dst->data().begin());
  }
}

}  // namespace mfconv::training
