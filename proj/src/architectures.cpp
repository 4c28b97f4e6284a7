#include "mfconv/architectures.hpp"

#include <algorithm>
#include <array>
#include <numeric>

namespace mfconv {

std::string to_string(Family f) {
  switch (f) {
    case Family::oned_mf: return "oned_mf";
    case Family::dense_unet: return "dense_unet";
    case Family::decoder_l2h: return "decoder_l2h";
  }
  return "?";
}

std::string to_string(SkipMode s) { return s == SkipMode::add ? "add" : "concat"; }
std::string to_string(Coupling c) { return c == Coupling::implicit ? "implicit" : "explicit"; }

NetworkSpec NetworkSpec::oned_default() {
  NetworkSpec s;
  s.family = Family::oned_mf;
  s.skip_mode = SkipMode::add;
  s.coupling = Coupling::explicit_feedback;
  s.input_channels = 1;
  s.activation = ops::Activation::tanh;
  s.dropblock.spec = {0.1, 1, false, dropblock::Scheduler::none(), true};
  return s;
}

NetworkSpec NetworkSpec::dense_default() {
  NetworkSpec s;
  s.family = Family::dense_unet;
  s.skip_mode = SkipMode::concat;
  s.coupling = Coupling::implicit;
  s.base_filters = 16;
  s.input_channels = 3;
  s.activation = ops::Activation::relu;
  s.dropblock.spec = {0.1, 3, false, dropblock::Scheduler::linear(300), true};
  return s;
}

NetworkSpec NetworkSpec::l2h_default() {
  NetworkSpec s;
  s.family = Family::decoder_l2h;
  s.coupling = Coupling::implicit;
  s.base_filters = 4;
  s.input_channels = 2;
  s.activation = ops::Activation::relu;
  s.dropblock.spec = {0.3, 3, false, dropblock::Scheduler::none(), true};
  s.dropblock.block_sizes = {1, 1, 1, 1, 3, 3};
  return s;
}

std::vector<Tensor> MfPrediction::all() const {
  auto out = lf;
  out.push_back(hf);
  return out;
}

// ---------------------------------------------------------------------------
// Network base

MfPrediction Network::forward(const Tensor& input, ForwardContext& ctx) {
  validate_input(input);
  return run(input, ctx);
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t Network::output_count() const { return spec_.family == Family::oned_mf ? 2 : 4; }

std::unique_ptr<Network> Network::clone() const {
  auto copy = build_network(spec_);
  copy->copy_state_from(*this);
  return copy;
}

void Network::copy_state_from(const Network& other) { restore(other.snapshot()); }

std::vector<std::vector<double>> Network::snapshot() const {
  std::vector<std::vector<double>> state;
  state.reserve(params_.size() + buffers_.size());
  for (const auto* group : {&params_, &buffers_}) {
    for (const auto& p : *group) state.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  return state;
}

void Network::restore(const std::vector<std::vector<double>>& state) {
  if (state.size() != params_.size() + buffers_.size()) {
    throw ContractError("restore: state holds " + std::to_string(state.size()) + " tensors, network has " +
                        std::to_string(params_.size() + buffers_.size()));
  }
  std::size_t i = 0;
  for (auto* group : {&params_, &buffers_}) {
    for (auto& p : *group) {
      auto dst = p.tensor.data();
      if (state[i].size() != dst.size()) throw DimensionError("restore: size mismatch for " + p.name);
      std::copy(state[i].begin(), state[i].end(), dst.begin());
      ++i;
    }
  }
}

Tensor* Network::find(const std::string& name) {
  for (auto* group : {&params_, &buffers_}) {
    for (auto& p : *group) {
      if (p.name == name) return &p.tensor;
    }
  }
  return nullptr;
}

Network::Conv Network::make_conv(const std::string& name, std::size_t in, std::size_t out,
                                 std::vector<std::size_t> kernel) {
  Shape wshape{out, in};
  wshape.insert(wshape.end(), kernel.begin(), kernel.end());
  Conv c;
  c.weight = Tensor::zeros(wshape, true);
  c.bias = Tensor::zeros({out}, true);
  c.options = ops::ConvOptions::same(kernel);
  params_.push_back({name + ".weight", c.weight, ParamKind::conv_weight});
  params_.push_back({name + ".bias", c.bias, ParamKind::conv_bias});
  return c;
}

Network::BatchNorm Network::make_bn(const std::string& name, std::size_t channels) {
  bn_states_.push_back(
      std::make_unique<ops::BatchNormState>(ops::BatchNormState::init(channels, spec_.bn_momentum, spec_.bn_epsilon)));
  BatchNorm b{Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true), bn_states_.back().get()};
  params_.push_back({name + ".gamma", b.gamma, ParamKind::bn_gamma});
  params_.push_back({name + ".beta", b.beta, ParamKind::bn_beta});
  buffers_.push_back({name + ".running_mean", b.state->running_mean, ParamKind::buffer});
  buffers_.push_back({name + ".running_var", b.state->running_var, ParamKind::buffer});
  return b;
}

Tensor Network::make_scalar(const std::string& name, double value) {
  auto t = Tensor::scalar(value, true);
  params_.push_back({name, t, ParamKind::mix});
  return t;
}

std::size_t Network::declare_site(std::vector<std::size_t> extents) {
  site_resolutions_.push_back(std::move(extents));
  const std::size_t site = site_resolutions_.size();
  if (site_active(site) && !site_resolutions_.back().empty()) {
    const auto b = site_block_size(site);
    for (auto f : site_resolutions_.back()) {
      if (b > f) {
        throw ContractError("dropblock site " + std::to_string(site) + ": block size " + std::to_string(b) +
                            " exceeds feature extent " + std::to_string(f));
      }
    }
  }
  return site;
}

bool Network::site_active(std::size_t site) const {
  const auto& sites = spec_.dropblock.sites;
  return sites.empty() || std::find(sites.begin(), sites.end(), site) != sites.end();
}

std::size_t Network::site_block_size(std::size_t site) const {
  const auto& sizes = spec_.dropblock.block_sizes;
  if (site >= 1 && site <= sizes.size()) return sizes[site - 1];
  return spec_.dropblock.spec.block_size;
}

Tensor Network::bn(const BatchNorm& layer, const Tensor& x, const ForwardContext& ctx) const {
  return ops::batch_norm(x, layer.gamma, layer.beta, *layer.state, ctx.mode);
}

Tensor Network::drop(std::size_t site, const Tensor& x, ForwardContext& ctx) const {
  if (!site_active(site)) return x;
  double p = spec_.dropblock.spec.p;
  if (ctx.p_override) {
    p = *ctx.p_override;
  } else if (ctx.epoch) {
    p = dropblock::scheduled_p(spec_.dropblock.spec, *ctx.epoch);
  }
  if (p <= 0.0) return x;
  if (ctx.rngs.size() != 1 && ctx.rngs.size() != x.extent(0)) {
    throw ContractError("forward: DropBlock site " + std::to_string(site) +
                        " needs one random stream or one per batch element");
  }
  auto site_spec = spec_.dropblock.spec;
  site_spec.block_size = site_block_size(site);
  if (ctx.rngs.size() == 1 && x.extent(0) != 1) {
    const std::vector<Rng*> shared(x.extent(0), ctx.rngs.front());
    return dropblock::drop_block(x, shared, site_spec, p);
  }
  return dropblock::drop_block(x, ctx.rngs, site_spec, p);
}

namespace {

std::vector<std::size_t> square3() { return {3, 3}; }

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

// ---------------------------------------------------------------------------
// 1D decoder-encoder

class OnedMf final : public Network {
 public:
  explicit OnedMf(NetworkSpec spec) : Network(std::move(spec)) {
    // Expansion path (upsampling) then compression path (pooling).
    const std::array<std::size_t, 8> out{16, 16, 8, 8, 8, 8, 16, 16};
    const std::array<std::size_t, 8> width{2, 2, 1, 1, 1, 1, 2, 2};
    std::size_t in = 1;
    for (std::size_t i = 0; i < 8; ++i) {
      const auto name = "trunk" + std::to_string(i + 1);
      convs_[i] = make_conv(name + ".conv", in, out[i], {width[i]});
      bns_[i] = make_bn(name + ".bn", out[i]);
      sites_[i] = declare_site({});
      in = out[i];
    }
    lf_out_ = make_conv("lf.conv", 16, 1, {1});
    const std::size_t z = spec_.coupling == Coupling::explicit_feedback ? 2 : 17;
    linear_ = make_conv("linear.conv", z, 1, {1});
    nonlinear_a_ = make_conv("nonlinear.conv1", z, 8, {2});
    nonlinear_bn_ = make_bn("nonlinear.bn", 8);
    nonlinear_b_ = make_conv("nonlinear.conv2", 8, 1, {1});
    mix_ = make_scalar("mix.gamma", 0.5);
  }

 protected:
  void validate_input(const Tensor& input) const override {
    require(input.dim() == 3, "oned_mf: expected input [N,1,L], got " + shape_to_string(input.shape()));
    require(input.extent(1) == 1, "oned_mf: channel axis (1) must be 1, got " + std::to_string(input.extent(1)));
  }

  MfPrediction run(const Tensor& x, ForwardContext& ctx) override {
    const auto act = spec_.activation;
    auto layer = [&](std::size_t i, const Tensor& h) {
      return drop(sites_[i], ops::activation(bn(bns_[i], convs_[i](h), ctx), act), ctx);
    };
    auto h = layer(1, layer(0, x));
    const auto skip_outer = ops::upsample_nearest(h, 2);
    h = layer(3, layer(2, skip_outer));
    const auto skip_inner = ops::upsample_nearest(h, 2);
    h = layer(5, layer(4, skip_inner));
    h = ops::max_pool(ops::add(h, skip_inner), 2);
    h = layer(7, layer(6, h));
    const auto features = ops::max_pool(ops::add(h, skip_outer), 2);
    auto lf = lf_out_(features);

    const auto z = ops::concat_channels(spec_.coupling == Coupling::explicit_feedback ? lf : features, x);
    const auto lin = linear_(z);
    const auto nonlin = nonlinear_b_(ops::activation(bn(nonlinear_bn_, nonlinear_a_(z), ctx), act));
    // mix * lin + (1 - mix) * nonlin
    auto hf = ops::add(nonlin, ops::mul_scalar(ops::sub(lin, nonlin), mix_));
    return {{lf}, hf};
  }

 private:
  std::array<Conv, 8> convs_;
  std::array<BatchNorm, 8> bns_;
  std::array<std::size_t, 8> sites_{};
  Conv lf_out_, linear_, nonlinear_a_, nonlinear_b_;
  BatchNorm nonlinear_bn_;
  Tensor mix_;
};

// ---------------------------------------------------------------------------
// Dense U-Net-like encoder-decoder

class DenseUnet final : public Network {
 public:
  explicit DenseUnet(NetworkSpec spec) : Network(std::move(spec)) {
    const std::size_t f = spec_.base_filters;
    require(f >= 1, "dense_unet: base_filters must be >= 1");
    const bool explicit_fb = spec_.coupling == Coupling::explicit_feedback;
    const std::array<std::size_t, 4> enc_out{f, 2 * f, 4 * f, 8 * f};
    const std::array<std::size_t, 4> dec_out{4 * f, 2 * f, f, 2 * f};
    std::size_t in = spec_.input_channels;
    for (std::size_t s = 0; s < 4; ++s) {
      const auto name = "enc" + std::to_string(s + 1);
      const std::size_t res = 64 >> s;
      enc_[s].a = make_conv(name + ".conv1", in, enc_out[s], square3());
      enc_[s].bna = make_bn(name + ".bn1", enc_out[s]);
      enc_[s].site_a = declare_site({res, res});
      enc_[s].b = make_conv(name + ".conv2", enc_out[s], enc_out[s], square3());
      enc_[s].bnb = make_bn(name + ".bn2", enc_out[s]);
      enc_[s].site_b = declare_site({res, res});
      in = enc_out[s];
    }
    for (std::size_t s = 0; s < 4; ++s) {
      const auto name = "dec" + std::to_string(s + 1);
      dec_[s].a = make_conv(name + ".conv1", in, dec_out[s], square3());
      dec_[s].bna = make_bn(name + ".bn1", dec_out[s]);
      dec_[s].b = make_conv(name + ".conv2", dec_out[s], dec_out[s], square3());
      dec_[s].bnb = make_bn(name + ".bn2", dec_out[s]);
      if (s == 0) {
        // Only the stage preceding the first LF head carries DropBlocks.
        dec_[s].site_a = declare_site({4, 4});
        dec_[s].site_b = declare_site({4, 4});
      }
      if (s >= 1) {
        const auto head = "lf" + std::to_string(s);
        heads_[s - 1].a = make_conv(head + ".conv1", dec_out[s], f, square3());
        heads_[s - 1].bn = make_bn(head + ".bn1", f);
        heads_[s - 1].b = make_conv(head + ".conv2", f, 1, square3());
      }
      const std::size_t up = dec_out[s] + ((explicit_fb && s >= 1) ? 1 : 0);
      const std::size_t skip = enc_out[3 - s];
      if (spec_.skip_mode == SkipMode::add) {
        proj_[s] = make_conv(name + ".skip_proj", up, skip, {1, 1});
        in = skip;
      } else {
        in = up + skip;
      }
    }
    // Same conv-BN-activation-conv form as the LF heads; without the norm a
    // bad early step can leave every tail unit inactive for good.
    final_a_ = make_conv("hf.conv1", in, f, square3());
    final_bn_ = make_bn("hf.bn1", f);
    final_b_ = make_conv("hf.conv2", f, 1, square3());
  }

 protected:
  void validate_input(const Tensor& input) const override {
    require(input.dim() == 4, "dense_unet: expected input [N,C,H,W], got " + shape_to_string(input.shape()));
    require(input.extent(1) == spec_.input_channels,
            "dense_unet: channel axis (1) has " + std::to_string(input.extent(1)) + ", expected " +
                std::to_string(spec_.input_channels));
    require(input.extent(2) == input.extent(3) && input.extent(2) % 16 == 0 && input.extent(2) > 0,
            "dense_unet: spatial axes (2,3) must be equal multiples of 16, got " + shape_to_string(input.shape()));
  }

  MfPrediction run(const Tensor& x, ForwardContext& ctx) override {
    auto cbr = [&](const Conv& c, const BatchNorm& b, const Tensor& h) { return ops::activation(bn(b, c(h), ctx), spec_.activation); };
    std::array<Tensor, 4> skips;
    Tensor h = x;
    for (std::size_t s = 0; s < 4; ++s) {
      h = drop(enc_[s].site_a, cbr(enc_[s].a, enc_[s].bna, h), ctx);
      h = drop(enc_[s].site_b, cbr(enc_[s].b, enc_[s].bnb, h), ctx);
      // The masked map feeds both the skip and the pool.
      skips[s] = h;
      h = ops::max_pool(h, 2);
    }
    MfPrediction out;
    for (std::size_t s = 0; s < 4; ++s) {
      h = cbr(dec_[s].a, dec_[s].bna, h);
      if (s == 0) h = drop(dec_[s].site_a, h, ctx);
      h = cbr(dec_[s].b, dec_[s].bnb, h);
      if (s == 0) h = drop(dec_[s].site_b, h, ctx);
      if (s >= 1) {
        const auto& head = heads_[s - 1];
        auto lf = head.b(cbr(head.a, head.bn, h));
        if (spec_.coupling == Coupling::explicit_feedback) h = ops::concat_channels(h, lf);
        out.lf.push_back(lf);
      }
      h = ops::upsample_nearest(h, 2);
      const auto& skip = skips[3 - s];
      h = spec_.skip_mode == SkipMode::add ? ops::add(proj_[s](h), skip) : ops::concat_channels(h, skip);
    }
    out.hf = final_b_(cbr(final_a_, final_bn_, h));
    return out;
  }

 private:
  struct Stage {
    Conv a, b;
    BatchNorm bna, bnb;
    std::size_t site_a = 0, site_b = 0;
  };
  struct Head {
    Conv a, b;
    BatchNorm bn;
  };
  std::array<Stage, 4> enc_, dec_;
  std::array<Conv, 4> proj_;
  std::array<Head, 3> heads_;
  Conv final_a_, final_b_;
  BatchNorm final_bn_;
};

// ---------------------------------------------------------------------------
// Low-to-high decoder

class DecoderL2h final : public Network {
 public:
  explicit DecoderL2h(NetworkSpec spec) : Network(std::move(spec)) {
    const std::size_t k = spec_.base_filters;
    require(k >= 1, "decoder_l2h: base_filters must be >= 1");
    const bool explicit_fb = spec_.coupling == Coupling::explicit_feedback;
    std::size_t in = spec_.input_channels;
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t width = k << (5 - i);
      const std::size_t res = std::size_t{1} << i;
      const auto name = "block" + std::to_string(i + 1);
      blocks_[i].a = make_conv(name + ".conv1", in, width, square3());
      blocks_[i].bna = make_bn(name + ".bn1", width);
      blocks_[i].b = make_conv(name + ".conv2", width, width, square3());
      blocks_[i].bnb = make_bn(name + ".bn2", width);
      if (i < 3) {
        blocks_[i].site_a = declare_site({res, res});
        blocks_[i].site_b = declare_site({res, res});
      }
      in = width;
      if (i >= 3) {
        const auto head = "lf" + std::to_string(i - 2);
        heads_[i - 3].a = make_conv(head + ".conv1", width, k, square3());
        heads_[i - 3].bn = make_bn(head + ".bn1", k);
        heads_[i - 3].b = make_conv(head + ".conv2", k, 1, square3());
        if (explicit_fb) in += 1;
      }
    }
    final_a_ = make_conv("hf.conv1", in, k, square3());
    final_bn_ = make_bn("hf.bn1", k);
    final_b_ = make_conv("hf.conv2", k, 1, square3());
  }

 protected:
  void validate_input(const Tensor& input) const override {
    const bool flat = input.dim() == 2;
    const bool map = input.dim() == 4 && input.extent(2) == 1 && input.extent(3) == 1;
    require(flat || map, "decoder_l2h: expected input [N,2] or [N,2,1,1], got " + shape_to_string(input.shape()));
    require(input.extent(1) == spec_.input_channels,
            "decoder_l2h: channel axis (1) has " + std::to_string(input.extent(1)) + ", expected " +
                std::to_string(spec_.input_channels));
  }

  MfPrediction run(const Tensor& x, ForwardContext& ctx) override {
    auto cbr = [&](const Conv& c, const BatchNorm& b, const Tensor& h) { return ops::activation(bn(b, c(h), ctx), spec_.activation); };
    Tensor h = x.dim() == 4 ? x : ops::reshape(x, {x.extent(0), x.extent(1), 1, 1});
    MfPrediction out;
    for (std::size_t i = 0; i < 6; ++i) {
      auto& blk = blocks_[i];
      h = cbr(blk.a, blk.bna, h);
      if (blk.site_a) h = drop(blk.site_a, h, ctx);
      h = cbr(blk.b, blk.bnb, h);
      if (blk.site_b) h = drop(blk.site_b, h, ctx);
      if (i >= 3) {
        const auto& head = heads_[i - 3];
        auto lf = head.b(cbr(head.a, head.bn, h));
        if (spec_.coupling == Coupling::explicit_feedback) h = ops::concat_channels(h, lf);
        out.lf.push_back(lf);
      }
      h = ops::upsample_nearest(h, 2);
    }
    out.hf = final_b_(cbr(final_a_, final_bn_, h));
    return out;
  }

 private:
  struct Stage {
    Conv a, b;
    BatchNorm bna, bnb;
    std::size_t site_a = 0, site_b = 0;
  };
  struct Head {
    Conv a, b;
    BatchNorm bn;
  };
  std::array<Stage, 6> blocks_;
  std::array<Head, 3> heads_;
  Conv final_a_, final_b_;
  BatchNorm final_bn_;
};

}  // namespace

std::unique_ptr<Network> build_oned_mf(const NetworkSpec& spec) {
  if (spec.family != Family::oned_mf) throw ContractError("build_oned_mf: spec family is " + to_string(spec.family));
  return std::make_unique<OnedMf>(spec);
}

std::unique_ptr<Network> build_dense_unet(const NetworkSpec& spec) {
  if (spec.family != Family::dense_unet) {
    throw ContractError("build_dense_unet: spec family is " + to_string(spec.family));
  }
  return std::make_unique<DenseUnet>(spec);
}

std::unique_ptr<Network> build_decoder_l2h(const NetworkSpec& spec) {
  if (spec.family != Family::decoder_l2h) {
    throw ContractError("build_decoder_l2h: spec family is " + to_string(spec.family));
  }
  return std::make_unique<DecoderL2h>(spec);
}

std::unique_ptr<Network> build_network(const NetworkSpec& spec) {
  spec.dropblock.spec.validate();
  switch (spec.family) {
    case Family::oned_mf: return build_oned_mf(spec);
    case Family::dense_unet: return build_dense_unet(spec);
    case Family::decoder_l2h: return build_decoder_l2h(spec);
  }
  throw ContractError("unknown network family");
}

}  // namespace mfconv
