#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mfconv/dropblock.hpp"
#include "mfconv/ops.hpp"
#include "mfconv/rng.hpp"
#include "mfconv/tensor.hpp"

namespace mfconv {

enum class Family { oned_mf, dense_unet, decoder_l2h };
enum class SkipMode { add, concat };
enum class Coupling { implicit, explicit_feedback };

std::string to_string(Family f);
std::string to_string(SkipMode s);
std::string to_string(Coupling c);

/// DropBlock settings shared by every site of a network, plus which sites are
/// active. Sites are numbered from 1 in forward order of the convolutions
/// they follow.
struct DropBlockPlacement {
  dropblock::DropBlockSpec spec;
  /// Empty means every site the family defines.
  std::vector<std::size_t> sites;
  /// Per-site block sizes overriding spec.block_size (decoder_l2h uses
  /// 1,1,1,1,3,3 by default).
  std::vector<std::size_t> block_sizes;
};

struct NetworkSpec {
  Family family = Family::dense_unet;
  SkipMode skip_mode = SkipMode::concat;
  Coupling coupling = Coupling::implicit;
  /// Channels of the first encoder stage (dense_unet) or k of the decoder's
  /// k * 2^j widths (decoder_l2h). Ignored by oned_mf.
  std::size_t base_filters = 16;
  std::size_t input_channels = 3;
  ops::Activation activation = ops::Activation::relu;
  DropBlockPlacement dropblock;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  static NetworkSpec oned_default();
  static NetworkSpec dense_default();
  static NetworkSpec l2h_default();
};

/// Outputs ordered coarsest to finest.
struct MfPrediction {
  std::vector<Tensor> lf;
  Tensor hf;

  /// lf followed by hf.
  std::vector<Tensor> all() const;
};

struct ForwardContext {
  ops::Mode mode = ops::Mode::eval;
  /// One stream per batch element; a single stream is shared by all
  /// elements.
  std::vector<Rng*> rngs;
  /// Epoch for the drop scheduler; unset means the full drop probability.
  std::optional<std::size_t> epoch;
  /// Forces every DropBlock to this probability (0 = deterministic).
  std::optional<double> p_override;
};

enum class ParamKind { conv_weight, conv_bias, bn_gamma, bn_beta, mix, buffer };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  ParamKind kind;
};

class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {}
  virtual ~Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  MfPrediction forward(const Tensor& input, ForwardContext& ctx);

  const NetworkSpec& spec() const { return spec_; }
  /// Trainable tensors in construction order.
  const std::vector<NamedTensor>& parameters() const { return params_; }
  /// Non-trainable state (batch-norm running statistics).
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  std::size_t parameter_count() const;
  /// Number of DropBlock sites the family defines.
  std::size_t site_count() const { return site_resolutions_.size(); }
  std::size_t output_count() const;

  /// Deep copy with identical weights and statistics.
  std::unique_ptr<Network> clone() const;
  void copy_state_from(const Network& other);
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& state);

  Tensor* find(const std::string& name);

 protected:
  struct Conv {
    Tensor weight, bias;
    ops::ConvOptions options;
    Tensor operator()(const Tensor& x) const { return ops::conv(x, weight, bias, options); }
  };
  struct BatchNorm {
    Tensor gamma, beta;
    ops::BatchNormState* state;
  };

  virtual MfPrediction run(const Tensor& input, ForwardContext& ctx) = 0;
  virtual void validate_input(const Tensor& input) const = 0;

  Conv make_conv(const std::string& name, std::size_t in, std::size_t out, std::vector<std::size_t> kernel);
  BatchNorm make_bn(const std::string& name, std::size_t channels);
  Tensor make_scalar(const std::string& name, double value);
  /// Declares a site at the given spatial extents; returns its 1-based index.
  std::size_t declare_site(std::vector<std::size_t> extents);

  Tensor bn(const BatchNorm& layer, const Tensor& x, const ForwardContext& ctx) const;
  Tensor drop(std::size_t site, const Tensor& x, ForwardContext& ctx) const;
  bool site_active(std::size_t site) const;
  std::size_t site_block_size(std::size_t site) const;

  NetworkSpec spec_;

 private:
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<std::unique_ptr<ops::BatchNormState>> bn_states_;
  std::vector<std::vector<std::size_t>> site_resolutions_;
};

/// Decoder-encoder for 1D signals with a learned blend of linear and
/// nonlinear LF-to-HF heads. Input [N, 1, L].
std::unique_ptr<Network> build_oned_mf(const NetworkSpec& spec);
/// U-Net-like encoder-decoder with LF heads at 8, 16, 32. Input [N, C, 64, 64].
std::unique_ptr<Network> build_dense_unet(const NetworkSpec& spec);
/// Decoder from (r, v_max) to 64x64 with LF heads at 8, 16, 32. Input [N, 2].
std::unique_ptr<Network> build_decoder_l2h(const NetworkSpec& spec);
std::unique_ptr<Network> build_network(const NetworkSpec& spec);

}  // namespace mfconv
