#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sfr/core_signal.hpp"
#include "sfr/tensor.hpp"

namespace sfr {

struct NetworkConfig {
  int depth = 3;
  int base_filters = 128;
  int kernel_size = 3;
  int input_channels = 128;
  int output_channels = 1;
  std::uint64_t seed = 0;
  double leaky_slope = 0.1;
  double norm_eps = 1e-5;
  // Multiplies the initial head weights and bias. A small value starts the
  // output near silence, so channels without observations are not left
  // holding O(1) noise.
  double head_init_scale = 0.01;

  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

struct ConvLayerSpec {
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;

  std::vector<int> weight_shape() const { return {out_channels, in_channels, kernel, kernel}; }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel +
           static_cast<std::size_t>(out_channels);
  }
};

template <typename T>
struct ConvParams {
  nn::Tensor<T> weight;
  nn::Tensor<T> bias;
};

// Fixed generator input z, stored as (C, N, M). Never mutated after sampling.
class NoiseInput {
 public:
  NoiseInput(nn::Tensor<float> tensor, double variance, std::uint64_t seed)
      : tensor_(std::move(tensor)), variance_(variance), seed_(seed) {}

  const nn::Tensor<float>& tensor() const noexcept { return tensor_; }
  double variance() const noexcept { return variance_; }
  std::uint64_t seed() const noexcept { return seed_; }
  int rows() const { return tensor_.dim(1); }
  int cols() const { return tensor_.dim(2); }
  int channels() const { return tensor_.dim(0); }

 private:
  nn::Tensor<float> tensor_;
  double variance_;
  std::uint64_t seed_;
};

NoiseInput sample_noise_input(int rows, int cols, int channels, double variance,
                              std::uint64_t seed);

struct GridPadding {
  int rows = 0;         // padded N'
  int cols = 0;         // padded M'
  int crop_rows = 0;    // rows to drop from the end after forward
  int crop_cols = 0;    // columns to drop from the end after forward
  bool identity() const { return crop_rows == 0 && crop_cols == 0; }
};

GridPadding pad_to_grid(int rows, int cols, int depth);

template <typename T>
struct WeightView {
  std::vector<const nn::Tensor<T>*> weights;
  std::vector<const nn::Tensor<T>*> biases;
};

template <typename T>
struct ForwardTape;

// MultiResUNet-style convolutional autoencoder.
//
//   enc[l]  : MultiRes block (three chained k x k convs split ~1/6, 1/3, 1/2 of
//             the filter budget, concatenated, plus a 1x1 shortcut)
//   res[l]  : residual path, (depth - l) units of k x k conv + 1x1 shortcut
//   down[l] : stride-2 k x k conv
//   up[l]   : nearest 2x upsample + k x k conv, then concat with res[l]
//   dec[l]  : MultiRes block
//   head    : 1x1 conv to output_channels, linear
//
// Leaky rectifiers follow every conv except the head; MultiRes blocks and
// residual units end in a per-channel instance normalization.
template <typename T>
class DpNetwork {
 public:
  explicit DpNetwork(const NetworkConfig& config);

  const NetworkConfig& config() const noexcept { return config_; }
  const std::vector<ConvLayerSpec>& layers() const noexcept { return layers_; }
  std::optional<std::size_t> find_layer(std::string_view name) const;
  std::size_t layer_index(std::string_view name) const;

  std::vector<ConvParams<T>>& params() noexcept { return params_; }
  const std::vector<ConvParams<T>>& params() const noexcept { return params_; }

  WeightView<T> weights() const;

  // Inference with the stored parameters.
  nn::Tensor<T> forward(const nn::Tensor<T>& z) const;
  // Forward with substituted per-layer weights (adapters); records
  // activations into `tape` when non-null.
  nn::Tensor<T> forward(const nn::Tensor<T>& z, const WeightView<T>& weights,
                        ForwardTape<T>* tape) const;
  // Accumulates dL/d(weights used in forward) into `grads` (one entry per
  // layer, shaped like params()).
  void backward(ForwardTape<T>& tape, const nn::Tensor<T>& dy,
                std::vector<ConvParams<T>>& grads) const;

  std::vector<ConvParams<T>> zero_like_params() const;

  // Stable hash over architecture (config minus seed, layer names and shapes).
  std::string fingerprint() const;

  template <typename U>
  DpNetwork<U> cast() const {
    DpNetwork<U> out(config_, layers_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.params()[i].weight = params_[i].weight.template cast<U>();
      out.params()[i].bias = params_[i].bias.template cast<U>();
    }
    return out;
  }

  struct MultiResIdx {
    std::size_t conv1, conv2, conv3, shortcut;
    int f1, f2, f3;
  };
  struct ResUnitIdx {
    std::size_t conv, shortcut;
  };

 private:
  template <typename U>
  friend class DpNetwork;
  DpNetwork(const NetworkConfig& config, const std::vector<ConvLayerSpec>& layers);
  void build_plan();
  void initialize();

  NetworkConfig config_;
  std::vector<ConvLayerSpec> layers_;
  std::vector<ConvParams<T>> params_;

  std::vector<MultiResIdx> enc_;
  std::vector<std::vector<ResUnitIdx>> res_;
  std::vector<std::size_t> down_;
  MultiResIdx bottleneck_{};
  std::vector<std::size_t> up_;
  std::vector<MultiResIdx> dec_;
  std::size_t head_ = 0;
};

// Architecture-only layer list; identical to DpNetwork(config).layers().
std::vector<ConvLayerSpec> network_layers(const NetworkConfig& config);

template <typename T>
std::size_t count_parameters(const DpNetwork<T>& net) {
  std::size_t total = 0;
  for (const auto& l : net.layers()) total += l.parameter_count();
  return total;
}

std::size_t count_parameters(const NetworkConfig& config);

// Forward on a noise input, cropped back to the logical grid size.
ImpulseResponseGrid forward(const DpNetwork<float>& net, const NoiseInput& z, int rows, int cols,
                            double sample_rate_hz, double channel_spacing_m);

template <typename T>
struct MultiResCache {
  nn::Tensor<T> x, a1, a2, a3, h, y;
  std::vector<T> inv_std;
};

template <typename T>
struct ResUnitCache {
  nn::Tensor<T> x, h, y;
  std::vector<T> inv_std;
};

template <typename T>
struct ForwardTape {
  WeightView<T> weights;
  std::vector<MultiResCache<T>> multires;
  std::vector<ResUnitCache<T>> resunits;
  std::vector<nn::Tensor<T>> down_in, down_out;
  std::vector<nn::Tensor<T>> up_in, up_out;
  nn::Tensor<T> head_in;
};

}  // namespace sfr
