#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sfr/dp_network.hpp"
#include "sfr/tensor.hpp"

namespace sfr {

struct LayerShape {
  int out_channels = 0;
  int in_channels = 0;
  int kernel = 0;

  bool operator==(const LayerShape&) const = default;
};

// Low-rank update of one k x k convolution:
//   dW[o, i, u, v] = alpha * sum_r B[o, u, r] * A[r, i, v]
// with A of shape (rank, C_in, k) and B of shape (C_out, k, rank).
template <typename T>
struct LoraAdapter {
  std::string layer_name;
  LayerShape layer_shape;
  int rank = 0;
  T alpha = 0;
  nn::Tensor<T> a;
  nn::Tensor<T> b;

  void validate() const;
  std::size_t parameter_count() const { return a.size() + b.size(); }
};

// A ~ N(0, 1 / (rank * C_in * k)), B = 0, alpha defaults to 2 * rank.
template <typename T>
LoraAdapter<T> init_adapter(std::string layer_name, LayerShape shape, int rank,
                            std::optional<T> alpha, std::uint64_t seed);

template <typename T>
nn::Tensor<T> compose_delta(const LoraAdapter<T>& adapter);

// Given dL/d(delta W), accumulates dL/dA and dL/dB.
template <typename T>
void compose_delta_backward(const LoraAdapter<T>& adapter, const nn::Tensor<T>& d_delta,
                            nn::Tensor<T>& da, nn::Tensor<T>& db);

// Convolution with W + dW, materialized.
template <typename T>
nn::Tensor<T> adapted_forward(const nn::Tensor<T>& x, const nn::Tensor<T>& base_weight,
                              const nn::Tensor<T>& bias, const LoraAdapter<T>& adapter,
                              int stride = 1);
// Same result as the sum of a base convolution and a delta-only convolution.
template <typename T>
nn::Tensor<T> adapted_forward_split(const nn::Tensor<T>& x, const nn::Tensor<T>& base_weight,
                                    const nn::Tensor<T>& bias, const LoraAdapter<T>& adapter,
                                    int stride = 1);

template <typename T>
struct AdapterBundle {
  std::vector<LoraAdapter<T>> adapters;  // base-network layer order
  std::string base_model_fingerprint;
  int rank = 0;
  std::uint64_t created_with_seed = 0;

  const LoraAdapter<T>* find(std::string_view layer_name) const;
};

using LayerFilter = std::function<bool(const ConvLayerSpec&)>;

// One fresh adapter per (filtered) convolution of `net`; every layer by default.
template <typename T>
AdapterBundle<T> make_bundle(const DpNetwork<T>& net, int rank, std::optional<T> alpha,
                             std::uint64_t seed, const LayerFilter& filter = {});

struct BundleCount {
  std::size_t parameters = 0;
  double fraction_of_base = 0.0;
};

template <typename T>
std::size_t bundle_param_count(const AdapterBundle<T>& bundle);
template <typename T>
BundleCount bundle_param_count(const AdapterBundle<T>& bundle, std::size_t base_parameters);

// Closed form r*C_in*k + C_out*k*r summed over the given layers.
std::size_t lora_param_count(const std::vector<ConvLayerSpec>& layers, int rank);

template <typename T>
struct AdapterGrad {
  nn::Tensor<T> a;
  nn::Tensor<T> b;
};

// A frozen base network seen through a set of adapters. The base is held by
// const reference: nothing done through the view can modify it.
template <typename T>
class AdaptedNetwork {
 public:
  AdaptedNetwork(const DpNetwork<T>& base, AdapterBundle<T> bundle);

  const DpNetwork<T>& base() const noexcept { return *base_; }
  const AdapterBundle<T>& bundle() const noexcept { return bundle_; }
  AdapterBundle<T>& bundle() noexcept { return bundle_; }

  // Replaces the bundle (validated like attach) and returns the previous one.
  AdapterBundle<T> swap_adapters(AdapterBundle<T> next);

  nn::Tensor<T> forward(const nn::Tensor<T>& z) const;
  nn::Tensor<T> forward(const nn::Tensor<T>& z, ForwardTape<T>* tape);
  void backward(ForwardTape<T>& tape, const nn::Tensor<T>& dy,
                std::vector<AdapterGrad<T>>& grads) const;

  std::vector<AdapterGrad<T>> zero_grads() const;
  // "<layer>.lora_a" / "<layer>.lora_b" for every adapter.
  std::vector<std::string> trainable_parameter_names() const;

 private:
  void bind();
  std::vector<nn::Tensor<T>> materialize() const;
  WeightView<T> view_over(const std::vector<nn::Tensor<T>>& effective) const;

  const DpNetwork<T>* base_;
  AdapterBundle<T> bundle_;
  std::vector<std::size_t> layer_of_adapter_;
  std::vector<nn::Tensor<T>> effective_;
};

template <typename T>
AdaptedNetwork<T> attach_adapters(const DpNetwork<T>& net, AdapterBundle<T> bundle) {
  return AdaptedNetwork<T>(net, std::move(bundle));
}

template <typename T>
const DpNetwork<T>& detach_adapters(const AdaptedNetwork<T>& view) {
  return view.base();
}

template <typename T>
const DpNetwork<T>& detach_adapters(const DpNetwork<T>& net) {
  return net;
}

}  // namespace sfr
