#include "sfr/lora.hpp"

#include <Eigen/Core>
#include <cmath>

#include "sfr/errors.hpp"
#include "sfr/random.hpp"

namespace sfr {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// dW viewed as a (C_out * k) x (C_in * k) matrix P[(o, u), (i, v)].
template <typename T>
RowMat<T> delta_as_matrix(const nn::Tensor<T>& delta, const LayerShape& s) {
  const int k = s.kernel;
  RowMat<T> p(s.out_channels * k, s.in_channels * k);
  for (int o = 0; o < s.out_channels; ++o)
    for (int i = 0; i < s.in_channels; ++i)
      for (int u = 0; u < k; ++u)
        for (int v = 0; v < k; ++v)
          p(o * k + u, i * k + v) = delta[((static_cast<std::size_t>(o) * s.in_channels + i) * k + u) * k + v];
  return p;
}

}  // namespace

template <typename T>
void LoraAdapter<T>::validate() const {
  if (rank < 1) throw InvalidArgument("adapter rank must be >= 1");
  const auto& s = layer_shape;
  if (s.out_channels < 1 || s.in_channels < 1 || s.kernel < 1) {
    throw InvalidArgument("adapter layer shape must be positive");
  }
  if (a.shape() != std::vector<int>{rank, s.in_channels, s.kernel}) {
    throw ShapeMismatch("adapter A for '" + layer_name + "' has shape " + nn::shape_string(a.shape()));
  }
  if (b.shape() != std::vector<int>{s.out_channels, s.kernel, rank}) {
    throw ShapeMismatch("adapter B for '" + layer_name + "' has shape " + nn::shape_string(b.shape()));
  }
  for (T v : a.values())
    if (!std::isfinite(static_cast<double>(v))) throw InvalidArgument("adapter A has non-finite entries");
  for (T v : b.values())
    if (!std::isfinite(static_cast<double>(v))) throw InvalidArgument("adapter B has non-finite entries");
  if (!std::isfinite(static_cast<double>(alpha)) || !(alpha > T{0})) {
    throw InvalidArgument("adapter alpha must be positive");
  }
}

template <typename T>
LoraAdapter<T> init_adapter(std::string layer_name, LayerShape shape, int rank,
                            std::optional<T> alpha, std::uint64_t seed) {
  if (rank < 1) throw InvalidArgument("adapter rank must be >= 1");
  if (shape.out_channels < 1 || shape.in_channels < 1 || shape.kernel < 1) {
    throw InvalidArgument("adapter layer shape must be positive");
  }
  LoraAdapter<T> ad;
  ad.layer_name = std::move(layer_name);
  ad.layer_shape = shape;
  ad.rank = rank;
  ad.alpha = alpha.value_or(static_cast<T>(2 * rank));
  ad.a = nn::Tensor<T>({rank, shape.in_channels, shape.kernel});
  ad.b = nn::Tensor<T>({shape.out_channels, shape.kernel, rank});
  Rng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(rank) * shape.in_channels * shape.kernel);
  for (T& v : ad.a.values()) v = static_cast<T>(sd * rng.normal());
  ad.validate();
  return ad;
}

template <typename T>
nn::Tensor<T> compose_delta(const LoraAdapter<T>& adapter) {
  const auto& s = adapter.layer_shape;
  const int k = s.kernel;
  const int r = adapter.rank;
  Eigen::Map<const RowMat<T>> bmat(adapter.b.data(), s.out_channels * k, r);
  Eigen::Map<const RowMat<T>> amat(adapter.a.data(), r, s.in_channels * k);
  RowMat<T> p = bmat * amat;
  nn::Tensor<T> delta({s.out_channels, s.in_channels, k, k});
  for (int o = 0; o < s.out_channels; ++o)
    for (int i = 0; i < s.in_channels; ++i)
      for (int u = 0; u < k; ++u)
        for (int v = 0; v < k; ++v)
          delta[((static_cast<std::size_t>(o) * s.in_channels + i) * k + u) * k + v] =
              adapter.alpha * p(o * k + u, i * k + v);
  return delta;
}

template <typename T>
void compose_delta_backward(const LoraAdapter<T>& adapter, const nn::Tensor<T>& d_delta,
                            nn::Tensor<T>& da, nn::Tensor<T>& db) {
  const auto& s = adapter.layer_shape;
  const int k = s.kernel;
  const int r = adapter.rank;
  if (d_delta.shape() != std::vector<int>{s.out_channels, s.in_channels, k, k}) {
    throw ShapeMismatch("delta gradient shape " + nn::shape_string(d_delta.shape()));
  }
  const RowMat<T> g = delta_as_matrix(d_delta, s);
  Eigen::Map<const RowMat<T>> bmat(adapter.b.data(), s.out_channels * k, r);
  Eigen::Map<const RowMat<T>> amat(adapter.a.data(), r, s.in_channels * k);
  Eigen::Map<RowMat<T>> damat(da.data(), r, s.in_channels * k);
  Eigen::Map<RowMat<T>> dbmat(db.data(), s.out_channels * k, r);
  damat.noalias() += adapter.alpha * (bmat.transpose() * g);
  dbmat.noalias() += adapter.alpha * (g * amat.transpose());
}

namespace {

template <typename T>
void check_adapter_fits(const nn::Tensor<T>& base_weight, const LoraAdapter<T>& adapter) {
  const auto& s = adapter.layer_shape;
  if (base_weight.shape() != std::vector<int>{s.out_channels, s.in_channels, s.kernel, s.kernel}) {
    throw ShapeMismatch("adapter for '" + adapter.layer_name + "' does not fit weight " +
                        nn::shape_string(base_weight.shape()));
  }
}

}  // namespace

template <typename T>
nn::Tensor<T> adapted_forward(const nn::Tensor<T>& x, const nn::Tensor<T>& base_weight,
                              const nn::Tensor<T>& bias, const LoraAdapter<T>& adapter,
                              int stride) {
  check_adapter_fits(base_weight, adapter);
  nn::Tensor<T> w = compose_delta(adapter);
  auto wv = w.values();
  auto bv = base_weight.values();
  for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = bv[i] + wv[i];
  return nn::conv2d(x, w, bias, stride);
}

template <typename T>
nn::Tensor<T> adapted_forward_split(const nn::Tensor<T>& x, const nn::Tensor<T>& base_weight,
                                    const nn::Tensor<T>& bias, const LoraAdapter<T>& adapter,
                                    int stride) {
  check_adapter_fits(base_weight, adapter);
  auto y = nn::conv2d(x, base_weight, bias, stride);
  const nn::Tensor<T> zero_bias({adapter.layer_shape.out_channels});
  nn::add_inplace(y, nn::conv2d(x, compose_delta(adapter), zero_bias, stride));
  return y;
}

template <typename T>
const LoraAdapter<T>* AdapterBundle<T>::find(std::string_view layer_name) const {
  for (const auto& a : adapters) {
    if (a.layer_name == layer_name) return &a;
  }
  return nullptr;
}

template <typename T>
AdapterBundle<T> make_bundle(const DpNetwork<T>& net, int rank, std::optional<T> alpha,
                             std::uint64_t seed, const LayerFilter& filter) {
  if (rank < 1) throw InvalidArgument("adapter rank must be >= 1");
  AdapterBundle<T> bundle;
  bundle.base_model_fingerprint = net.fingerprint();
  bundle.rank = rank;
  bundle.created_with_seed = seed;
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (filter && !filter(l)) continue;
    bundle.adapters.push_back(init_adapter<T>(l.name, {l.out_channels, l.in_channels, l.kernel},
                                              rank, alpha, mix_seed(seed, i)));
  }
  return bundle;
}

template <typename T>
std::size_t bundle_param_count(const AdapterBundle<T>& bundle) {
  std::size_t total = 0;
  for (const auto& a : bundle.adapters) {
    const auto& s = a.layer_shape;
    total += static_cast<std::size_t>(a.rank) * s.in_channels * s.kernel +
             static_cast<std::size_t>(s.out_channels) * s.kernel * a.rank;
  }
  return total;
}

template <typename T>
BundleCount bundle_param_count(const AdapterBundle<T>& bundle, std::size_t base_parameters) {
  BundleCount c;
  c.parameters = bundle_param_count(bundle);
  c.fraction_of_base = base_parameters == 0 ? 0.0
                                            : static_cast<double>(c.parameters) /
                                                  static_cast<double>(base_parameters);
  return c;
}

std::size_t lora_param_count(const std::vector<ConvLayerSpec>& layers, int rank) {
  std::size_t total = 0;
  for (const auto& l : layers) {
    total += static_cast<std::size_t>(rank) * l.in_channels * l.kernel +
             static_cast<std::size_t>(l.out_channels) * l.kernel * rank;
  }
  return total;
}

template <typename T>
AdaptedNetwork<T>::AdaptedNetwork(const DpNetwork<T>& base, AdapterBundle<T> bundle)
    : base_(&base), bundle_(std::move(bundle)) {
  bind();
}

template <typename T>
void AdaptedNetwork<T>::bind() {
  if (bundle_.base_model_fingerprint.empty()) {
    throw IncompatibleAdapter("adapter bundle carries no base-model fingerprint");
  }
  if (bundle_.base_model_fingerprint != base_->fingerprint()) {
    throw IncompatibleAdapter("adapter bundle fingerprint " + bundle_.base_model_fingerprint +
                              " does not match network " + base_->fingerprint());
  }
  layer_of_adapter_.clear();
  std::vector<bool> seen(base_->layers().size(), false);
  for (const auto& a : bundle_.adapters) {
    const std::size_t idx = base_->layer_index(a.layer_name);
    if (seen[idx]) throw IncompatibleAdapter("duplicate adapter for layer '" + a.layer_name + "'");
    seen[idx] = true;
    const auto& l = base_->layers()[idx];
    if (a.layer_shape != LayerShape{l.out_channels, l.in_channels, l.kernel}) {
      throw IncompatibleAdapter("adapter shape does not match layer '" + a.layer_name + "'");
    }
    if (a.rank != bundle_.rank) throw IncompatibleAdapter("adapter rank differs from bundle rank");
    a.validate();
    layer_of_adapter_.push_back(idx);
  }
  effective_.clear();
}

template <typename T>
AdapterBundle<T> AdaptedNetwork<T>::swap_adapters(AdapterBundle<T> next) {
  AdaptedNetwork<T> probe(*base_, std::move(next));
  std::swap(bundle_, probe.bundle_);
  std::swap(layer_of_adapter_, probe.layer_of_adapter_);
  effective_.clear();
  return std::move(probe.bundle_);
}

template <typename T>
std::vector<nn::Tensor<T>> AdaptedNetwork<T>::materialize() const {
  std::vector<nn::Tensor<T>> eff;
  eff.reserve(bundle_.adapters.size());
  for (std::size_t j = 0; j < bundle_.adapters.size(); ++j) {
    nn::Tensor<T> w = compose_delta(bundle_.adapters[j]);
    auto base = base_->params()[layer_of_adapter_[j]].weight.values();
    auto wv = w.values();
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = base[i] + wv[i];
    eff.push_back(std::move(w));
  }
  return eff;
}

template <typename T>
WeightView<T> AdaptedNetwork<T>::view_over(const std::vector<nn::Tensor<T>>& effective) const {
  WeightView<T> view = base_->weights();
  for (std::size_t j = 0; j < effective.size(); ++j) view.weights[layer_of_adapter_[j]] = &effective[j];
  return view;
}

template <typename T>
nn::Tensor<T> AdaptedNetwork<T>::forward(const nn::Tensor<T>& z) const {
  const auto eff = materialize();
  return base_->forward(z, view_over(eff), nullptr);
}

template <typename T>
nn::Tensor<T> AdaptedNetwork<T>::forward(const nn::Tensor<T>& z, ForwardTape<T>* tape) {
  effective_ = materialize();
  return base_->forward(z, view_over(effective_), tape);
}

template <typename T>
void AdaptedNetwork<T>::backward(ForwardTape<T>& tape, const nn::Tensor<T>& dy,
                                 std::vector<AdapterGrad<T>>& grads) const {
  if (grads.size() != bundle_.adapters.size()) throw ShapeMismatch("adapter gradient buffer size mismatch");
  auto full = base_->zero_like_params();
  base_->backward(tape, dy, full);
  for (std::size_t j = 0; j < bundle_.adapters.size(); ++j) {
    compose_delta_backward(bundle_.adapters[j], full[layer_of_adapter_[j]].weight, grads[j].a,
                           grads[j].b);
  }
}

template <typename T>
std::vector<AdapterGrad<T>> AdaptedNetwork<T>::zero_grads() const {
  std::vector<AdapterGrad<T>> g;
  for (const auto& a : bundle_.adapters) {
    g.push_back({nn::Tensor<T>(a.a.shape()), nn::Tensor<T>(a.b.shape())});
  }
  return g;
}

template <typename T>
std::vector<std::string> AdaptedNetwork<T>::trainable_parameter_names() const {
  std::vector<std::string> names;
  for (const auto& a : bundle_.adapters) {
    names.push_back(a.layer_name + ".lora_a");
    names.push_back(a.layer_name + ".lora_b");
  }
  return names;
}

#define SFR_INSTANTIATE(T)                                                                         \
  template struct LoraAdapter<T>;                                                                  \
  template struct AdapterBundle<T>;                                                                \
  template class AdaptedNetwork<T>;                                                                \
  template LoraAdapter<T> init_adapter(std::string, LayerShape, int, std::optional<T>,             \
                                       std::uint64_t);                                             \
  template nn::Tensor<T> compose_delta(const LoraAdapter<T>&);                                     \
  template void compose_delta_backward(const LoraAdapter<T>&, const nn::Tensor<T>&,                \
                                       nn::Tensor<T>&, nn::Tensor<T>&);                            \
  template nn::Tensor<T> adapted_forward(const nn::Tensor<T>&, const nn::Tensor<T>&,               \
                                         const nn::Tensor<T>&, const LoraAdapter<T>&, int);        \
  template nn::Tensor<T> adapted_forward_split(const nn::Tensor<T>&, const nn::Tensor<T>&,         \
                                               const nn::Tensor<T>&, const LoraAdapter<T>&, int);  \
  template AdapterBundle<T> make_bundle(const DpNetwork<T>&, int, std::optional<T>, std::uint64_t, \
                                        const LayerFilter&);                                       \
  template std::size_t bundle_param_count(const AdapterBundle<T>&);                                \
  template BundleCount bundle_param_count(const AdapterBundle<T>&, std::size_t);

SFR_INSTANTIATE(float)
SFR_INSTANTIATE(double)

#undef SFR_INSTANTIATE

}  // namespace sfr
