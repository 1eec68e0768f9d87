#include "sfr/dp_network.hpp"

#include <cmath>
#include <cstdio>

#include "sfr/errors.hpp"
#include "sfr/random.hpp"

namespace sfr {

void NetworkConfig::validate() const {
  if (depth < 1) throw InvalidArgument("network depth must be >= 1");
  if (base_filters < 1) throw InvalidArgument("base_filters must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw InvalidArgument("kernel_size must be odd");
  if (input_channels < 1) throw InvalidArgument("input_channels must be >= 1");
  if (output_channels < 1) throw InvalidArgument("output_channels must be >= 1");
  if (!(leaky_slope >= 0.0)) throw InvalidArgument("leaky slope must be nonnegative");
  if (!(norm_eps > 0.0)) throw InvalidArgument("normalization epsilon must be positive");
  if (!(head_init_scale >= 0.0) || !std::isfinite(head_init_scale)) {
    throw InvalidArgument("head_init_scale must be finite and nonnegative");
  }
}

namespace {

struct Split {
  int f1, f2, f3;
};

Split multires_split(int budget) {
  const int f1 = std::max(1, static_cast<int>(std::lround(budget / 6.0)));
  const int f2 = std::max(1, static_cast<int>(std::lround(budget / 3.0)));
  const int f3 = std::max(1, budget - f1 - f2);
  return {f1, f2, f3};
}

// Collects the ordered layer list while the block plan is built.
struct PlanBuilder {
  const NetworkConfig& cfg;
  std::vector<ConvLayerSpec> layers;

  std::size_t add(std::string name, int in, int out, int k, int stride = 1) {
    layers.push_back({std::move(name), in, out, k, stride});
    return layers.size() - 1;
  }

  template <typename Idx>
  Idx multires(const std::string& prefix, int in) {
    const Split s = multires_split(cfg.base_filters);
    const int k = cfg.kernel_size;
    Idx idx{};
    idx.conv1 = add(prefix + ".conv1", in, s.f1, k);
    idx.conv2 = add(prefix + ".conv2", s.f1, s.f2, k);
    idx.conv3 = add(prefix + ".conv3", s.f2, s.f3, k);
    idx.shortcut = add(prefix + ".shortcut", in, s.f1 + s.f2 + s.f3, 1);
    idx.f1 = s.f1;
    idx.f2 = s.f2;
    idx.f3 = s.f3;
    return idx;
  }
};

int multires_width(const NetworkConfig& cfg) {
  const Split s = multires_split(cfg.base_filters);
  return s.f1 + s.f2 + s.f3;
}

}  // namespace

std::vector<ConvLayerSpec> network_layers(const NetworkConfig& config) {
  return DpNetwork<float>(config).layers();
}

std::size_t count_parameters(const NetworkConfig& config) {
  std::size_t total = 0;
  for (const auto& l : network_layers(config)) total += l.parameter_count();
  return total;
}

template <typename T>
DpNetwork<T>::DpNetwork(const NetworkConfig& config) : config_(config) {
  config_.validate();
  build_plan();
  initialize();
}

template <typename T>
DpNetwork<T>::DpNetwork(const NetworkConfig& config, const std::vector<ConvLayerSpec>&)
    : config_(config) {
  config_.validate();
  build_plan();
  params_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    params_[i].weight = nn::Tensor<T>(layers_[i].weight_shape());
    params_[i].bias = nn::Tensor<T>({layers_[i].out_channels});
  }
}

template <typename T>
void DpNetwork<T>::build_plan() {
  PlanBuilder b{config_, {}};
  const int width = multires_width(config_);
  const int f = config_.base_filters;
  const int k = config_.kernel_size;
  int channels = config_.input_channels;
  std::vector<int> skip_channels;
  for (int l = 0; l < config_.depth; ++l) {
    const std::string lvl = std::to_string(l);
    enc_.push_back(b.multires<MultiResIdx>("enc" + lvl, channels));
    channels = width;
    std::vector<ResUnitIdx> units;
    int rc = channels;
    for (int j = 0; j < config_.depth - l; ++j) {
      const std::string p = "res" + lvl + "." + std::to_string(j);
      ResUnitIdx u{};
      u.conv = b.add(p + ".conv", rc, f, k);
      u.shortcut = b.add(p + ".shortcut", rc, f, 1);
      units.push_back(u);
      rc = f;
    }
    res_.push_back(std::move(units));
    skip_channels.push_back(rc);
    down_.push_back(b.add("down" + lvl, channels, f, k, 2));
    channels = f;
  }
  bottleneck_ = b.multires<MultiResIdx>("bottleneck", channels);
  channels = width;
  up_.resize(static_cast<std::size_t>(config_.depth));
  dec_.resize(static_cast<std::size_t>(config_.depth));
  for (int l = config_.depth - 1; l >= 0; --l) {
    const std::string lvl = std::to_string(l);
    up_[static_cast<std::size_t>(l)] = b.add("up" + lvl, channels, f, k);
    dec_[static_cast<std::size_t>(l)] =
        b.multires<MultiResIdx>("dec" + lvl, f + skip_channels[static_cast<std::size_t>(l)]);
    channels = width;
  }
  head_ = b.add("head", channels, config_.output_channels, 1);
  layers_ = std::move(b.layers);
}

template <typename T>
void DpNetwork<T>::initialize() {
  params_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& spec = layers_[i];
    Rng rng(mix_seed(config_.seed, i));
    double bound = 1.0 / std::sqrt(static_cast<double>(spec.in_channels) * spec.kernel * spec.kernel);
    if (i == head_) bound *= config_.head_init_scale;
    nn::Tensor<T> w(spec.weight_shape());
    for (T& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    nn::Tensor<T> bias({spec.out_channels});
    for (T& v : bias.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    params_[i] = {std::move(w), std::move(bias)};
  }
}

template <typename T>
std::optional<std::size_t> DpNetwork<T>::find_layer(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename T>
std::size_t DpNetwork<T>::layer_index(std::string_view name) const {
  auto idx = find_layer(name);
  if (!idx) throw UnknownLayer("no convolution layer named '" + std::string(name) + "'");
  return *idx;
}

template <typename T>
WeightView<T> DpNetwork<T>::weights() const {
  WeightView<T> view;
  for (const auto& p : params_) {
    view.weights.push_back(&p.weight);
    view.biases.push_back(&p.bias);
  }
  return view;
}

template <typename T>
std::vector<ConvParams<T>> DpNetwork<T>::zero_like_params() const {
  std::vector<ConvParams<T>> out(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out[i].weight = nn::Tensor<T>(params_[i].weight.shape());
    out[i].bias = nn::Tensor<T>(params_[i].bias.shape());
  }
  return out;
}

template <typename T>
std::string DpNetwork<T>::fingerprint() const {
  std::string canon = "depth=" + std::to_string(config_.depth) +
                      ";base_filters=" + std::to_string(config_.base_filters) +
                      ";kernel_size=" + std::to_string(config_.kernel_size) +
                      ";input_channels=" + std::to_string(config_.input_channels) +
                      ";output_channels=" + std::to_string(config_.output_channels) + ";";
  for (const auto& l : layers_) {
    canon += l.name + ":" + std::to_string(l.out_channels) + "," + std::to_string(l.in_channels) +
             "," + std::to_string(l.kernel) + "," + std::to_string(l.stride) + ";";
  }
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

template <typename T>
struct Pass {
  const std::vector<ConvLayerSpec>& layers;
  const WeightView<T>& w;
  ForwardTape<T>* tape;
  T slope;
  T eps;

  nn::Tensor<T> conv(std::size_t i, const nn::Tensor<T>& x) const {
    return nn::conv2d(x, *w.weights[i], *w.biases[i], layers[i].stride);
  }

  nn::Tensor<T> multires(const typename DpNetwork<T>::MultiResIdx& b, const nn::Tensor<T>& x) const {
    auto a1 = conv(b.conv1, x);
    nn::leaky_relu_inplace(a1, slope);
    auto a2 = conv(b.conv2, a1);
    nn::leaky_relu_inplace(a2, slope);
    auto a3 = conv(b.conv3, a2);
    nn::leaky_relu_inplace(a3, slope);
    auto h = nn::concat_channels<T>({&a1, &a2, &a3});
    nn::add_inplace(h, conv(b.shortcut, x));
    nn::leaky_relu_inplace(h, slope);
    std::vector<T> inv_std;
    auto y = nn::instance_norm(h, eps, inv_std);
    if (tape) {
      tape->multires.push_back({x, std::move(a1), std::move(a2), std::move(a3), std::move(h), y,
                                std::move(inv_std)});
    }
    return y;
  }

  nn::Tensor<T> resunit(const typename DpNetwork<T>::ResUnitIdx& u, const nn::Tensor<T>& x) const {
    auto h = conv(u.conv, x);
    nn::add_inplace(h, conv(u.shortcut, x));
    nn::leaky_relu_inplace(h, slope);
    std::vector<T> inv_std;
    auto y = nn::instance_norm(h, eps, inv_std);
    if (tape) tape->resunits.push_back({x, std::move(h), y, std::move(inv_std)});
    return y;
  }
};

template <typename T>
struct BackPass {
  const std::vector<ConvLayerSpec>& layers;
  ForwardTape<T>& tape;
  std::vector<ConvParams<T>>& grads;
  T slope;

  nn::Tensor<T> conv(std::size_t i, const nn::Tensor<T>& x, const nn::Tensor<T>& dy,
                     bool need_dx = true) const {
    return nn::conv2d_backward(x, *tape.weights.weights[i], layers[i].stride, dy,
                               &grads[i].weight, &grads[i].bias, need_dx);
  }

  nn::Tensor<T> multires(const typename DpNetwork<T>::MultiResIdx& b, const nn::Tensor<T>& dy,
                         bool need_dx = true) const {
    MultiResCache<T> c = std::move(tape.multires.back());
    tape.multires.pop_back();
    auto dh = nn::instance_norm_backward(c.y, c.inv_std, dy);
    nn::leaky_relu_backward_inplace(c.h, dh, slope);
    auto dx = conv(b.shortcut, c.x, dh, need_dx);
    auto parts = nn::split_channels(dh, {b.f1, b.f2, b.f3});
    nn::leaky_relu_backward_inplace(c.a3, parts[2], slope);
    nn::add_inplace(parts[1], conv(b.conv3, c.a2, parts[2]));
    nn::leaky_relu_backward_inplace(c.a2, parts[1], slope);
    nn::add_inplace(parts[0], conv(b.conv2, c.a1, parts[1]));
    nn::leaky_relu_backward_inplace(c.a1, parts[0], slope);
    auto dx1 = conv(b.conv1, c.x, parts[0], need_dx);
    if (need_dx) nn::add_inplace(dx, dx1);
    return dx;
  }

  nn::Tensor<T> resunit(const typename DpNetwork<T>::ResUnitIdx& u, const nn::Tensor<T>& dy) const {
    ResUnitCache<T> c = std::move(tape.resunits.back());
    tape.resunits.pop_back();
    auto dh = nn::instance_norm_backward(c.y, c.inv_std, dy);
    nn::leaky_relu_backward_inplace(c.h, dh, slope);
    auto dx = conv(u.shortcut, c.x, dh);
    nn::add_inplace(dx, conv(u.conv, c.x, dh));
    return dx;
  }
};

}  // namespace

template <typename T>
nn::Tensor<T> DpNetwork<T>::forward(const nn::Tensor<T>& z) const {
  return forward(z, weights(), nullptr);
}

template <typename T>
nn::Tensor<T> DpNetwork<T>::forward(const nn::Tensor<T>& z, const WeightView<T>& w,
                                    ForwardTape<T>* tape) const {
  if (z.rank() != 3 || z.dim(0) != config_.input_channels) {
    throw ShapeMismatch("network input must be (" + std::to_string(config_.input_channels) +
                        ", N, M), got " + nn::shape_string(z.shape()));
  }
  const int factor = 1 << config_.depth;
  if (z.dim(1) % factor != 0 || z.dim(2) % factor != 0) {
    throw ShapeMismatch("input spatial size " + std::to_string(z.dim(1)) + "x" +
                        std::to_string(z.dim(2)) + " not divisible by " + std::to_string(factor) +
                        "; pad with pad_to_grid");
  }
  if (w.weights.size() != layers_.size() || w.biases.size() != layers_.size()) {
    throw ShapeMismatch("weight view does not cover every layer");
  }
  if (tape) *tape = ForwardTape<T>{w, {}, {}, {}, {}, {}, {}, {}};

  const Pass<T> pass{layers_, w, tape, static_cast<T>(config_.leaky_slope),
                     static_cast<T>(config_.norm_eps)};
  std::vector<nn::Tensor<T>> skips;
  nn::Tensor<T> cur = z;
  for (int l = 0; l < config_.depth; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    auto e = pass.multires(enc_[lu], cur);
    nn::Tensor<T> s = e;
    for (const auto& u : res_[lu]) s = pass.resunit(u, s);
    skips.push_back(std::move(s));
    auto d = pass.conv(down_[lu], e);
    nn::leaky_relu_inplace(d, pass.slope);
    if (tape) {
      tape->down_in.push_back(std::move(e));
      tape->down_out.push_back(d);
    }
    cur = std::move(d);
  }
  cur = pass.multires(bottleneck_, cur);
  for (int l = config_.depth - 1; l >= 0; --l) {
    const auto lu = static_cast<std::size_t>(l);
    auto up = nn::upsample_nearest2x(cur);
    auto y = pass.conv(up_[lu], up);
    nn::leaky_relu_inplace(y, pass.slope);
    if (tape) {
      tape->up_in.push_back(std::move(up));
      tape->up_out.push_back(y);
    }
    auto cat = nn::concat_channels<T>({&y, &skips[lu]});
    cur = pass.multires(dec_[lu], cat);
  }
  if (tape) tape->head_in = cur;
  return pass.conv(head_, cur);
}

template <typename T>
void DpNetwork<T>::backward(ForwardTape<T>& tape, const nn::Tensor<T>& dy,
                            std::vector<ConvParams<T>>& grads) const {
  if (grads.size() != layers_.size()) throw ShapeMismatch("gradient buffer does not cover every layer");
  const BackPass<T> bp{layers_, tape, grads, static_cast<T>(config_.leaky_slope)};
  auto g = bp.conv(head_, tape.head_in, dy);
  std::vector<nn::Tensor<T>> dskips(static_cast<std::size_t>(config_.depth));
  for (int l = 0; l < config_.depth; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    auto dcat = bp.multires(dec_[lu], g);
    auto parts = nn::split_channels(dcat, {config_.base_filters, dcat.dim(0) - config_.base_filters});
    auto y = std::move(tape.up_out.back());
    auto up = std::move(tape.up_in.back());
    tape.up_out.pop_back();
    tape.up_in.pop_back();
    nn::leaky_relu_backward_inplace(y, parts[0], bp.slope);
    g = nn::upsample_nearest2x_backward(bp.conv(up_[lu], up, parts[0]));
    dskips[lu] = std::move(parts[1]);
  }
  g = bp.multires(bottleneck_, g);
  for (int l = config_.depth - 1; l >= 0; --l) {
    const auto lu = static_cast<std::size_t>(l);
    auto d = std::move(tape.down_out.back());
    auto e = std::move(tape.down_in.back());
    tape.down_out.pop_back();
    tape.down_in.pop_back();
    nn::leaky_relu_backward_inplace(d, g, bp.slope);
    auto de = bp.conv(down_[lu], e, g);
    nn::Tensor<T> ds = std::move(dskips[lu]);
    for (auto it = res_[lu].rbegin(); it != res_[lu].rend(); ++it) ds = bp.resunit(*it, ds);
    nn::add_inplace(de, ds);
    g = bp.multires(enc_[lu], de, l > 0);
  }
}

NoiseInput sample_noise_input(int rows, int cols, int channels, double variance,
                              std::uint64_t seed) {
  if (rows < 1 || cols < 1 || channels < 1) throw InvalidArgument("noise dimensions must be positive");
  if (!(variance > 0.0)) throw InvalidArgument("noise variance must be positive");
  nn::Tensor<float> t({channels, rows, cols});
  Rng rng(seed);
  const double sd = std::sqrt(variance);
  for (float& v : t.values()) v = static_cast<float>(sd * rng.normal());
  return NoiseInput(std::move(t), variance, seed);
}

GridPadding pad_to_grid(int rows, int cols, int depth) {
  if (rows < 1 || cols < 1) throw InvalidArgument("grid dimensions must be positive");
  if (depth < 0) throw InvalidArgument("depth must be nonnegative");
  const int f = 1 << depth;
  GridPadding p;
  p.rows = (rows + f - 1) / f * f;
  p.cols = (cols + f - 1) / f * f;
  p.crop_rows = p.rows - rows;
  p.crop_cols = p.cols - cols;
  return p;
}

ImpulseResponseGrid forward(const DpNetwork<float>& net, const NoiseInput& z, int rows, int cols,
                            double sample_rate_hz, double channel_spacing_m) {
  auto out = net.forward(z.tensor());
  if (rows > out.dim(1) || cols > out.dim(2)) throw ShapeMismatch("crop larger than network output");
  std::vector<float> data(static_cast<std::size_t>(rows) * cols);
  for (int m = 0; m < cols; ++m) {
    for (int n = 0; n < rows; ++n) data[static_cast<std::size_t>(m) * rows + n] = out.at(0, n, m);
  }
  return ImpulseResponseGrid(std::move(data), rows, cols, sample_rate_hz, channel_spacing_m, "dp");
}

template class DpNetwork<float>;
template class DpNetwork<double>;

}  // namespace sfr
