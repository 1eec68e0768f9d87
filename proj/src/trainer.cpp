#include "sfr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "sfr/errors.hpp"

namespace sfr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::scratch: return "scratch";
    case TrainMode::full_finetune: return "ft";
    case TrainMode::lora: return "lora";
  }
  return "unknown";
}

TrainMode parse_train_mode(std::string_view text) {
  if (text == "scratch") return TrainMode::scratch;
  if (text == "ft" || text == "full_finetune") return TrainMode::full_finetune;
  if (text == "lora") return TrainMode::lora;
  throw InvalidArgument("unknown training mode '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  if (iterations < 1) throw InvalidArgument("iterations must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("learning rate must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidArgument("optimizer betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw InvalidArgument("optimizer epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be nonnegative");
  if (eval_every < 1) throw InvalidArgument("eval_every must be >= 1");
  if (mode == TrainMode::lora) {
    if (!rank || *rank < 1) throw InvalidArgument("lora mode needs rank >= 1");
    if (alpha && !(*alpha > 0.0)) throw InvalidArgument("lora alpha must be positive");
  } else if (rank || alpha) {
    throw InvalidArgument("rank/alpha are only meaningful in lora mode");
  }
}

void ObservationSet::validate() const {
  if (observed.num_channels() != mask.size()) {
    throw MaskMismatch("observed grid has " + std::to_string(observed.num_channels()) +
                       " channels but the mask selects " + std::to_string(mask.size()));
  }
  if (full_reference) {
    if (full_reference->num_channels() != mask.total_channels() ||
        full_reference->num_samples() != observed.num_samples()) {
      throw ShapeMismatch("reference grid does not match the observation geometry");
    }
  }
}

ObservationSet observe(const ImpulseResponseGrid& full, const SamplingMask& mask,
                       bool keep_reference) {
  ObservationSet obs{apply_sampling(full, mask), mask, std::nullopt};
  if (keep_reference) obs.full_reference = full;
  return obs;
}

double TrainRecord::min_loss() const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : rows) best = std::min(best, r.l1_loss);
  return best;
}

double masked_l1_loss(const ImpulseResponseGrid& prediction, const ObservationSet& obs) {
  obs.validate();
  if (prediction.num_channels() != obs.mask.total_channels() ||
      prediction.num_samples() != obs.observed.num_samples()) {
    throw ShapeMismatch("prediction must be N x M with M = mask.total_channels");
  }
  double sum = 0.0;
  const auto& idx = obs.mask.indices();
  for (std::size_t j = 0; j < idx.size(); ++j) {
    auto p = prediction.channel(idx[j]);
    auto o = obs.observed.channel(static_cast<int>(j));
    for (std::size_t n = 0; n < p.size(); ++n) sum += std::abs(static_cast<double>(p[n]) - static_cast<double>(o[n]));
  }
  return sum / (static_cast<double>(obs.observed.num_samples()) * static_cast<double>(idx.size()));
}

template <typename T>
double masked_l1_objective(const nn::Tensor<T>& y, const ObservationSet& obs, double scale,
                           nn::Tensor<T>* dy) {
  const int rows = obs.observed.num_samples();
  if (y.rank() != 3 || y.dim(0) != 1 || y.dim(1) < rows || y.dim(2) < obs.mask.total_channels()) {
    throw ShapeMismatch("network output " + nn::shape_string(y.shape()) +
                        " does not cover the observation grid");
  }
  if (dy) *dy = nn::Tensor<T>(y.shape());
  const auto& idx = obs.mask.indices();
  const double count = static_cast<double>(rows) * static_cast<double>(idx.size());
  const T inv_scale = static_cast<T>(1.0 / scale);
  const T step = static_cast<T>(1.0 / count);
  double sum = 0.0;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    auto o = obs.observed.channel(static_cast<int>(j));
    for (int n = 0; n < rows; ++n) {
      const T r = y.at(0, n, idx[j]) - static_cast<T>(o[static_cast<std::size_t>(n)]) * inv_scale;
      sum += std::abs(static_cast<double>(r));
      if (dy) dy->at(0, n, idx[j]) = r > T{0} ? step : (r < T{0} ? -step : T{0});
    }
  }
  return sum / count;
}

namespace {

template <typename T>
void check_input_covers(const nn::Tensor<T>& z, const ObservationSet& obs) {
  obs.validate();
  if (z.rank() != 3 || z.dim(1) < obs.observed.num_samples() ||
      z.dim(2) < obs.mask.total_channels()) {
    throw ShapeMismatch("noise input smaller than the observation grid");
  }
}

}  // namespace

template <typename T>
double masked_l1_objective(const DpNetwork<T>& net, const nn::Tensor<T>& z,
                           const ObservationSet& obs, std::vector<ConvParams<T>>* grads) {
  check_input_covers(z, obs);
  ForwardTape<T> tape;
  const auto y = net.forward(z, net.weights(), grads ? &tape : nullptr);
  nn::Tensor<T> dy;
  const double loss = masked_l1_objective<T>(y, obs, 1.0, grads ? &dy : nullptr);
  if (grads) net.backward(tape, dy, *grads);
  return loss;
}

template <typename T>
double masked_l1_objective(AdaptedNetwork<T>& view, const nn::Tensor<T>& z,
                           const ObservationSet& obs, std::vector<AdapterGrad<T>>* grads) {
  check_input_covers(z, obs);
  if (!grads) return masked_l1_objective<T>(view.forward(z), obs, 1.0, nullptr);
  ForwardTape<T> tape;
  const auto y = view.forward(z, &tape);
  nn::Tensor<T> dy;
  const double loss = masked_l1_objective(y, obs, 1.0, &dy);
  view.backward(tape, dy, *grads);
  return loss;
}

namespace {

struct Slot {
  float* param;
  const float* grad;
  std::size_t size;
};

class AdamW {
 public:
  AdamW(const TrainConfig& cfg, const std::vector<Slot>& slots) : cfg_(cfg) {
    for (const auto& s : slots) {
      m_.emplace_back(s.size, 0.0f);
      v_.emplace_back(s.size, 0.0f);
    }
  }

  void step(const std::vector<Slot>& slots) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const auto b1 = static_cast<float>(cfg_.beta1);
    const auto b2 = static_cast<float>(cfg_.beta2);
    const auto decay = static_cast<float>(1.0 - cfg_.learning_rate * cfg_.weight_decay);
    const auto step_size = static_cast<float>(cfg_.learning_rate / bc1);
    const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<float>(cfg_.epsilon);
    for (std::size_t k = 0; k < slots.size(); ++k) {
      float* p = slots[k].param;
      const float* g = slots[k].grad;
      float* m = m_[k].data();
      float* v = v_[k].data();
      for (std::size_t i = 0; i < slots[k].size; ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        p[i] *= decay;
        p[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<std::vector<float>> m_, v_;
  int t_ = 0;
};

class BaseModel {
 public:
  explicit BaseModel(DpNetwork<float>& net) : net_(net), grads_(net.zero_like_params()) {
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      auto& p = net_.params()[i];
      slots_.push_back({p.weight.data(), grads_[i].weight.data(), p.weight.size()});
      slots_.push_back({p.bias.data(), grads_[i].bias.data(), p.bias.size()});
    }
  }

  nn::Tensor<float> forward(const nn::Tensor<float>& z) {
    return net_.forward(z, net_.weights(), &tape_);
  }
  nn::Tensor<float> infer(const nn::Tensor<float>& z) const { return net_.forward(z); }
  void backward(const nn::Tensor<float>& dy) {
    for (auto& g : grads_) {
      g.weight.fill(0.0f);
      g.bias.fill(0.0f);
    }
    net_.backward(tape_, dy, grads_);
  }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  DpNetwork<float>& net_;
  std::vector<ConvParams<float>> grads_;
  ForwardTape<float> tape_;
  std::vector<Slot> slots_;
};

class LoraModel {
 public:
  explicit LoraModel(AdaptedNetwork<float>& view) : view_(view), grads_(view.zero_grads()) {
    auto& adapters = view_.bundle().adapters;
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      slots_.push_back({adapters[i].a.data(), grads_[i].a.data(), adapters[i].a.size()});
      slots_.push_back({adapters[i].b.data(), grads_[i].b.data(), adapters[i].b.size()});
    }
  }

  nn::Tensor<float> forward(const nn::Tensor<float>& z) { return view_.forward(z, &tape_); }
  nn::Tensor<float> infer(const nn::Tensor<float>& z) const { return view_.forward(z); }
  void backward(const nn::Tensor<float>& dy) {
    for (auto& g : grads_) {
      g.a.fill(0.0f);
      g.b.fill(0.0f);
    }
    view_.backward(tape_, dy, grads_);
  }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  AdaptedNetwork<float>& view_;
  std::vector<AdapterGrad<float>> grads_;
  ForwardTape<float> tape_;
  std::vector<Slot> slots_;
};

double observation_scale(const ObservationSet& obs, bool normalize) {
  if (!normalize) return 1.0;
  double peak = 0.0;
  for (float v : obs.observed.samples()) peak = std::max(peak, std::abs(static_cast<double>(v)));
  return peak > 0.0 ? peak : 1.0;
}

// Mean of per-channel error ratios between scale * y[:, :, channels[j]] and
// the matching columns of `ref` (ref_columns[j]).
double nmse_from_output(const nn::Tensor<float>& y, double scale, const ImpulseResponseGrid& ref,
                        const std::vector<int>& channels, const std::vector<int>& ref_columns) {
  double total = 0.0;
  for (std::size_t j = 0; j < channels.size(); ++j) {
    auto r = ref.channel(ref_columns[j]);
    double err = 0.0;
    double energy = 0.0;
    for (std::size_t n = 0; n < r.size(); ++n) {
      const auto est = static_cast<double>(static_cast<float>(
          scale * static_cast<double>(y.at(0, static_cast<int>(n), channels[j]))));
      const double d = est - static_cast<double>(r[n]);
      err += d * d;
      energy += static_cast<double>(r[n]) * static_cast<double>(r[n]);
    }
    if (energy == 0.0) throw DegenerateReference("reference channel has zero energy");
    total += err / energy;
  }
  return ratio_to_db(total / static_cast<double>(channels.size()));
}

ImpulseResponseGrid crop(const nn::Tensor<float>& y, const ImpulseResponseGrid& like,
                         int channels, double scale) {
  const int rows = like.num_samples();
  if (y.dim(1) < rows || y.dim(2) < channels) throw ShapeMismatch("crop larger than network output");
  std::vector<float> data(static_cast<std::size_t>(rows) * static_cast<std::size_t>(channels));
  for (int m = 0; m < channels; ++m) {
    for (int n = 0; n < rows; ++n) {
      data[static_cast<std::size_t>(m) * rows + n] =
          static_cast<float>(scale * static_cast<double>(y.at(0, n, m)));
    }
  }
  return ImpulseResponseGrid(std::move(data), rows, channels, like.sample_rate_hz(),
                             like.channel_spacing_m(), "dp");
}

template <typename Model>
TrainRecord run_fit(Model& model, const NoiseInput& z, const ObservationSet& obs,
                    const TrainConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  cfg.validate();
  obs.validate();
  if (z.rows() < obs.observed.num_samples() || z.cols() < obs.mask.total_channels()) {
    throw ShapeMismatch("noise input smaller than the observation grid");
  }

  TrainRecord rec;
  rec.mode = cfg.mode;
  rec.amplitude_scale = observation_scale(obs, cfg.normalize_amplitude);
  for (const auto& s : model.slots()) rec.trainable_param_count += s.size;

  std::vector<int> observed_cols(obs.mask.indices().size());
  std::iota(observed_cols.begin(), observed_cols.end(), 0);
  std::vector<int> all_channels(static_cast<std::size_t>(obs.mask.total_channels()));
  std::iota(all_channels.begin(), all_channels.end(), 0);

  auto make_row = [&](int iteration, const nn::Tensor<float>& y, nn::Tensor<float>* dy) {
    IterationRow row;
    row.iteration = iteration;
    row.l1_loss = masked_l1_objective(y, obs, rec.amplitude_scale, dy);
    if (!std::isfinite(row.l1_loss)) {
      throw TrainingDiverged(iteration, "training diverged at iteration " + std::to_string(iteration));
    }
    const bool eval = iteration % cfg.eval_every == 0 || iteration == cfg.iterations;
    row.observed_nmse_db = eval ? nmse_from_output(y, rec.amplitude_scale, obs.observed,
                                                   obs.mask.indices(), observed_cols)
                                : kNaN;
    row.full_nmse_db = eval && obs.full_reference
                           ? nmse_from_output(y, rec.amplitude_scale, *obs.full_reference,
                                              all_channels, all_channels)
                           : kNaN;
    return row;
  };

  AdamW opt(cfg, model.slots());
  nn::Tensor<float> dy;
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto y = model.forward(z.tensor());
    rec.rows.push_back(make_row(it, y, &dy));
    model.backward(dy);
    for (const auto& s : model.slots()) {
      for (std::size_t i = 0; i < s.size; ++i) {
        if (!std::isfinite(s.grad[i])) {
          throw TrainingDiverged(it, "non-finite gradient at iteration " + std::to_string(it));
        }
      }
    }
    opt.step(model.slots());
  }
  const auto y = model.infer(z.tensor());
  rec.rows.push_back(make_row(cfg.iterations, y, nullptr));
  if (obs.full_reference) {
    rec.final_metrics = evaluate_prediction(
        crop(y, *obs.full_reference, obs.mask.total_channels(), rec.amplitude_scale),
        *obs.full_reference, obs.mask);
  }
  rec.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

}  // namespace

TrainRecord fit(DpNetwork<float>& net, const NoiseInput& z, const ObservationSet& obs,
                const TrainConfig& cfg) {
  if (cfg.mode == TrainMode::lora) {
    throw InvalidArgument("lora mode trains adapters; pass an AdaptedNetwork");
  }
  BaseModel model(net);
  return run_fit(model, z, obs, cfg);
}

TrainRecord fit(AdaptedNetwork<float>& view, const NoiseInput& z, const ObservationSet& obs,
                const TrainConfig& cfg) {
  if (cfg.mode != TrainMode::lora) {
    throw InvalidArgument("an adapted network can only be trained in lora mode");
  }
  if (view.bundle().adapters.empty()) throw InvalidArgument("lora mode needs attached adapters");
  if (cfg.rank && *cfg.rank != view.bundle().rank) {
    throw IncompatibleAdapter("configured rank differs from the attached bundle");
  }
  LoraModel model(view);
  return run_fit(model, z, obs, cfg);
}

ImpulseResponseGrid reconstruct(const DpNetwork<float>& net, const NoiseInput& z,
                                const ImpulseResponseGrid& like, double amplitude_scale) {
  return crop(net.forward(z.tensor()), like, like.num_channels(), amplitude_scale);
}

ImpulseResponseGrid reconstruct(const AdaptedNetwork<float>& view, const NoiseInput& z,
                                const ImpulseResponseGrid& like, double amplitude_scale) {
  return crop(view.forward(z.tensor()), like, like.num_channels(), amplitude_scale);
}

EvalMetrics evaluate_prediction(const ImpulseResponseGrid& prediction,
                                const ImpulseResponseGrid& reference, const SamplingMask& mask) {
  prediction.require_same_shape(reference);
  if (mask.total_channels() != reference.num_channels()) {
    throw MaskMismatch("mask width differs from the reference channel count");
  }
  EvalMetrics m;
  m.full_nmse_db = nmse(prediction, reference);
  m.observed_nmse_db = nmse(apply_sampling(prediction, mask), apply_sampling(reference, mask));
  const auto rest = mask.complement();
  if (rest.empty()) {
    m.unobserved_nmse_db = kNaN;
  } else {
    const SamplingMask cm(rest, mask.total_channels());
    m.unobserved_nmse_db = nmse(apply_sampling(prediction, cm), apply_sampling(reference, cm));
  }
  m.per_channel_db = nmse_per_channel(prediction, reference);
  return m;
}

EvalMetrics evaluate(const DpNetwork<float>& net, const NoiseInput& z,
                     const ImpulseResponseGrid& reference, const SamplingMask& mask,
                     double amplitude_scale) {
  return evaluate_prediction(reconstruct(net, z, reference, amplitude_scale), reference, mask);
}

EvalMetrics evaluate(const AdaptedNetwork<float>& view, const NoiseInput& z,
                     const ImpulseResponseGrid& reference, const SamplingMask& mask,
                     double amplitude_scale) {
  return evaluate_prediction(reconstruct(view, z, reference, amplitude_scale), reference, mask);
}

ImpulseResponseGrid baseline_nearest_neighbor(const ObservationSet& obs) {
  obs.validate();
  const auto& idx = obs.mask.indices();
  const int total = obs.mask.total_channels();
  const int rows = obs.observed.num_samples();
  ImpulseResponseGrid out(rows, total, obs.observed.sample_rate_hz(),
                          obs.observed.channel_spacing_m(), "nearest_neighbor");
  for (int m = 0; m < total; ++m) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < idx.size(); ++j) {
      if (std::abs(idx[j] - m) < std::abs(idx[best] - m)) best = j;
    }
    auto src = obs.observed.channel(static_cast<int>(best));
    std::copy(src.begin(), src.end(), out.channel(m).begin());
  }
  return out;
}

std::uint64_t parameter_hash(const DpNetwork<float>& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const nn::Tensor<float>& t) {
    for (float v : t.values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (const auto& p : net.params()) {
    feed(p.weight);
    feed(p.bias);
  }
  return h;
}

template double masked_l1_objective(const nn::Tensor<float>&, const ObservationSet&, double,
                                    nn::Tensor<float>*);
template double masked_l1_objective(const nn::Tensor<double>&, const ObservationSet&, double,
                                    nn::Tensor<double>*);
template double masked_l1_objective(const DpNetwork<float>&, const nn::Tensor<float>&,
                                    const ObservationSet&, std::vector<ConvParams<float>>*);
template double masked_l1_objective(const DpNetwork<double>&, const nn::Tensor<double>&,
                                    const ObservationSet&, std::vector<ConvParams<double>>*);
template double masked_l1_objective(AdaptedNetwork<float>&, const nn::Tensor<float>&,
                                    const ObservationSet&, std::vector<AdapterGrad<float>>*);
template double masked_l1_objective(AdaptedNetwork<double>&, const nn::Tensor<double>&,
                                    const ObservationSet&, std::vector<AdapterGrad<double>>*);

}  // namespace sfr
