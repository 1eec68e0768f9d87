#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sfr/core_signal.hpp"
#include "sfr/dp_network.hpp"
#include "sfr/lora.hpp"

namespace sfr {

enum class TrainMode { scratch, full_finetune, lora };

std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

struct TrainConfig {
  TrainMode mode = TrainMode::scratch;
  double learning_rate = 0.05;
  int iterations = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  std::optional<int> rank;      // lora only
  std::optional<double> alpha;  // lora only; 2 * rank when absent
  std::uint64_t seed = 0;
  // NMSE columns are filled every eval_every iterations (and always on the
  // final row); other rows carry NaN there.
  int eval_every = 1;
  bool normalize_amplitude = true;

  void validate() const;
};

struct ObservationSet {
  ImpulseResponseGrid observed;  // N x M~
  SamplingMask mask;
  std::optional<ImpulseResponseGrid> full_reference;  // evaluation only

  void validate() const;
};

ObservationSet observe(const ImpulseResponseGrid& full, const SamplingMask& mask,
                       bool keep_reference = true);

struct IterationRow {
  int iteration = 0;  // number of optimizer steps taken before this row
  double l1_loss = 0.0;
  double observed_nmse_db = 0.0;
  double full_nmse_db = 0.0;  // NaN without a reference
};

struct EvalMetrics {
  double full_nmse_db = 0.0;
  double observed_nmse_db = 0.0;
  double unobserved_nmse_db = 0.0;  // NaN when every channel is observed
  std::vector<double> per_channel_db;
};

// Rows 0 .. iterations-1 describe the state before each update; the last row
// (iteration == iterations) is the trained state.
struct TrainRecord {
  TrainMode mode = TrainMode::scratch;
  std::vector<IterationRow> rows;
  std::optional<EvalMetrics> final_metrics;  // present with a reference
  double wall_time_s = 0.0;
  std::size_t trainable_param_count = 0;
  double amplitude_scale = 1.0;

  double initial_loss() const { return rows.front().l1_loss; }
  double final_loss() const { return rows.back().l1_loss; }
  double min_loss() const;
};

// Mean absolute error between the masked columns of `prediction` and the
// observations.
double masked_l1_loss(const ImpulseResponseGrid& prediction, const ObservationSet& obs);

// The training objective evaluated on raw network output (C=1, N', M') for a
// target already divided by `scale`; writes dL/dy when `dy` is non-null.
template <typename T>
double masked_l1_objective(const nn::Tensor<T>& y, const ObservationSet& obs, double scale,
                           nn::Tensor<T>* dy);

// Objective and gradients of a whole network, used by the gradient checks.
template <typename T>
double masked_l1_objective(const DpNetwork<T>& net, const nn::Tensor<T>& z,
                           const ObservationSet& obs, std::vector<ConvParams<T>>* grads);
template <typename T>
double masked_l1_objective(AdaptedNetwork<T>& view, const nn::Tensor<T>& z,
                           const ObservationSet& obs, std::vector<AdapterGrad<T>>* grads);

// scratch / full_finetune: updates every base parameter in place.
TrainRecord fit(DpNetwork<float>& net, const NoiseInput& z, const ObservationSet& obs,
                const TrainConfig& cfg);
// lora: updates only the adapters of `view`; the base stays untouched.
TrainRecord fit(AdaptedNetwork<float>& view, const NoiseInput& z, const ObservationSet& obs,
                const TrainConfig& cfg);

// Network output cropped to rows x cols and multiplied by amplitude_scale.
ImpulseResponseGrid reconstruct(const DpNetwork<float>& net, const NoiseInput& z,
                                const ImpulseResponseGrid& like, double amplitude_scale = 1.0);
ImpulseResponseGrid reconstruct(const AdaptedNetwork<float>& view, const NoiseInput& z,
                                const ImpulseResponseGrid& like, double amplitude_scale = 1.0);

EvalMetrics evaluate_prediction(const ImpulseResponseGrid& prediction,
                                const ImpulseResponseGrid& reference, const SamplingMask& mask);
EvalMetrics evaluate(const DpNetwork<float>& net, const NoiseInput& z,
                     const ImpulseResponseGrid& reference, const SamplingMask& mask,
                     double amplitude_scale = 1.0);
EvalMetrics evaluate(const AdaptedNetwork<float>& view, const NoiseInput& z,
                     const ImpulseResponseGrid& reference, const SamplingMask& mask,
                     double amplitude_scale = 1.0);

// Every unobserved channel copies the nearest observed channel (ties go to
// the lower index).
ImpulseResponseGrid baseline_nearest_neighbor(const ObservationSet& obs);

// Bitwise hash of every base parameter (FNV-1a over the float bytes).
std::uint64_t parameter_hash(const DpNetwork<float>& net);

}  // namespace sfr
