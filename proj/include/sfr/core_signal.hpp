#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sfr {

// N x M matrix of impulse-response samples, one column per microphone.
// Storage is channel-major: all N samples of channel 0, then channel 1, ...
class ImpulseResponseGrid {
 public:
  ImpulseResponseGrid() = default;
  ImpulseResponseGrid(int num_samples, int num_channels, double sample_rate_hz,
                      double channel_spacing_m, std::string origin_label = {});
  ImpulseResponseGrid(std::vector<float> channel_major, int num_samples, int num_channels,
                      double sample_rate_hz, double channel_spacing_m,
                      std::string origin_label = {});

  int num_samples() const noexcept { return num_samples_; }
  int num_channels() const noexcept { return num_channels_; }
  double sample_rate_hz() const noexcept { return sample_rate_hz_; }
  double channel_spacing_m() const noexcept { return channel_spacing_m_; }
  const std::string& origin_label() const noexcept { return origin_label_; }
  void set_origin_label(std::string label) { origin_label_ = std::move(label); }

  float at(int n, int m) const { return samples_[index(n, m)]; }
  float& at(int n, int m) { return samples_[index(n, m)]; }

  std::span<const float> channel(int m) const;
  std::span<float> channel(int m);
  std::span<const float> samples() const noexcept { return samples_; }
  std::span<float> samples() noexcept { return samples_; }

  // Throws ShapeMismatch unless both grids are N x M with the same N and M.
  void require_same_shape(const ImpulseResponseGrid& other) const;
  // Throws InvalidArgument on any NaN/Inf sample.
  void require_finite() const;

  bool operator==(const ImpulseResponseGrid& other) const = default;

 private:
  std::size_t index(int n, int m) const {
    return static_cast<std::size_t>(m) * static_cast<std::size_t>(num_samples_) +
           static_cast<std::size_t>(n);
  }

  int num_samples_ = 0;
  int num_channels_ = 0;
  double sample_rate_hz_ = 0.0;
  double channel_spacing_m_ = 0.0;
  std::string origin_label_;
  std::vector<float> samples_;
};

// Column-selection operator. Indices are kept sorted ascending and distinct.
class SamplingMask {
 public:
  SamplingMask(std::vector<int> indices, int total_channels);

  static SamplingMask all(int total_channels);

  const std::vector<int>& indices() const noexcept { return indices_; }
  int total_channels() const noexcept { return total_channels_; }
  int size() const noexcept { return static_cast<int>(indices_.size()); }
  bool contains(int channel) const;
  // Channels not selected by this mask; may be empty.
  std::vector<int> complement() const;

  bool operator==(const SamplingMask& other) const = default;

 private:
  std::vector<int> indices_;
  int total_channels_ = 0;
};

struct SourceSignal {
  std::vector<double> samples;
  double sample_rate_hz = 0.0;
};

ImpulseResponseGrid apply_sampling(const ImpulseResponseGrid& grid, const SamplingMask& mask);

// Uniform draw of m_tilde distinct channels out of total_channels.
// Procedure (stable across releases): mt19937_64 seeded with `seed`; for
// i = 0 .. m_tilde-1 swap pool[i] with pool[i + next() % (total - i)] in the
// identity pool 0..total-1; the first m_tilde entries, sorted, are the mask.
SamplingMask make_random_mask(int total_channels, int m_tilde, std::uint64_t seed);

// p = h * s + e with e ~ N(0, noise_std^2) i.i.d.; full length N + L - 1.
std::vector<double> render_mic_signal(std::span<const double> rir, double rir_sample_rate_hz,
                                      const SourceSignal& source, double noise_std,
                                      std::uint64_t seed);
std::vector<double> render_mic_signal(const ImpulseResponseGrid& grid, int channel,
                                      const SourceSignal& source, double noise_std,
                                      std::uint64_t seed);

inline constexpr double kNmseFloorDb = -300.0;

// Channel-averaged normalized squared error in dB, floored at kNmseFloorDb.
double nmse(const ImpulseResponseGrid& estimate, const ImpulseResponseGrid& reference);
std::vector<double> nmse_per_channel(const ImpulseResponseGrid& estimate,
                                     const ImpulseResponseGrid& reference);

// Converts a linear error ratio to dB with the same floor as nmse().
double ratio_to_db(double ratio);

}  // namespace sfr
