#include "sfr/core_signal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sfr/errors.hpp"
#include "sfr/random.hpp"

namespace sfr {

ImpulseResponseGrid::ImpulseResponseGrid(int num_samples, int num_channels, double sample_rate_hz,
                                         double channel_spacing_m, std::string origin_label)
    : ImpulseResponseGrid(std::vector<float>(static_cast<std::size_t>(std::max(num_samples, 0)) *
                                             static_cast<std::size_t>(std::max(num_channels, 0))),
                          num_samples, num_channels, sample_rate_hz, channel_spacing_m,
                          std::move(origin_label)) {}

ImpulseResponseGrid::ImpulseResponseGrid(std::vector<float> channel_major, int num_samples,
                                         int num_channels, double sample_rate_hz,
                                         double channel_spacing_m, std::string origin_label)
    : num_samples_(num_samples),
      num_channels_(num_channels),
      sample_rate_hz_(sample_rate_hz),
      channel_spacing_m_(channel_spacing_m),
      origin_label_(std::move(origin_label)),
      samples_(std::move(channel_major)) {
  if (num_samples < 1 || num_channels < 1) {
    throw InvalidArgument("grid must have N >= 1 and M >= 1");
  }
  if (!(sample_rate_hz > 0.0) || !std::isfinite(sample_rate_hz)) {
    throw InvalidArgument("sample rate must be positive");
  }
  if (!(channel_spacing_m > 0.0) || !std::isfinite(channel_spacing_m)) {
    throw InvalidArgument("channel spacing must be positive");
  }
  if (samples_.size() != static_cast<std::size_t>(num_samples) * num_channels) {
    throw ShapeMismatch("grid payload holds " + std::to_string(samples_.size()) +
                        " samples, expected N*M = " +
                        std::to_string(static_cast<std::size_t>(num_samples) * num_channels));
  }
  require_finite();
}

std::span<const float> ImpulseResponseGrid::channel(int m) const {
  if (m < 0 || m >= num_channels_) throw InvalidArgument("channel index out of range");
  return std::span<const float>(samples_).subspan(index(0, m), num_samples_);
}

std::span<float> ImpulseResponseGrid::channel(int m) {
  if (m < 0 || m >= num_channels_) throw InvalidArgument("channel index out of range");
  return std::span<float>(samples_).subspan(index(0, m), num_samples_);
}

void ImpulseResponseGrid::require_same_shape(const ImpulseResponseGrid& other) const {
  if (num_samples_ != other.num_samples_ || num_channels_ != other.num_channels_) {
    throw ShapeMismatch("grid shapes differ: " + std::to_string(num_samples_) + "x" +
                        std::to_string(num_channels_) + " vs " +
                        std::to_string(other.num_samples_) + "x" +
                        std::to_string(other.num_channels_));
  }
}

void ImpulseResponseGrid::require_finite() const {
  for (float v : samples_) {
    if (!std::isfinite(v)) throw InvalidArgument("grid contains a non-finite sample");
  }
}

SamplingMask::SamplingMask(std::vector<int> indices, int total_channels)
    : indices_(std::move(indices)), total_channels_(total_channels) {
  if (total_channels < 1) throw InvalidArgument("mask needs at least one channel");
  std::sort(indices_.begin(), indices_.end());
  if (indices_.empty()) throw InvalidArgument("mask must select at least one channel");
  if (std::adjacent_find(indices_.begin(), indices_.end()) != indices_.end()) {
    throw InvalidArgument("mask indices must be distinct");
  }
  if (indices_.front() < 0 || indices_.back() >= total_channels) {
    throw MaskMismatch("mask index out of range [0, " + std::to_string(total_channels) + ")");
  }
}

SamplingMask SamplingMask::all(int total_channels) {
  std::vector<int> idx(static_cast<std::size_t>(std::max(total_channels, 0)));
  std::iota(idx.begin(), idx.end(), 0);
  return SamplingMask(std::move(idx), total_channels);
}

bool SamplingMask::contains(int channel) const {
  return std::binary_search(indices_.begin(), indices_.end(), channel);
}

std::vector<int> SamplingMask::complement() const {
  std::vector<int> out;
  for (int m = 0; m < total_channels_; ++m) {
    if (!contains(m)) out.push_back(m);
  }
  return out;
}

ImpulseResponseGrid apply_sampling(const ImpulseResponseGrid& grid, const SamplingMask& mask) {
  if (mask.total_channels() != grid.num_channels()) {
    throw MaskMismatch("mask expects " + std::to_string(mask.total_channels()) +
                       " channels, grid has " + std::to_string(grid.num_channels()));
  }
  const auto n = static_cast<std::size_t>(grid.num_samples());
  std::vector<float> out;
  out.reserve(n * mask.indices().size());
  for (int m : mask.indices()) {
    auto col = grid.channel(m);
    out.insert(out.end(), col.begin(), col.end());
  }
  return ImpulseResponseGrid(std::move(out), grid.num_samples(), mask.size(),
                             grid.sample_rate_hz(), grid.channel_spacing_m(),
                             grid.origin_label());
}

SamplingMask make_random_mask(int total_channels, int m_tilde, std::uint64_t seed) {
  if (total_channels < 1) throw InvalidArgument("total channel count must be >= 1");
  if (m_tilde < 1 || m_tilde > total_channels) {
    throw InvalidArgument("need 1 <= M_tilde <= M, got M_tilde=" + std::to_string(m_tilde) +
                          ", M=" + std::to_string(total_channels));
  }
  std::vector<int> pool(static_cast<std::size_t>(total_channels));
  std::iota(pool.begin(), pool.end(), 0);
  std::mt19937_64 engine(seed);
  for (int i = 0; i < m_tilde; ++i) {
    const auto remaining = static_cast<std::uint64_t>(total_channels - i);
    const auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(engine() % remaining);
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(m_tilde));
  return SamplingMask(std::move(pool), total_channels);
}

std::vector<double> render_mic_signal(std::span<const double> rir, double rir_sample_rate_hz,
                                      const SourceSignal& source, double noise_std,
                                      std::uint64_t seed) {
  if (rir.empty()) throw InvalidArgument("impulse response is empty");
  if (source.samples.empty()) throw InvalidArgument("source signal is empty");
  if (rir_sample_rate_hz != source.sample_rate_hz) {
    throw IncompatibleSignal("sample rate mismatch: impulse response at " +
                             std::to_string(rir_sample_rate_hz) + " Hz, source at " +
                             std::to_string(source.sample_rate_hz) + " Hz");
  }
  if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be nonnegative");

  const std::size_t n = rir.size();
  const std::size_t l = source.samples.size();
  std::vector<double> out(n + l - 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double h = rir[i];
    if (h == 0.0) continue;
    for (std::size_t j = 0; j < l; ++j) out[i + j] += h * source.samples[j];
  }
  if (noise_std > 0.0) {
    Rng rng(seed);
    for (double& v : out) v += noise_std * rng.normal();
  }
  return out;
}

std::vector<double> render_mic_signal(const ImpulseResponseGrid& grid, int channel,
                                      const SourceSignal& source, double noise_std,
                                      std::uint64_t seed) {
  auto col = grid.channel(channel);
  std::vector<double> rir(col.begin(), col.end());
  return render_mic_signal(rir, grid.sample_rate_hz(), source, noise_std, seed);
}

double ratio_to_db(double ratio) {
  if (!(ratio > 0.0)) return kNmseFloorDb;
  return std::max(10.0 * std::log10(ratio), kNmseFloorDb);
}

namespace {

std::vector<double> channel_ratios(const ImpulseResponseGrid& estimate,
                                   const ImpulseResponseGrid& reference) {
  estimate.require_same_shape(reference);
  std::vector<double> ratios(static_cast<std::size_t>(reference.num_channels()));
  for (int m = 0; m < reference.num_channels(); ++m) {
    auto est = estimate.channel(m);
    auto ref = reference.channel(m);
    double err = 0.0;
    double energy = 0.0;
    for (std::size_t n = 0; n < ref.size(); ++n) {
      const double d = static_cast<double>(est[n]) - static_cast<double>(ref[n]);
      err += d * d;
      energy += static_cast<double>(ref[n]) * static_cast<double>(ref[n]);
    }
    if (energy == 0.0) {
      throw DegenerateReference("reference channel " + std::to_string(m) + " has zero energy");
    }
    ratios[static_cast<std::size_t>(m)] = err / energy;
  }
  return ratios;
}

}  // namespace

double nmse(const ImpulseResponseGrid& estimate, const ImpulseResponseGrid& reference) {
  const auto ratios = channel_ratios(estimate, reference);
  const double mean = std::accumulate(ratios.begin(), ratios.end(), 0.0) /
                      static_cast<double>(ratios.size());
  return ratio_to_db(mean);
}

std::vector<double> nmse_per_channel(const ImpulseResponseGrid& estimate,
                                     const ImpulseResponseGrid& reference) {
  auto ratios = channel_ratios(estimate, reference);
  for (double& r : ratios) r = ratio_to_db(r);
  return ratios;
}

}  // namespace sfr
