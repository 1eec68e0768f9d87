#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sfr/core_signal.hpp"

namespace sfr {

using Vec3 = std::array<double, 3>;

struct RoomSpec {
  Vec3 dimensions_m{};
  double t60_s = 0.0;
  int max_reflection_order = 0;
  double speed_of_sound_mps = 343.0;
};

// Uniform linear array: mic i sits at first_mic_position_m + i * spacing_m * axis.
struct ArrayGeometry {
  Vec3 first_mic_position_m{};
  Vec3 axis_unit_vector{1.0, 0.0, 0.0};
  int num_mics = 0;
  double spacing_m = 0.03;

  Vec3 mic_position(int i) const;
};

struct SourceSpec {
  Vec3 position_m{};
};

// a = 0.1611 V / (S T60), clamped to (0, 1].
double sabine_absorption(const RoomSpec& room);

// Shoebox image-source simulation. Each image of total wall-hit count h
// contributes (1 - a)^(h / 2) / (4 pi d), placed at fractional delay fs*d/c
// with a 16-tap Hann-windowed sinc normalized to unit DC gain.
ImpulseResponseGrid simulate_rir(const RoomSpec& room, const SourceSpec& source,
                                 const ArrayGeometry& array, double sample_rate_hz,
                                 int rir_length);

// Unit-variance Gaussian white noise.
SourceSignal broadband_excitation(int length, double sample_rate_hz, std::uint64_t seed);

// Geometry validation used by simulate_rir; exposed for spec loading.
void validate_geometry(const RoomSpec& room, const SourceSpec& source,
                       const ArrayGeometry& array);

}  // namespace sfr
