#include "sfr/room_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sfr/errors.hpp"
#include "sfr/random.hpp"

namespace sfr {

namespace {

constexpr int kInterpTaps = 16;
constexpr int kHalfTaps = kInterpTaps / 2;

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

bool strictly_inside(const RoomSpec& room, const Vec3& p) {
  for (int i = 0; i < 3; ++i) {
    if (!(p[i] > 0.0 && p[i] < room.dimensions_m[i])) return false;
  }
  return true;
}

double distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

void validate_room(const RoomSpec& room) {
  for (double d : room.dimensions_m) {
    if (!(d > 0.0) || !std::isfinite(d)) throw InvalidRoom("room dimensions must be positive");
  }
  if (!(room.t60_s > 0.0)) throw InvalidRoom("t60 must be positive");
  if (room.max_reflection_order < 0) throw InvalidRoom("reflection order must be nonnegative");
  if (!(room.speed_of_sound_mps > 0.0)) throw InvalidRoom("speed of sound must be positive");
}

// Adds one band-limited arrival of amplitude `amp` at fractional sample `tau`.
void add_arrival(std::vector<double>& out, double tau, double amp) {
  const auto base = static_cast<long>(std::floor(tau));
  std::array<double, kInterpTaps> taps{};
  double sum = 0.0;
  for (int t = 0; t < kInterpTaps; ++t) {
    const double x = static_cast<double>(base - kHalfTaps + 1 + t) - tau;
    const double window = 0.5 * (1.0 + std::cos(std::numbers::pi * x / kHalfTaps));
    taps[static_cast<std::size_t>(t)] = window * sinc(x);
    sum += taps[static_cast<std::size_t>(t)];
  }
  const auto len = static_cast<long>(out.size());
  for (int t = 0; t < kInterpTaps; ++t) {
    const long idx = base - kHalfTaps + 1 + t;
    if (idx < 0 || idx >= len) continue;
    out[static_cast<std::size_t>(idx)] += amp * taps[static_cast<std::size_t>(t)] / sum;
  }
}

}  // namespace

Vec3 ArrayGeometry::mic_position(int i) const {
  Vec3 p{};
  for (int k = 0; k < 3; ++k) {
    p[k] = first_mic_position_m[k] + static_cast<double>(i) * spacing_m * axis_unit_vector[k];
  }
  return p;
}

double sabine_absorption(const RoomSpec& room) {
  validate_room(room);
  const auto& d = room.dimensions_m;
  const double volume = d[0] * d[1] * d[2];
  const double surface = 2.0 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2]);
  const double a = 0.1611 * volume / (surface * room.t60_s);
  if (!(a > 0.0)) throw InvalidRoom("Sabine absorption is not positive");
  return std::min(a, 1.0);
}

void validate_geometry(const RoomSpec& room, const SourceSpec& source,
                       const ArrayGeometry& array) {
  validate_room(room);
  if (array.num_mics < 1) throw GeometryError("array needs at least one microphone");
  if (!(array.spacing_m > 0.0)) throw GeometryError("array spacing must be positive");
  const auto& ax = array.axis_unit_vector;
  const double norm = std::sqrt(ax[0] * ax[0] + ax[1] * ax[1] + ax[2] * ax[2]);
  if (std::abs(norm - 1.0) > 1e-9) throw GeometryError("array axis must have unit norm");
  if (!strictly_inside(room, source.position_m)) throw GeometryError("source outside the room");
  for (int m = 0; m < array.num_mics; ++m) {
    const Vec3 p = array.mic_position(m);
    if (!strictly_inside(room, p)) {
      throw GeometryError("microphone " + std::to_string(m) + " outside the room");
    }
    if (distance(p, source.position_m) == 0.0) {
      throw GeometryError("source coincides with microphone " + std::to_string(m));
    }
  }
}

ImpulseResponseGrid simulate_rir(const RoomSpec& room, const SourceSpec& source,
                                 const ArrayGeometry& array, double sample_rate_hz,
                                 int rir_length) {
  if (rir_length < 1) throw InvalidArgument("rir_length must be >= 1");
  if (!(sample_rate_hz > 0.0)) throw InvalidArgument("sample rate must be positive");
  validate_geometry(room, source, array);

  const double absorption = sabine_absorption(room);
  const double beta = std::sqrt(1.0 - absorption);
  const int order = room.max_reflection_order;
  const auto& dims = room.dimensions_m;
  const auto& s = source.position_m;
  const double samples_per_meter = sample_rate_hz / room.speed_of_sound_mps;
  const double max_tau = static_cast<double>(rir_length + kHalfTaps);

  // Per-axis reflection count |2n - q| bounded by the total order.
  ImpulseResponseGrid grid(rir_length, array.num_mics, sample_rate_hz, array.spacing_m,
                           "image-source");
  std::vector<double> acc(static_cast<std::size_t>(rir_length));
  for (int m = 0; m < array.num_mics; ++m) {
    const Vec3 r = array.mic_position(m);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int nx = -order; nx <= order; ++nx) {
      for (int qx = 0; qx <= 1; ++qx) {
        const int hx = std::abs(2 * nx - qx);
        if (hx > order) continue;
        const double dx = (1 - 2 * qx) * s[0] - r[0] + 2.0 * nx * dims[0];
        for (int ny = -order; ny <= order; ++ny) {
          for (int qy = 0; qy <= 1; ++qy) {
            const int hy = std::abs(2 * ny - qy);
            if (hx + hy > order) continue;
            const double dy = (1 - 2 * qy) * s[1] - r[1] + 2.0 * ny * dims[1];
            for (int nz = -order; nz <= order; ++nz) {
              for (int qz = 0; qz <= 1; ++qz) {
                const int hz = std::abs(2 * nz - qz);
                const int hits = hx + hy + hz;
                if (hits > order) continue;
                const double dz = (1 - 2 * qz) * s[2] - r[2] + 2.0 * nz * dims[2];
                const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                const double tau = d * samples_per_meter;
                if (tau >= max_tau) continue;
                const double amp = std::pow(beta, hits) / (4.0 * std::numbers::pi * d);
                add_arrival(acc, tau, amp);
              }
            }
          }
        }
      }
    }
    auto col = grid.channel(m);
    for (std::size_t n = 0; n < acc.size(); ++n) col[n] = static_cast<float>(acc[n]);
  }
  return grid;
}

SourceSignal broadband_excitation(int length, double sample_rate_hz, std::uint64_t seed) {
  if (length < 1) throw InvalidArgument("excitation length must be >= 1");
  if (!(sample_rate_hz > 0.0)) throw InvalidArgument("sample rate must be positive");
  SourceSignal sig;
  sig.sample_rate_hz = sample_rate_hz;
  sig.samples.resize(static_cast<std::size_t>(length));
  Rng rng(seed);
  for (double& v : sig.samples) v = rng.normal();
  return sig;
}

}  // namespace sfr
