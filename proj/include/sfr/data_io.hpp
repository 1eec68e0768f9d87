#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "sfr/core_signal.hpp"
#include "sfr/dp_network.hpp"
#include "sfr/lora.hpp"

namespace sfr {

// Every file is a text header terminated by a line "END", followed by raw
// little-endian float32 payload bytes.
//
//   grid        SFRGRID <version>   channel-major N*M samples
//   adapters    SFRADAPT <version>  per layer: A then B
//   checkpoint  SFRCKPT <version>   per layer: weight then bias
inline constexpr int kFormatVersion = 1;

void write_grid(const std::filesystem::path& path, const ImpulseResponseGrid& grid);
ImpulseResponseGrid read_grid(const std::filesystem::path& path);

void write_adapters(const std::filesystem::path& path, const AdapterBundle<float>& bundle);
AdapterBundle<float> read_adapters(const std::filesystem::path& path);

void write_checkpoint(const std::filesystem::path& path, const DpNetwork<float>& net);
DpNetwork<float> read_checkpoint(const std::filesystem::path& path);

enum class SampleType { f32, f64 };
enum class ByteOrder { little, big };
enum class SampleOrder { channel_major, time_major };

struct ExternalLayout {
  SampleType dtype = SampleType::f32;
  ByteOrder endianness = ByteOrder::little;
  SampleOrder ordering = SampleOrder::channel_major;
  int num_samples = 0;
  int num_channels = 0;
  double sample_rate_hz = 0.0;
  double channel_spacing_m = 0.03;
};

// Raw headerless sample dump -> grid. f64 samples are rounded to nearest f32.
ImpulseResponseGrid import_external(const std::filesystem::path& path, const ExternalLayout& layout);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
double parse_double(const std::string& text);

// Writes `bytes` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace sfr
