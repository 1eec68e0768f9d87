#include "sfr/data_io.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <system_error>
#include <unistd.h>
#include <utility>
#include <vector>

#include "sfr/errors.hpp"

namespace sfr {

namespace {

constexpr const char* kGridMagic = "SFRGRID";
constexpr const char* kAdapterMagic = "SFRADAPT";
constexpr const char* kCheckpointMagic = "SFRCKPT";

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

float get_f32(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::string escape(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (c == '%' || c < 0x20 || c == 0x7f) {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 0xf];
    } else {
      out += static_cast<char>(c);
    }
  }
  return out;
}

std::string unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '%') {
      out += s[i];
      continue;
    }
    if (i + 2 >= s.size()) throw CorruptFile("bad escape in header value");
    unsigned value = 0;
    const auto r = std::from_chars(s.data() + i + 1, s.data() + i + 3, value, 16);
    if (r.ec != std::errc() || r.ptr != s.data() + i + 3) throw CorruptFile("bad escape in header value");
    out += static_cast<char>(value);
    i += 2;
  }
  return out;
}

struct Header {
  std::vector<std::pair<std::string, std::string>> fields;
  std::size_t payload_offset = 0;

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : fields) {
      if (k == key) return &v;
    }
    return nullptr;
  }
  const std::string& get(const std::string& key) const {
    if (const auto* v = find(key)) return *v;
    throw CorruptFile("header field '" + key + "' missing");
  }
  std::vector<std::string> all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : fields) {
      if (k == key) out.push_back(v);
    }
    return out;
  }
};

template <typename Int>
Int parse_int(const std::string& text, const std::string& what) {
  Int value{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), value);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw CorruptFile("header field '" + what + "' is not an integer: '" + text + "'");
  }
  return value;
}

double parse_real(const std::string& text, const std::string& what) {
  try {
    return parse_double(text);
  } catch (const InvalidArgument&) {
    throw CorruptFile("header field '" + what + "' is not a number: '" + text + "'");
  }
}

Header parse_header(const std::string& bytes, const char* magic, const std::string& path) {
  Header h;
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) return false;
    line.assign(bytes, pos, nl - pos);
    pos = nl + 1;
    return true;
  };
  std::string line;
  if (!next_line(line)) throw CorruptFile(path + ": missing header");
  const std::string prefix = std::string(magic) + " ";
  if (line.rfind(prefix, 0) != 0) throw CorruptFile(path + ": not a " + magic + " file");
  const int version = parse_int<int>(line.substr(prefix.size()), "format_version");
  if (version != kFormatVersion) {
    throw FormatVersionMismatch(path + ": format version " + std::to_string(version) +
                                ", this build reads version " + std::to_string(kFormatVersion));
  }
  while (true) {
    if (!next_line(line)) throw CorruptFile(path + ": header not terminated by END");
    if (line == "END") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) throw CorruptFile(path + ": malformed header line '" + line + "'");
    h.fields.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  h.payload_offset = pos;
  return h;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

void check_name(const std::string& name) {
  if (name.empty() || name.find_first_of(" \t\r\n=%") != std::string::npos) {
    throw InvalidArgument("layer name '" + name + "' cannot be stored");
  }
}

struct Extent {
  std::size_t offset = 0;
  std::size_t bytes = 0;
  std::string what;
};

// Extents must tile [0, payload_size) exactly.
void check_extents(std::vector<Extent> ext, std::size_t payload_size) {
  std::sort(ext.begin(), ext.end(), [](const Extent& a, const Extent& b) { return a.offset < b.offset; });
  std::size_t cursor = 0;
  for (const auto& e : ext) {
    if (e.offset < cursor) throw OffsetOverlap("payload region of " + e.what + " overlaps its predecessor");
    if (e.offset > cursor) throw CorruptFile("payload gap before " + e.what);
    cursor = e.offset + e.bytes;
  }
  if (payload_size < cursor) throw TruncatedPayload(cursor, payload_size);
  if (payload_size > cursor) {
    throw CorruptFile("payload has " + std::to_string(payload_size - cursor) + " trailing bytes");
  }
}

template <typename Sink>
void decode_floats(const std::string& bytes, std::size_t offset, std::size_t count, Sink sink) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + offset;
  for (std::size_t i = 0; i < count; ++i) sink(i, get_f32(p + 4 * i));
}

void require_finite_tensor(const nn::Tensor<float>& t, const std::string& what) {
  for (float v : t.values()) {
    if (!std::isfinite(v)) throw NonFinitePayload(what + " contains a non-finite value");
  }
}

std::string shape_text(const std::vector<int>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(shape[i]);
  }
  return s;
}

std::vector<int> parse_shape(const std::string& text) {
  std::vector<int> shape;
  for (const auto& part : split(text, ',')) shape.push_back(parse_int<int>(part, "shape"));
  return shape;
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& text) {
  double value = 0.0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), value);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw InvalidArgument("not a number: '" + text + "'");
  }
  return value;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  static std::atomic<unsigned> counter{0};
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("short write to " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move temporary file onto " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_grid(const std::filesystem::path& path, const ImpulseResponseGrid& grid) {
  grid.require_finite();
  std::string out = std::string(kGridMagic) + " " + std::to_string(kFormatVersion) + "\n";
  out += "sample_rate_hz=" + format_double(grid.sample_rate_hz()) + "\n";
  out += "num_samples=" + std::to_string(grid.num_samples()) + "\n";
  out += "num_channels=" + std::to_string(grid.num_channels()) + "\n";
  out += "channel_spacing_m=" + format_double(grid.channel_spacing_m()) + "\n";
  out += "dtype=f32le\n";
  out += "layout=channel_major\n";
  out += "label=" + escape(grid.origin_label()) + "\n";
  out += "END\n";
  out.reserve(out.size() + 4 * grid.samples().size());
  for (float v : grid.samples()) put_f32(out, v);
  write_file_atomic(path, out);
}

ImpulseResponseGrid read_grid(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Header h = parse_header(bytes, kGridMagic, path.string());
  if (h.get("dtype") != "f32le") throw CorruptFile("unsupported grid dtype '" + h.get("dtype") + "'");
  if (h.get("layout") != "channel_major") throw CorruptFile("unsupported grid layout '" + h.get("layout") + "'");
  const auto n = parse_int<int>(h.get("num_samples"), "num_samples");
  const auto m = parse_int<int>(h.get("num_channels"), "num_channels");
  if (n < 1 || m < 1) throw CorruptFile("grid dimensions must be positive");
  const double rate = parse_real(h.get("sample_rate_hz"), "sample_rate_hz");
  const double spacing = parse_real(h.get("channel_spacing_m"), "channel_spacing_m");
  const std::size_t count = static_cast<std::size_t>(n) * static_cast<std::size_t>(m);
  const std::size_t have = bytes.size() - h.payload_offset;
  if (have < 4 * count) throw TruncatedPayload(4 * count, have);
  if (have > 4 * count) {
    throw CorruptFile("grid payload has " + std::to_string(have - 4 * count) +
                      " bytes beyond N*M = " + std::to_string(count) + " samples");
  }
  std::vector<float> samples(count);
  decode_floats(bytes, h.payload_offset, count, [&](std::size_t i, float v) {
    if (!std::isfinite(v)) throw NonFinitePayload("grid sample " + std::to_string(i) + " is not finite");
    samples[i] = v;
  });
  try {
    return ImpulseResponseGrid(std::move(samples), n, m, rate, spacing, unescape(h.get("label")));
  } catch (const InvalidArgument& e) {
    throw CorruptFile(std::string("grid header rejected: ") + e.what());
  }
}

void write_adapters(const std::filesystem::path& path, const AdapterBundle<float>& bundle) {
  if (bundle.base_model_fingerprint.empty()) {
    throw MissingFingerprint("adapter bundle has no base-model fingerprint");
  }
  std::string head = std::string(kAdapterMagic) + " " + std::to_string(kFormatVersion) + "\n";
  head += "rank=" + std::to_string(bundle.rank) + "\n";
  head += "base_model_fingerprint=" + escape(bundle.base_model_fingerprint) + "\n";
  head += "seed=" + std::to_string(bundle.created_with_seed) + "\n";
  head += "layers=" + std::to_string(bundle.adapters.size()) + "\n";
  std::string payload;
  for (const auto& a : bundle.adapters) {
    check_name(a.layer_name);
    a.validate();
    const std::size_t a_off = payload.size();
    for (float v : a.a.values()) put_f32(payload, v);
    const std::size_t b_off = payload.size();
    for (float v : a.b.values()) put_f32(payload, v);
    const auto& s = a.layer_shape;
    head += "layer=" + a.layer_name + " " + std::to_string(s.out_channels) + " " +
            std::to_string(s.in_channels) + " " + std::to_string(s.kernel) + " " +
            format_double(static_cast<double>(a.alpha)) + " " + std::to_string(a_off) + " " +
            std::to_string(4 * a.a.size()) + " " + std::to_string(b_off) + " " +
            std::to_string(4 * a.b.size()) + "\n";
  }
  head += "END\n";
  write_file_atomic(path, head + payload);
}

AdapterBundle<float> read_adapters(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Header h = parse_header(bytes, kAdapterMagic, path.string());
  AdapterBundle<float> bundle;
  const auto* fp = h.find("base_model_fingerprint");
  if (fp == nullptr || fp->empty()) throw MissingFingerprint(path.string() + ": no base-model fingerprint");
  bundle.base_model_fingerprint = unescape(*fp);
  bundle.rank = parse_int<int>(h.get("rank"), "rank");
  bundle.created_with_seed = parse_int<std::uint64_t>(h.get("seed"), "seed");
  if (bundle.rank < 1) throw CorruptFile("adapter rank must be >= 1");
  const auto entries = h.all("layer");
  if (entries.size() != parse_int<std::size_t>(h.get("layers"), "layers")) {
    throw CorruptFile("layer count does not match the number of layer entries");
  }

  struct Entry {
    std::string name;
    LayerShape shape;
    float alpha;
    Extent a, b;
  };
  std::vector<Entry> parsed;
  std::vector<Extent> extents;
  for (const auto& text : entries) {
    const auto f = split(text, ' ');
    if (f.size() != 9) throw CorruptFile("malformed layer entry '" + text + "'");
    Entry e;
    e.name = f[0];
    e.shape = {parse_int<int>(f[1], "out"), parse_int<int>(f[2], "in"), parse_int<int>(f[3], "kernel")};
    if (e.shape.out_channels < 1 || e.shape.in_channels < 1 || e.shape.kernel < 1) {
      throw CorruptFile("layer '" + e.name + "' has a nonpositive shape");
    }
    e.alpha = static_cast<float>(parse_real(f[4], "alpha"));
    e.a = {parse_int<std::size_t>(f[5], "a_offset"), parse_int<std::size_t>(f[6], "a_bytes"), e.name + ".A"};
    e.b = {parse_int<std::size_t>(f[7], "b_offset"), parse_int<std::size_t>(f[8], "b_bytes"), e.name + ".B"};
    const auto r = static_cast<std::size_t>(bundle.rank);
    const std::size_t a_expect = 4 * r * static_cast<std::size_t>(e.shape.in_channels) * e.shape.kernel;
    const std::size_t b_expect = 4 * r * static_cast<std::size_t>(e.shape.out_channels) * e.shape.kernel;
    if (e.a.bytes != a_expect || e.b.bytes != b_expect) {
      throw CorruptFile("layer '" + e.name + "' shape disagrees with its payload byte counts");
    }
    extents.push_back(e.a);
    extents.push_back(e.b);
    parsed.push_back(std::move(e));
  }
  check_extents(extents, bytes.size() - h.payload_offset);

  for (const auto& e : parsed) {
    LoraAdapter<float> ad;
    ad.layer_name = e.name;
    ad.layer_shape = e.shape;
    ad.rank = bundle.rank;
    ad.alpha = e.alpha;
    ad.a = nn::Tensor<float>({bundle.rank, e.shape.in_channels, e.shape.kernel});
    ad.b = nn::Tensor<float>({e.shape.out_channels, e.shape.kernel, bundle.rank});
    decode_floats(bytes, h.payload_offset + e.a.offset, ad.a.size(), [&](std::size_t i, float v) { ad.a[i] = v; });
    decode_floats(bytes, h.payload_offset + e.b.offset, ad.b.size(), [&](std::size_t i, float v) { ad.b[i] = v; });
    require_finite_tensor(ad.a, e.a.what);
    require_finite_tensor(ad.b, e.b.what);
    if (!(ad.alpha > 0.0f) || !std::isfinite(ad.alpha)) throw CorruptFile("layer '" + e.name + "' alpha must be positive");
    bundle.adapters.push_back(std::move(ad));
  }
  return bundle;
}

void write_checkpoint(const std::filesystem::path& path, const DpNetwork<float>& net) {
  const auto& c = net.config();
  std::string head = std::string(kCheckpointMagic) + " " + std::to_string(kFormatVersion) + "\n";
  head += "depth=" + std::to_string(c.depth) + "\n";
  head += "base_filters=" + std::to_string(c.base_filters) + "\n";
  head += "kernel_size=" + std::to_string(c.kernel_size) + "\n";
  head += "input_channels=" + std::to_string(c.input_channels) + "\n";
  head += "output_channels=" + std::to_string(c.output_channels) + "\n";
  head += "seed=" + std::to_string(c.seed) + "\n";
  head += "leaky_slope=" + format_double(c.leaky_slope) + "\n";
  head += "norm_eps=" + format_double(c.norm_eps) + "\n";
  head += "head_init_scale=" + format_double(c.head_init_scale) + "\n";
  head += "fingerprint=" + net.fingerprint() + "\n";
  head += "params=" + std::to_string(2 * net.layers().size()) + "\n";
  std::string payload;
  auto emit = [&](const std::string& name, const nn::Tensor<float>& t) {
    require_finite_tensor(t, name);
    head += "param=" + name + " " + shape_text(t.shape()) + " " + std::to_string(payload.size()) + " " +
            std::to_string(4 * t.size()) + "\n";
    for (float v : t.values()) put_f32(payload, v);
  };
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    emit(net.layers()[i].name + ".weight", net.params()[i].weight);
    emit(net.layers()[i].name + ".bias", net.params()[i].bias);
  }
  head += "END\n";
  write_file_atomic(path, head + payload);
}

DpNetwork<float> read_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Header h = parse_header(bytes, kCheckpointMagic, path.string());
  NetworkConfig c;
  c.depth = parse_int<int>(h.get("depth"), "depth");
  c.base_filters = parse_int<int>(h.get("base_filters"), "base_filters");
  c.kernel_size = parse_int<int>(h.get("kernel_size"), "kernel_size");
  c.input_channels = parse_int<int>(h.get("input_channels"), "input_channels");
  c.output_channels = parse_int<int>(h.get("output_channels"), "output_channels");
  c.seed = parse_int<std::uint64_t>(h.get("seed"), "seed");
  c.leaky_slope = parse_real(h.get("leaky_slope"), "leaky_slope");
  c.norm_eps = parse_real(h.get("norm_eps"), "norm_eps");
  c.head_init_scale = parse_real(h.get("head_init_scale"), "head_init_scale");
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw CorruptFile(std::string("checkpoint configuration rejected: ") + e.what());
  }
  const auto* fp = h.find("fingerprint");
  if (fp == nullptr || fp->empty()) throw MissingFingerprint(path.string() + ": no architecture fingerprint");

  DpNetwork<float> net(c);
  if (*fp != net.fingerprint()) {
    throw CorruptFile("checkpoint fingerprint " + *fp + " does not match its configuration (" +
                      net.fingerprint() + ")");
  }
  const auto entries = h.all("param");
  if (entries.size() != 2 * net.layers().size() ||
      parse_int<std::size_t>(h.get("params"), "params") != entries.size()) {
    throw CorruptFile("checkpoint lists " + std::to_string(entries.size()) + " parameters, architecture has " +
                      std::to_string(2 * net.layers().size()));
  }
  std::vector<Extent> extents;
  std::vector<nn::Tensor<float>*> targets;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    targets.push_back(&net.params()[i].weight);
    targets.push_back(&net.params()[i].bias);
  }
  for (std::size_t j = 0; j < entries.size(); ++j) {
    const auto f = split(entries[j], ' ');
    if (f.size() != 4) throw CorruptFile("malformed parameter entry '" + entries[j] + "'");
    const auto& layer = net.layers()[j / 2];
    const std::string expect_name = layer.name + (j % 2 == 0 ? ".weight" : ".bias");
    if (f[0] != expect_name) throw CorruptFile("expected parameter " + expect_name + ", found " + f[0]);
    if (parse_shape(f[1]) != targets[j]->shape()) throw CorruptFile("parameter " + f[0] + " has the wrong shape");
    Extent e{parse_int<std::size_t>(f[2], "offset"), parse_int<std::size_t>(f[3], "bytes"), f[0]};
    if (e.bytes != 4 * targets[j]->size()) throw CorruptFile("parameter " + f[0] + " byte count disagrees with shape");
    extents.push_back(e);
  }
  check_extents(extents, bytes.size() - h.payload_offset);
  for (std::size_t j = 0; j < extents.size(); ++j) {
    auto& t = *targets[j];
    decode_floats(bytes, h.payload_offset + extents[j].offset, t.size(), [&](std::size_t i, float v) { t[i] = v; });
    require_finite_tensor(t, extents[j].what);
  }
  return net;
}

ImpulseResponseGrid import_external(const std::filesystem::path& path, const ExternalLayout& layout) {
  if (layout.num_samples < 1 || layout.num_channels < 1) {
    throw InvalidArgument("external layout needs positive N and M");
  }
  const std::string bytes = read_file(path);
  const std::size_t width = layout.dtype == SampleType::f32 ? 4 : 8;
  const std::size_t count = static_cast<std::size_t>(layout.num_samples) * static_cast<std::size_t>(layout.num_channels);
  if (bytes.size() != width * count) {
    throw CorruptFile(path.string() + ": holds " + std::to_string(bytes.size()) + " bytes, layout needs " +
                      std::to_string(width * count));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  auto sample = [&](std::size_t k) -> float {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < width; ++b) {
      const std::size_t src = layout.endianness == ByteOrder::little ? b : width - 1 - b;
      bits |= static_cast<std::uint64_t>(p[k * width + src]) << (8 * b);
    }
    if (width == 4) {
      const auto u = static_cast<std::uint32_t>(bits);
      float v;
      std::memcpy(&v, &u, sizeof v);
      return v;
    }
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return static_cast<float>(d);
  };
  std::vector<float> out(count);
  const auto n_total = static_cast<std::size_t>(layout.num_samples);
  const auto m_total = static_cast<std::size_t>(layout.num_channels);
  for (std::size_t m = 0; m < m_total; ++m) {
    for (std::size_t n = 0; n < n_total; ++n) {
      const std::size_t k = layout.ordering == SampleOrder::channel_major ? m * n_total + n : n * m_total + m;
      const float v = sample(k);
      if (!std::isfinite(v)) throw NonFinitePayload(path.string() + ": non-finite sample at index " + std::to_string(k));
      out[m * n_total + n] = v;
    }
  }
  return ImpulseResponseGrid(std::move(out), layout.num_samples, layout.num_channels, layout.sample_rate_hz,
                             layout.channel_spacing_m, path.filename().string());
}

}  // namespace sfr
