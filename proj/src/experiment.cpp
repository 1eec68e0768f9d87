#include "sfr/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "json.hpp"

#include "sfr/data_io.hpp"
#include "sfr/errors.hpp"
#include "sfr/lora.hpp"
#include "sfr/plot.hpp"

namespace sfr::experiment {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kTrainHeader = "iteration,l1_loss,observed_nmse_db,full_nmse_db";
constexpr const char* kResultHeader =
    "mode,rank,m_tilde,full_nmse_db,observed_nmse_db,unobserved_nmse_db,trainable_params,trainable_fraction";

// ---- spec parsing -----------------------------------------------------------

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }) ==
        known.end()) {
      throw InvalidArgument(where + ": unknown field '" + it.key() + "'");
    }
  }
}

template <typename T>
T get(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw InvalidArgument(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InvalidArgument(where + "." + key + ": " + e.what());
  }
}

template <typename T>
void get_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (j.contains(key)) out = get<T>(j, key, where);
}

Vec3 vec3(const json& j, const char* key, const std::string& where) {
  const auto v = get<std::vector<double>>(j, key, where);
  if (v.size() != 3) throw InvalidArgument(where + "." + key + ": expected 3 numbers");
  return {v[0], v[1], v[2]};
}

RoomSpec parse_room(const json& j, const std::string& where) {
  RoomSpec r;
  r.dimensions_m = vec3(j, "dimensions_m", where);
  r.t60_s = get<double>(j, "t60_s", where);
  r.max_reflection_order = get<int>(j, "max_reflection_order", where);
  get_opt(j, "speed_of_sound_mps", r.speed_of_sound_mps, where);
  return r;
}

ArrayGeometry parse_array(const json& j, const std::string& where) {
  reject_unknown(j, {"first_mic_position_m", "axis_unit_vector", "num_mics", "spacing_m"}, where);
  ArrayGeometry a;
  a.first_mic_position_m = vec3(j, "first_mic_position_m", where);
  if (j.contains("axis_unit_vector")) a.axis_unit_vector = vec3(j, "axis_unit_vector", where);
  a.num_mics = get<int>(j, "num_mics", where);
  get_opt(j, "spacing_m", a.spacing_m, where);
  return a;
}

SourceSpec parse_source(const json& j, const std::string& where) {
  return SourceSpec{vec3(j, "position_m", where)};
}

MaskSpec parse_mask(const json& j, const std::string& where) {
  reject_unknown(j, {"m_tilde", "seed"}, where);
  MaskSpec m;
  m.m_tilde = get<int>(j, "m_tilde", where);
  get_opt(j, "seed", m.seed, where);
  return m;
}

std::optional<fs::path> grid_file(const json& j, const fs::path& base, const std::string& where) {
  if (!j.contains("grid_file")) return std::nullopt;
  fs::path p = get<std::string>(j, "grid_file", where);
  if (p.is_relative()) p = base / p;
  return p;
}

NetworkConfig parse_network(const json& j) {
  const std::string w = "network";
  reject_unknown(j, {"depth", "base_filters", "kernel_size", "input_channels", "seed", "leaky_slope",
                     "norm_eps", "head_init_scale"},
                 w);
  NetworkConfig c;
  get_opt(j, "depth", c.depth, w);
  get_opt(j, "base_filters", c.base_filters, w);
  get_opt(j, "kernel_size", c.kernel_size, w);
  get_opt(j, "input_channels", c.input_channels, w);
  get_opt(j, "seed", c.seed, w);
  get_opt(j, "leaky_slope", c.leaky_slope, w);
  get_opt(j, "norm_eps", c.norm_eps, w);
  get_opt(j, "head_init_scale", c.head_init_scale, w);
  return c;
}

TrainConfig parse_train(const json& j) {
  const std::string w = "train";
  reject_unknown(j, {"learning_rate", "iterations", "beta1", "beta2", "epsilon", "weight_decay", "seed",
                     "eval_every", "normalize_amplitude"},
                 w);
  TrainConfig c;
  get_opt(j, "learning_rate", c.learning_rate, w);
  get_opt(j, "iterations", c.iterations, w);
  get_opt(j, "beta1", c.beta1, w);
  get_opt(j, "beta2", c.beta2, w);
  get_opt(j, "epsilon", c.epsilon, w);
  get_opt(j, "weight_decay", c.weight_decay, w);
  get_opt(j, "seed", c.seed, w);
  get_opt(j, "eval_every", c.eval_every, w);
  get_opt(j, "normalize_amplitude", c.normalize_amplitude, w);
  return c;
}

// ---- small helpers ----------------------------------------------------------

ExperimentSpec effective(const ExperimentSpec& spec, const RunOptions& opts) {
  ExperimentSpec s = spec;
  if (opts.output_dir) s.output_dir = *opts.output_dir;
  if (opts.seed) {
    s.network.seed = *opts.seed;
    s.train.seed = *opts.seed;
  }
  s.validate();
  return s;
}

std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}

void log(const RunOptions& opts, const std::string& line) {
  if (!opts.log) return;
  std::lock_guard<std::mutex> lock(log_mutex());
  *opts.log << line << '\n';
  opts.log->flush();
}

std::string fmt(double v) { return format_double(v); }

json json_number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

// Runs tasks on `workers` threads; the first failure is rethrown after all
// tasks finish.
void run_parallel(std::vector<std::function<void()>>& tasks, int workers) {
  std::vector<std::exception_ptr> errors(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        tasks[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(tasks.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

TrainConfig train_config(const ExperimentSpec& spec, TrainMode mode, std::optional<int> rank) {
  TrainConfig c = spec.train;
  c.mode = mode;
  c.rank.reset();
  c.alpha.reset();
  if (mode == TrainMode::lora) {
    c.rank = rank.value_or(spec.lora_rank);
    c.alpha = spec.lora_alpha;
  }
  return c;
}

std::optional<int> lora_rank_for(const ExperimentSpec& spec, TrainMode mode) {
  std::optional<int> r;
  if (mode == TrainMode::lora) r.emplace(spec.lora_rank);
  return r;
}

std::string run_label(TrainMode mode, std::optional<int> rank) {
  std::string s(to_string(mode));
  if (mode == TrainMode::lora && rank) s += "-r" + std::to_string(*rank);
  return s;
}

// Everything a single fit needs besides the model.
struct Problem {
  ImpulseResponseGrid truth;
  SamplingMask mask;
  ObservationSet obs;
};

Problem make_problem(const ExperimentSpec& spec, const Scene& scene, const MaskSpec& mask_spec) {
  auto truth = ground_truth(spec, scene);
  auto mask = draw_mask(mask_spec, spec.num_mics());
  auto obs = observe(truth, mask);
  return Problem{std::move(truth), std::move(mask), std::move(obs)};
}

struct Fitted {
  RunSummary summary;
  ImpulseResponseGrid reconstruction;
  std::optional<DpNetwork<float>> net;                // scratch / ft
  std::optional<AdapterBundle<float>> adapters;      // lora
};

RunSummary summarize(const std::string& label, TrainMode mode, std::optional<int> rank, const Problem& p,
                     TrainRecord rec, std::size_t base_params) {
  RunSummary s;
  s.label = label;
  s.mode = mode;
  s.rank = rank;
  s.m_tilde = p.mask.size();
  s.metrics = rec.final_metrics.value();
  s.trainable_params = rec.trainable_param_count;
  s.trainable_fraction =
      static_cast<double>(rec.trainable_param_count) / static_cast<double>(base_params);
  s.wall_time_s = rec.wall_time_s;
  s.record = std::move(rec);
  return s;
}

// One training run. `base` is the pretrained network for ft/lora and ignored
// for scratch.
Fitted fit_one(const ExperimentSpec& spec, const NoiseInput& z, const Problem& p, TrainMode mode,
               std::optional<int> rank, const DpNetwork<float>* base, const std::string& label) {
  const TrainConfig cfg = train_config(spec, mode, rank);
  Fitted out;
  if (mode == TrainMode::lora) {
    auto bundle = make_bundle(*base, *cfg.rank, cfg.alpha ? std::optional<float>(static_cast<float>(*cfg.alpha))
                                                          : std::nullopt,
                              cfg.seed);
    auto view = attach_adapters(*base, std::move(bundle));
    auto rec = fit(view, z, p.obs, cfg);
    out.reconstruction = reconstruct(view, z, p.truth, rec.amplitude_scale);
    out.summary = summarize(label, mode, cfg.rank, p, std::move(rec), count_parameters(*base));
    out.adapters = view.bundle();
  } else {
    DpNetwork<float> net = mode == TrainMode::scratch ? DpNetwork<float>(spec.network) : *base;
    auto rec = fit(net, z, p.obs, cfg);
    out.reconstruction = reconstruct(net, z, p.truth, rec.amplitude_scale);
    out.summary = summarize(label, mode, std::nullopt, p, std::move(rec), count_parameters(net));
    out.net = std::move(net);
  }
  out.reconstruction.set_origin_label(label);
  return out;
}

std::string result_csv(const RunSummary& s) {
  std::ostringstream os;
  os << kResultHeader << '\n'
     << to_string(s.mode) << ',' << (s.rank ? std::to_string(*s.rank) : std::string()) << ',' << s.m_tilde << ','
     << fmt(s.metrics.full_nmse_db) << ',' << fmt(s.metrics.observed_nmse_db) << ','
     << fmt(s.metrics.unobserved_nmse_db) << ',' << s.trainable_params << ',' << fmt(s.trainable_fraction)
     << '\n';
  return os.str();
}

std::string summary_json(const std::string& command, const std::string& scene, const RunSummary& s) {
  json j;
  j["command"] = command;
  j["label"] = s.label;
  j["scene"] = scene;
  j["mode"] = std::string(to_string(s.mode));
  j["rank"] = s.rank ? json(*s.rank) : json(nullptr);
  j["m_tilde"] = s.m_tilde;
  j["iterations"] = s.record.rows.empty() ? 0 : s.record.rows.back().iteration;
  j["final_l1_loss"] = json_number(s.record.final_loss());
  j["full_nmse_db"] = json_number(s.metrics.full_nmse_db);
  j["observed_nmse_db"] = json_number(s.metrics.observed_nmse_db);
  j["unobserved_nmse_db"] = json_number(s.metrics.unobserved_nmse_db);
  j["trainable_params"] = s.trainable_params;
  j["trainable_fraction"] = s.trainable_fraction;
  j["amplitude_scale"] = s.record.amplitude_scale;
  j["wall_time_s"] = s.wall_time_s;
  return j.dump(2) + "\n";
}

// Writes train.csv, result.csv, summary.json and the reconstruction into dir.
void write_run(const fs::path& dir, const std::string& command, const std::string& scene, const Fitted& f) {
  ensure_dir(dir);
  write_file_atomic(dir / "train.csv", train_record_csv(f.summary.record));
  write_file_atomic(dir / "result.csv", result_csv(f.summary));
  write_file_atomic(dir / "summary.json", summary_json(command, scene, f.summary));
  write_grid(dir / "reconstruction.sfrgrid", f.reconstruction);
  if (f.adapters) write_adapters(dir / "adapters.sfradapt", *f.adapters);
}

std::string describe(const RunSummary& s) {
  std::ostringstream os;
  os << s.label << ": full " << fmt(s.metrics.full_nmse_db) << " dB, observed "
     << fmt(s.metrics.observed_nmse_db) << " dB, unobserved " << fmt(s.metrics.unobserved_nmse_db)
     << " dB, trainable " << s.trainable_params << " (" << fmt(100.0 * s.trainable_fraction)
     << " % of base), " << fmt(s.wall_time_s) << " s";
  return os.str();
}

DpNetwork<float> load_base(const ExperimentSpec& spec, const fs::path& checkpoint) {
  DpNetwork<float> net = read_checkpoint(checkpoint);
  const DpNetwork<float> expected(spec.network);
  if (net.fingerprint() != expected.fingerprint()) {
    throw IncompatibleCheckpoint("checkpoint " + checkpoint.string() + " has fingerprint " + net.fingerprint() +
                                 ", the experiment network has " + expected.fingerprint());
  }
  return net;
}

std::size_t adapt_scene_index(const ExperimentSpec& spec, std::optional<std::size_t> scene_index) {
  if (scene_index) {
    if (*scene_index >= spec.scenes.size()) throw InvalidArgument("scene index out of range");
    return *scene_index;
  }
  return spec.scenario == Scenario::single_room_source_move ? 1 : 1 % spec.scenes.size();
}

// Pretrained base for adapt/sweep commands: the given checkpoint, or a fresh
// pretraining run under the output directory.
DpNetwork<float> obtain_base(const ExperimentSpec& spec, const std::optional<fs::path>& checkpoint,
                             const RunOptions& opts) {
  if (checkpoint) return load_base(spec, *checkpoint);
  log(opts, "no checkpoint given; pretraining first");
  RunOptions o = opts;
  o.output_dir = spec.output_dir;
  o.seed.reset();
  const auto pre = cmd_pretrain(spec, o);
  return load_base(spec, pre.checkpoint);
}

// ---- CSV reading for report ---------------------------------------------------

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// Parses a CSV with the given header; `numeric` columns must parse as doubles.
Table read_table(const fs::path& path, const std::string& header, const std::vector<bool>& numeric) {
  const std::string text = read_file(path);
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != header) throw CorruptFile("unexpected header");
  Table t;
  t.header = split(header, ',');
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) throw CorruptFile("empty line " + std::to_string(lineno));
    auto cells = split(line, ',');
    if (cells.size() != t.header.size()) throw CorruptFile("wrong field count on line " + std::to_string(lineno));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c < numeric.size() && numeric[c]) {
        try {
          parse_double(cells[c]);
        } catch (const InvalidArgument&) {
          throw CorruptFile("bad number '" + cells[c] + "' on line " + std::to_string(lineno));
        }
      }
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.rows.empty()) throw CorruptFile("no data rows");
  if (!text.empty() && text.back() != '\n') throw CorruptFile("missing final newline");
  return t;
}

}  // namespace

// ---- spec ---------------------------------------------------------------------

int ExperimentSpec::num_mics() const { return scenes.empty() ? 0 : scenes.front().array.num_mics; }

void ExperimentSpec::validate() const {
  if (!(sample_rate_hz > 0.0) || !std::isfinite(sample_rate_hz)) throw InvalidArgument("sample_rate_hz must be positive");
  if (rir_length < 1) throw InvalidArgument("rir_length must be positive");
  if (scenario == Scenario::single_room_source_move && scenes.size() != 2) {
    throw InvalidArgument("single_room_source_move needs exactly two sources");
  }
  if (scenario == Scenario::multi_room && scenes.size() < 2) {
    throw InvalidArgument("multi_room needs at least two rooms");
  }
  std::set<std::string> names;
  for (const auto& s : scenes) {
    if (!names.insert(s.name).second) throw InvalidArgument("duplicate scene name '" + s.name + "'");
    if (s.array.num_mics != num_mics()) throw InvalidArgument("every scene needs the same microphone count");
    if (s.grid_file) {
      if (!fs::is_regular_file(*s.grid_file)) throw IoError("grid file not found: " + s.grid_file->string());
    } else {
      validate_geometry(s.room, s.source, s.array);
    }
  }
  network.validate();
  if (network.output_channels != 1) throw InvalidArgument("the network must have one output channel");
  if (!(noise_variance > 0.0)) throw InvalidArgument("noise variance must be positive");
  const int m = num_mics();
  auto check_mask = [&](const MaskSpec& mk, const char* what) {
    if (mk.m_tilde < 0 || mk.m_tilde > m) throw InvalidArgument(std::string(what) + ".m_tilde out of range");
  };
  check_mask(pretrain_mask, "pretrain_mask");
  check_mask(adapt_mask, "adapt_mask");
  check_mask(rank_sweep_mask, "rank_sweep_mask");
  TrainConfig t = train;
  t.mode = TrainMode::scratch;
  t.validate();
  if (lora_rank < 1) throw InvalidArgument("lora rank must be positive");
  if (ranks.empty()) throw InvalidArgument("ranks must not be empty");
  for (int r : ranks) {
    if (r < 1) throw InvalidArgument("ranks must be positive");
  }
  for (int c : scenario == Scenario::single_room_source_move ? mic_counts : std::vector<int>{}) {
    if (c < 1 || c > m) throw InvalidArgument("mic count " + std::to_string(c) + " out of range");
  }
  for (int c : scenario == Scenario::multi_room ? cross_room_counts : std::vector<int>{}) {
    if (c < 1 || c > m) throw InvalidArgument("cross-room count " + std::to_string(c) + " out of range");
  }
  if (output_dir.empty()) throw InvalidArgument("output_dir must not be empty");
}

ExperimentSpec parse_spec(const std::string& json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("spec is not valid JSON: ") + e.what());
  }
  const std::string w = "spec";
  reject_unknown(j, {"name", "scenario", "sample_rate_hz", "rir_length", "room", "rooms", "sources", "array",
                     "network", "noise", "pretrain_mask", "adapt_mask", "rank_sweep_mask", "train", "lora",
                     "ranks", "mic_counts", "cross_room_counts", "output_dir"},
                 w);
  ExperimentSpec s;
  get_opt(j, "name", s.name, w);
  const auto scenario = get<std::string>(j, "scenario", w);
  if (scenario == "single_room_source_move") {
    s.scenario = Scenario::single_room_source_move;
  } else if (scenario == "multi_room") {
    s.scenario = Scenario::multi_room;
  } else {
    throw InvalidArgument("unknown scenario '" + scenario + "'");
  }
  get_opt(j, "sample_rate_hz", s.sample_rate_hz, w);
  get_opt(j, "rir_length", s.rir_length, w);

  std::optional<ArrayGeometry> array;
  if (j.contains("array")) array = parse_array(j.at("array"), "array");

  if (s.scenario == Scenario::single_room_source_move) {
    if (!j.contains("room")) throw InvalidArgument("single_room_source_move needs 'room'");
    if (!j.contains("sources")) throw InvalidArgument("single_room_source_move needs 'sources'");
    if (!array) throw InvalidArgument("single_room_source_move needs 'array'");
    const json& jr = j.at("room");
    reject_unknown(jr, {"name", "dimensions_m", "t60_s", "max_reflection_order", "speed_of_sound_mps"}, "room");
    const RoomSpec room = parse_room(jr, "room");
    const std::string room_name = jr.value("name", std::string("room"));
    const json& js = j.at("sources");
    if (!js.is_array()) throw InvalidArgument("sources must be a list");
    for (std::size_t i = 0; i < js.size(); ++i) {
      const std::string ws = "sources[" + std::to_string(i) + "]";
      reject_unknown(js[i], {"name", "position_m", "grid_file"}, ws);
      Scene sc;
      sc.name = js[i].value("name", room_name + "-source" + std::to_string(i + 1));
      sc.room = room;
      sc.array = *array;
      sc.grid_file = grid_file(js[i], base_dir, ws);
      if (js[i].contains("position_m") || !sc.grid_file) sc.source = parse_source(js[i], ws);
      s.scenes.push_back(std::move(sc));
    }
  } else {
    if (!j.contains("rooms")) throw InvalidArgument("multi_room needs 'rooms'");
    const json& jr = j.at("rooms");
    if (!jr.is_array()) throw InvalidArgument("rooms must be a list");
    for (std::size_t i = 0; i < jr.size(); ++i) {
      const std::string wr = "rooms[" + std::to_string(i) + "]";
      reject_unknown(jr[i], {"name", "dimensions_m", "t60_s", "max_reflection_order", "speed_of_sound_mps",
                             "source", "array", "grid_file"},
                     wr);
      Scene sc;
      sc.name = get<std::string>(jr[i], "name", wr);
      sc.grid_file = grid_file(jr[i], base_dir, wr);
      if (jr[i].contains("array")) {
        sc.array = parse_array(jr[i].at("array"), wr + ".array");
      } else if (array) {
        sc.array = *array;
      } else {
        throw InvalidArgument(wr + ": no array given");
      }
      if (!sc.grid_file || jr[i].contains("dimensions_m")) {
        sc.room = parse_room(jr[i], wr);
        const json& src = jr[i].contains("source") ? jr[i].at("source") : json();
        if (!src.is_object()) throw InvalidArgument(wr + ": missing 'source'");
        reject_unknown(src, {"position_m"}, wr + ".source");
        sc.source = parse_source(src, wr + ".source");
      }
      s.scenes.push_back(std::move(sc));
    }
  }

  if (j.contains("network")) s.network = parse_network(j.at("network"));
  if (j.contains("noise")) {
    const json& jn = j.at("noise");
    reject_unknown(jn, {"variance", "seed"}, "noise");
    get_opt(jn, "variance", s.noise_variance, "noise");
    get_opt(jn, "seed", s.noise_seed, "noise");
  }
  const int m = s.num_mics();
  s.pretrain_mask.m_tilde = m;
  s.adapt_mask.m_tilde = m;
  if (j.contains("pretrain_mask")) s.pretrain_mask = parse_mask(j.at("pretrain_mask"), "pretrain_mask");
  if (j.contains("adapt_mask")) s.adapt_mask = parse_mask(j.at("adapt_mask"), "adapt_mask");
  s.rank_sweep_mask = s.adapt_mask;
  if (j.contains("rank_sweep_mask")) s.rank_sweep_mask = parse_mask(j.at("rank_sweep_mask"), "rank_sweep_mask");
  if (j.contains("train")) s.train = parse_train(j.at("train"));
  if (j.contains("lora")) {
    const json& jl = j.at("lora");
    reject_unknown(jl, {"rank", "alpha"}, "lora");
    get_opt(jl, "rank", s.lora_rank, "lora");
    if (jl.contains("alpha")) s.lora_alpha = get<double>(jl, "alpha", "lora");
  }
  get_opt(j, "ranks", s.ranks, w);
  get_opt(j, "mic_counts", s.mic_counts, w);
  get_opt(j, "cross_room_counts", s.cross_room_counts, w);
  if (j.contains("output_dir")) s.output_dir = get<std::string>(j, "output_dir", w);
  s.validate();
  return s;
}

ExperimentSpec load_spec(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return parse_spec(text, path.parent_path());
  } catch (const Error& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

int workers_from_env() {
  const char* v = std::getenv("SFR_WORKERS");
  if (v == nullptr) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) return 1;
  return static_cast<int>(std::min<long>(n, 256));
}

ImpulseResponseGrid ground_truth(const ExperimentSpec& spec, const Scene& scene) {
  ImpulseResponseGrid g;
  if (scene.grid_file) {
    g = read_grid(*scene.grid_file);
    if (g.num_samples() != spec.rir_length || g.num_channels() != scene.array.num_mics) {
      throw ShapeMismatch("grid file " + scene.grid_file->string() + " is " + std::to_string(g.num_samples()) +
                          " x " + std::to_string(g.num_channels()) + ", expected " +
                          std::to_string(spec.rir_length) + " x " + std::to_string(scene.array.num_mics));
    }
  } else {
    g = simulate_rir(scene.room, scene.source, scene.array, spec.sample_rate_hz, spec.rir_length);
  }
  g.set_origin_label(scene.name);
  return g;
}

SamplingMask draw_mask(const MaskSpec& m, int total_channels) {
  if (m.m_tilde == 0 || m.m_tilde == total_channels) return SamplingMask::all(total_channels);
  return make_random_mask(total_channels, m.m_tilde, m.seed);
}

NoiseInput noise_for(const ExperimentSpec& spec) {
  const auto pad = pad_to_grid(spec.rir_length, spec.num_mics(), spec.network.depth);
  return sample_noise_input(pad.rows, pad.cols, spec.network.input_channels, spec.noise_variance,
                            spec.noise_seed);
}

std::string train_record_csv(const TrainRecord& record) {
  std::string out = std::string(kTrainHeader) + "\n";
  for (const auto& r : record.rows) {
    out += std::to_string(r.iteration) + ',' + fmt(r.l1_loss) + ',' + fmt(r.observed_nmse_db) + ',' +
           fmt(r.full_nmse_db) + '\n';
  }
  return out;
}

// ---- commands -----------------------------------------------------------------

PretrainResult cmd_pretrain(const ExperimentSpec& spec_in, const RunOptions& opts, std::size_t scene_index) {
  const ExperimentSpec spec = effective(spec_in, opts);
  if (scene_index >= spec.scenes.size()) throw InvalidArgument("scene index out of range");
  const Scene& scene = spec.scenes[scene_index];
  const fs::path dir = spec.output_dir / (spec.scenario == Scenario::multi_room ? "pretrain-" + scene.name
                                                                                   : std::string("pretrain"));
  ensure_dir(dir);
  log(opts, "pretrain on " + scene.name + " (M~=" + std::to_string(draw_mask(spec.pretrain_mask, spec.num_mics()).size()) +
                ", " + std::to_string(spec.train.iterations) + " iterations)");
  const Problem p = make_problem(spec, scene, spec.pretrain_mask);
  const NoiseInput z = noise_for(spec);
  Fitted f = fit_one(spec, z, p, TrainMode::scratch, std::nullopt, nullptr, "pretrain");
  write_run(dir, "pretrain", scene.name, f);
  const fs::path ckpt = dir / "checkpoint.sfrckpt";
  write_checkpoint(ckpt, *f.net);
  log(opts, describe(f.summary));
  return {std::move(f.summary), ckpt};
}

RunSummary cmd_adapt(const ExperimentSpec& spec_in, const std::optional<fs::path>& checkpoint, TrainMode mode,
                     std::optional<int> rank, const RunOptions& opts, std::optional<std::size_t> scene_index) {
  const ExperimentSpec spec = effective(spec_in, opts);
  if (rank && mode != TrainMode::lora) throw InvalidArgument("--rank only applies to lora");
  if (mode == TrainMode::lora && !rank) rank = spec.lora_rank;
  const std::size_t si = adapt_scene_index(spec, scene_index);
  const Scene& scene = spec.scenes[si];

  std::optional<DpNetwork<float>> base;
  if (mode == TrainMode::scratch) {
    if (checkpoint) log(opts, "warning: scratch mode ignores the checkpoint " + checkpoint->string());
  } else {
    base = obtain_base(spec, checkpoint, opts);
  }

  const std::string label = run_label(mode, rank);
  fs::path dir = spec.output_dir;
  dir /= spec.scenario == Scenario::multi_room ? "adapt-" + scene.name + "-" + label : "adapt-" + label;
  ensure_dir(dir);
  const Problem p = make_problem(spec, scene, spec.adapt_mask);
  log(opts, "adapt " + label + " on " + scene.name + " (M~=" + std::to_string(p.mask.size()) + ")");
  const NoiseInput z = noise_for(spec);
  Fitted f = fit_one(spec, z, p, mode, rank, base ? &*base : nullptr, label);
  write_run(dir, "adapt", scene.name, f);
  log(opts, describe(f.summary));
  return f.summary;
}

std::vector<RankSweepRow> cmd_sweep_rank(const ExperimentSpec& spec_in, const std::optional<fs::path>& checkpoint,
                                         const RunOptions& opts) {
  const ExperimentSpec spec = effective(spec_in, opts);
  const DpNetwork<float> base = obtain_base(spec, checkpoint, opts);
  const Scene& scene = spec.scenes[adapt_scene_index(spec, std::nullopt)];
  const Problem p = make_problem(spec, scene, spec.rank_sweep_mask);
  const NoiseInput z = noise_for(spec);
  const fs::path root = spec.output_dir / "sweep-rank";

  std::vector<Fitted> fits(spec.ranks.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t i = 0; i < spec.ranks.size(); ++i) {
    tasks.emplace_back([&, i] {
      const int r = spec.ranks[i];
      fits[i] = fit_one(spec, z, p, TrainMode::lora, r, &base, run_label(TrainMode::lora, r));
      write_run(root / ("r" + std::to_string(r)), "sweep-rank", scene.name, fits[i]);
      log(opts, describe(fits[i].summary));
    });
  }
  run_parallel(tasks, opts.workers);

  std::vector<RankSweepRow> rows;
  std::string csv = "rank,iteration,nmse_db,trainable_params\n";
  std::vector<plot::Series> series;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    const auto& s = fits[i].summary;
    plot::Series ser{"r=" + std::to_string(spec.ranks[i]) + " (" + fmt(std::round(1000.0 * s.trainable_fraction) / 10.0) +
                         " %)",
                     {},
                     {}};
    for (const auto& r : s.record.rows) {
      if (std::isnan(r.full_nmse_db)) continue;
      rows.push_back({spec.ranks[i], r.iteration, r.full_nmse_db, s.trainable_params});
      csv += std::to_string(spec.ranks[i]) + ',' + std::to_string(r.iteration) + ',' + fmt(r.full_nmse_db) + ',' +
             std::to_string(s.trainable_params) + '\n';
      ser.x.push_back(r.iteration);
      ser.y.push_back(r.full_nmse_db);
    }
    series.push_back(std::move(ser));
  }
  ensure_dir(spec.output_dir);
  write_file_atomic(spec.output_dir / "sweep_rank.csv", csv);
  write_file_atomic(spec.output_dir / "sweep_rank.svg",
                    plot::line_chart("LoRA adaptation by rank (M~=" + std::to_string(p.mask.size()) + ")",
                                     "iteration", "full-grid NMSE (dB)", series));
  return rows;
}

std::vector<MicSweepRow> cmd_sweep_mics(const ExperimentSpec& spec_in, const std::optional<fs::path>& checkpoint,
                                        const RunOptions& opts) {
  const ExperimentSpec spec = effective(spec_in, opts);
  const DpNetwork<float> base = obtain_base(spec, checkpoint, opts);
  const Scene& scene = spec.scenes[adapt_scene_index(spec, std::nullopt)];
  const NoiseInput z = noise_for(spec);
  const fs::path root = spec.output_dir / "sweep-mics";
  const TrainMode modes[] = {TrainMode::scratch, TrainMode::full_finetune, TrainMode::lora};

  std::vector<Problem> problems;
  for (int c : spec.mic_counts) problems.push_back(make_problem(spec, scene, MaskSpec{c, spec.adapt_mask.seed}));

  std::vector<RunSummary> results(spec.mic_counts.size() * 3);
  std::vector<std::function<void()>> tasks;
  for (std::size_t ci = 0; ci < spec.mic_counts.size(); ++ci) {
    for (std::size_t mi = 0; mi < 3; ++mi) {
      tasks.emplace_back([&, ci, mi] {
        const TrainMode mode = modes[mi];
        const std::optional<int> rank = lora_rank_for(spec, mode);
        const std::string label = "m" + std::to_string(spec.mic_counts[ci]) + "-" + run_label(mode, rank);
        Fitted f = fit_one(spec, z, problems[ci], mode, rank, &base, label);
        write_run(root / label, "sweep-mics", scene.name, f);
        log(opts, describe(f.summary));
        results[ci * 3 + mi] = std::move(f.summary);
      });
    }
  }
  run_parallel(tasks, opts.workers);

  std::vector<MicSweepRow> rows;
  std::string csv = "M_tilde,mode,nmse_db\n";
  std::vector<std::string> groups;
  std::vector<std::vector<double>> values;
  for (std::size_t ci = 0; ci < spec.mic_counts.size(); ++ci) {
    groups.push_back("M~=" + std::to_string(spec.mic_counts[ci]));
    values.emplace_back();
    for (std::size_t mi = 0; mi < 3; ++mi) {
      const auto& s = results[ci * 3 + mi];
      rows.push_back({spec.mic_counts[ci], modes[mi], s.metrics.full_nmse_db});
      csv += std::to_string(spec.mic_counts[ci]) + ',' + std::string(to_string(modes[mi])) + ',' +
             fmt(s.metrics.full_nmse_db) + '\n';
      values.back().push_back(s.metrics.full_nmse_db);
    }
  }
  ensure_dir(spec.output_dir);
  write_file_atomic(spec.output_dir / "sweep_mics.csv", csv);
  write_file_atomic(spec.output_dir / "sweep_mics.svg",
                    plot::grouped_bar_chart("Adaptation by number of observed microphones", "full-grid NMSE (dB)",
                                            groups, {"scratch", "ft", "lora r=" + std::to_string(spec.lora_rank)},
                                            values));
  return rows;
}

CrossRoomResult cmd_cross_room(const ExperimentSpec& spec_in, const RunOptions& opts) {
  const ExperimentSpec spec = effective(spec_in, opts);
  if (spec.scenario != Scenario::multi_room) throw InvalidArgument("cross-room needs a multi_room spec");
  if (spec.cross_room_counts.empty()) throw InvalidArgument("cross_room_counts must not be empty");
  const std::size_t R = spec.scenes.size();
  const std::size_t C = spec.cross_room_counts.size();
  const NoiseInput z = noise_for(spec);
  const fs::path root = spec.output_dir / "cross-room";

  std::vector<Problem> full;
  std::vector<std::vector<Problem>> sparse(R);
  for (std::size_t r = 0; r < R; ++r) {
    full.push_back(make_problem(spec, spec.scenes[r], spec.pretrain_mask));
    for (int c : spec.cross_room_counts) {
      sparse[r].push_back(make_problem(spec, spec.scenes[r], MaskSpec{c, spec.adapt_mask.seed}));
    }
  }

  // Stage 1: pretraining per room and the scratch fits, which do not depend
  // on the pretraining room.
  std::vector<std::optional<DpNetwork<float>>> bases(R);
  std::vector<RunSummary> pre(R);
  std::vector<std::vector<RunSummary>> scratch(R, std::vector<RunSummary>(C));
  std::vector<std::function<void()>> tasks;
  for (std::size_t r = 0; r < R; ++r) {
    tasks.emplace_back([&, r] {
      Fitted f = fit_one(spec, z, full[r], TrainMode::scratch, std::nullopt, nullptr, "pretrain-" + spec.scenes[r].name);
      write_run(root / ("pretrain-" + spec.scenes[r].name), "cross-room", spec.scenes[r].name, f);
      write_checkpoint(root / ("pretrain-" + spec.scenes[r].name) / "checkpoint.sfrckpt", *f.net);
      log(opts, describe(f.summary));
      pre[r] = std::move(f.summary);
      bases[r] = std::move(f.net);
    });
    for (std::size_t c = 0; c < C; ++c) {
      tasks.emplace_back([&, r, c] {
        const std::string label = spec.scenes[r].name + "-m" + std::to_string(spec.cross_room_counts[c]) + "-scratch";
        Fitted f = fit_one(spec, z, sparse[r][c], TrainMode::scratch, std::nullopt, nullptr, label);
        write_run(root / "scratch" / label, "cross-room", spec.scenes[r].name, f);
        log(opts, describe(f.summary));
        scratch[r][c] = std::move(f.summary);
      });
    }
  }
  run_parallel(tasks, opts.workers);

  // Stage 2: ft and lora from every pretraining room to every other room.
  std::map<std::tuple<std::size_t, std::size_t, std::size_t, int>, RunSummary> adapted;
  std::mutex adapted_mutex;
  tasks.clear();
  for (std::size_t p = 0; p < R; ++p) {
    for (std::size_t t = 0; t < R; ++t) {
      if (t == p) continue;
      for (std::size_t c = 0; c < C; ++c) {
        for (TrainMode mode : {TrainMode::full_finetune, TrainMode::lora}) {
          tasks.emplace_back([&, p, t, c, mode] {
            const std::optional<int> rank = lora_rank_for(spec, mode);
            const std::string label = spec.scenes[t].name + "-m" + std::to_string(spec.cross_room_counts[c]) + "-" +
                                      run_label(mode, rank);
            Fitted f = fit_one(spec, z, sparse[t][c], mode, rank, &*bases[p], label);
            write_run(root / ("from-" + spec.scenes[p].name) / label, "cross-room", spec.scenes[t].name, f);
            log(opts, "from " + spec.scenes[p].name + ": " + describe(f.summary));
            std::lock_guard<std::mutex> lock(adapted_mutex);
            adapted[{p, t, c, static_cast<int>(mode)}] = std::move(f.summary);
          });
        }
      }
    }
  }
  run_parallel(tasks, opts.workers);

  CrossRoomResult out;
  std::string csv = "pretrain_room,target_room,m_tilde,mode,nmse_db,lora_gap_db\n";
  for (std::size_t p = 0; p < R; ++p) {
    for (std::size_t t = 0; t < R; ++t) {
      if (t == p) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const double v_s = scratch[t][c].metrics.full_nmse_db;
        const double v_f = adapted.at({p, t, c, static_cast<int>(TrainMode::full_finetune)}).metrics.full_nmse_db;
        const double v_l = adapted.at({p, t, c, static_cast<int>(TrainMode::lora)}).metrics.full_nmse_db;
        const double gap = v_l - std::min({v_s, v_f, v_l});
        for (auto [mode, v] : {std::pair{TrainMode::scratch, v_s}, std::pair{TrainMode::full_finetune, v_f},
                               std::pair{TrainMode::lora, v_l}}) {
          out.rows.push_back({spec.scenes[p].name, spec.scenes[t].name, spec.cross_room_counts[c], mode, v, gap});
          csv += spec.scenes[p].name + ',' + spec.scenes[t].name + ',' + std::to_string(spec.cross_room_counts[c]) +
                 ',' + std::string(to_string(mode)) + ',' + fmt(v) + ',' + fmt(gap) + '\n';
        }
      }
    }
  }
  std::string diag = "room,nmse_db\n";
  std::vector<std::string> groups;
  std::vector<std::vector<double>> values;
  for (std::size_t r = 0; r < R; ++r) {
    out.pretraining.emplace_back(spec.scenes[r].name, pre[r].metrics.full_nmse_db);
    diag += spec.scenes[r].name + ',' + fmt(pre[r].metrics.full_nmse_db) + '\n';
  }
  for (const auto& row : out.rows) {
    if (row.mode != TrainMode::scratch) continue;
    groups.push_back(row.pretrain_room + "->" + row.target_room + " " + std::to_string(row.m_tilde));
    values.emplace_back();
  }
  for (std::size_t i = 0, g = 0; i < out.rows.size(); i += 3, ++g) {
    for (std::size_t k = 0; k < 3; ++k) values[g].push_back(out.rows[i + k].nmse_db);
  }
  ensure_dir(spec.output_dir);
  write_file_atomic(spec.output_dir / "cross_room.csv", csv);
  write_file_atomic(spec.output_dir / "cross_room_pretrain.csv", diag);
  write_file_atomic(spec.output_dir / "cross_room.svg",
                    plot::grouped_bar_chart("Cross-room adaptation", "full-grid NMSE (dB)", groups,
                                            {"scratch", "ft", "lora r=" + std::to_string(spec.lora_rank)},
                                            values));
  return out;
}

std::string cmd_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw IoError("not a directory: " + run_dir.string());
  std::vector<fs::path> train_files;
  std::vector<fs::path> other_csvs;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    if (e.path().filename() == "train.csv") {
      train_files.push_back(e.path());
    } else {
      other_csvs.push_back(e.path());
    }
  }
  std::sort(train_files.begin(), train_files.end());
  std::sort(other_csvs.begin(), other_csvs.end());
  if (train_files.empty() && other_csvs.empty()) throw IoError("no run CSVs under " + run_dir.string());

  std::vector<std::string> problems;
  std::vector<std::pair<std::string, Table>> runs;
  for (const auto& f : train_files) {
    try {
      Table t = read_table(f, kTrainHeader, {true, true, true, true});
      runs.emplace_back(fs::relative(f.parent_path(), run_dir).generic_string(), std::move(t));
    } catch (const Error& e) {
      problems.push_back(f.string() + ": " + e.what());
    }
  }
  const std::map<std::string, std::pair<std::string, std::vector<bool>>> known = {
      {"result.csv", {kResultHeader, {false, false, true, true, true, true, true, true}}},
      {"sweep_rank.csv", {"rank,iteration,nmse_db,trainable_params", {true, true, true, true}}},
      {"sweep_mics.csv", {"M_tilde,mode,nmse_db", {true, false, true}}},
      {"cross_room.csv", {"pretrain_room,target_room,m_tilde,mode,nmse_db,lora_gap_db",
                          {false, false, true, false, true, true}}},
      {"cross_room_pretrain.csv", {"room,nmse_db", {false, true}}},
  };
  std::vector<std::pair<std::string, Table>> tables;
  for (const auto& f : other_csvs) {
    const auto it = known.find(f.filename().string());
    if (it == known.end()) {
      problems.push_back(f.string() + ": unrecognized CSV");
      continue;
    }
    try {
      tables.emplace_back(fs::relative(f, run_dir).generic_string(),
                          read_table(f, it->second.first, it->second.second));
    } catch (const Error& e) {
      problems.push_back(f.string() + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "unreadable run CSVs:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CorruptFile(msg);
  }

  std::ostringstream os;
  os << "runs: " << runs.size() << "\n";
  std::vector<plot::Series> loss;
  std::vector<std::string> groups;
  std::vector<std::vector<double>> bars;
  for (const auto& [name, t] : runs) {
    const auto& last = t.rows.back();
    os << "\n[" << (name.empty() ? "." : name) << "]\n"
       << "iterations " << last[0] << "\n"
       << "final l1_loss " << last[1] << "\n"
       << "final observed_nmse_db " << last[2] << "\n"
       << "final full_nmse_db " << last[3] << "\n";
    plot::Series s{name.empty() ? "." : name, {}, {}};
    for (const auto& row : t.rows) {
      const double l = parse_double(row[1]);
      s.x.push_back(parse_double(row[0]));
      s.y.push_back(l > 0.0 ? std::log10(l) : std::nan(""));
    }
    loss.push_back(std::move(s));
    groups.push_back(name.empty() ? "." : name);
    bars.push_back({parse_double(last[2]), parse_double(last[3])});
  }
  for (const auto& [name, t] : tables) {
    os << "\n[" << name << "]\n";
    os << "rows " << t.rows.size() << "\n";
    if (name.size() >= 10 && name.compare(name.size() - 10, 10, "result.csv") == 0) {
      for (std::size_t c = 0; c < t.header.size(); ++c) os << t.header[c] << ' ' << t.rows[0][c] << "\n";
    }
  }
  const std::string text = os.str();
  write_file_atomic(run_dir / "report.txt", text);
  if (!runs.empty()) {
    write_file_atomic(run_dir / "loss.svg", plot::line_chart("Training loss", "iteration", "log10 l1 loss", loss));
    write_file_atomic(run_dir / "nmse.svg",
                      plot::grouped_bar_chart("Final NMSE per run", "NMSE (dB)", groups,
                                              {"observed", "full grid"}, bars));
  }
  return text;
}

}  // namespace sfr::experiment
