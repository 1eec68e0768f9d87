// Acceptance runner: `sfr_acceptance <n>` checks criterion n (1-11),
// `sfr_acceptance all` checks every one. One PASS/FAIL line per criterion;
// the exit status is nonzero when any checked criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "reference.hpp"
#include "sfr/data_io.hpp"
#include "sfr/errors.hpp"
#include "sfr/experiment.hpp"
#include "sfr/lora.hpp"
#include "sfr/random.hpp"
#include "sfr/trainer.hpp"

using namespace sfr;
namespace fs = std::filesystem;
namespace ex = sfr::experiment;

namespace {

const fs::path kScenes = SFR_SCENE_DIR;
const fs::path kWork = SFR_ACCEPTANCE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string db(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = kWork / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

template <typename T>
bool same_bits(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

void fill_normal(nn::Tensor<double>& t, Rng& rng, double scale = 1.0) {
  for (double& v : t.values()) v = scale * rng.normal();
}

// ---- 1 ----------------------------------------------------------------------

Outcome zero_init_identity() {
  int identical = 0;
  std::ostringstream os;
  for (int t = 0; t < 10; ++t) {
    Rng rng(1000 + static_cast<std::uint64_t>(t));
    NetworkConfig c;
    c.depth = 1 + static_cast<int>(rng.below(2));
    c.base_filters = 4 + 2 * static_cast<int>(rng.below(3));
    c.input_channels = 1 + static_cast<int>(rng.below(4));
    c.seed = rng.next();
    const int step = 1 << c.depth;
    const int rows = step * (2 + static_cast<int>(rng.below(3)));
    const int cols = step * (1 + static_cast<int>(rng.below(3)));
    const int rank = 1 + static_cast<int>(rng.below(8));
    const std::uint64_t seed = rng.next();
    DpNetwork<float> net(c);
    const auto z = sample_noise_input(rows, cols, c.input_channels, 0.1, seed);
    const auto before = net.forward(z.tensor());
    const auto view = attach_adapters(net, make_bundle<float>(net, rank, std::nullopt, seed));
    const auto after = view.forward(z.tensor());
    if (same_bits(before.values(), after.values())) ++identical;
  }
  os << identical << "/10 random (architecture, rank, seed) tuples bitwise identical";
  return {identical == 10, os.str()};
}

// ---- 2 ----------------------------------------------------------------------

Outcome contraction_oracle() {
  double worst = 0.0;
  for (int t = 0; t < 25; ++t) {
    Rng rng(2000 + static_cast<std::uint64_t>(t));
    const LayerShape shape{1 + static_cast<int>(rng.below(8)), 1 + static_cast<int>(rng.below(8)),
                           rng.below(2) ? 3 : 1};
    const int rank = 1 + static_cast<int>(rng.below(4));
    auto ad = init_adapter<double>("layer", shape, rank, std::nullopt, rng.next());
    fill_normal(ad.b, rng);
    ad.alpha = rng.uniform(0.5, 4.0);
    const auto d = compose_delta(ad);
    const auto ref = sfr::testing::delta_ref(ad);
    double scale = 0.0, err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      scale = std::max(scale, std::abs(ref[i]));
      err = std::max(err, std::abs(d[i] - ref[i]));
    }
    worst = std::max(worst, scale > 0.0 ? err / scale : err);
  }
  return {worst <= 1e-12, "25 adapters, worst relative deviation " + sci(worst) + " (limit 1e-12)"};
}

// ---- 3 ----------------------------------------------------------------------

// Signs of the observed residuals; a change between the two sides of a
// finite difference means the step crossed an l1 kink.
template <typename F>
std::vector<signed char> residual_signs(F&& forward, const ObservationSet& obs) {
  const nn::Tensor<double> y = forward();
  std::vector<signed char> s;
  const auto& idx = obs.mask.indices();
  for (std::size_t j = 0; j < idx.size(); ++j) {
    auto o = obs.observed.channel(static_cast<int>(j));
    for (int n = 0; n < obs.observed.num_samples(); ++n) {
      const double r = y.at(0, n, idx[j]) - static_cast<double>(o[static_cast<std::size_t>(n)]);
      s.push_back(static_cast<signed char>((r > 0) - (r < 0)));
    }
  }
  return s;
}

struct GradTally {
  int checked = 0;
  int skipped = 0;
  double worst = 0.0;
};

template <typename Loss, typename Fwd>
void check_entry(double& param, double analytic, Loss&& loss, Fwd&& forward, const ObservationSet& obs,
                 GradTally& tally) {
  const double h = 1e-4, orig = param;
  param = orig + h;
  const double lp = loss();
  const auto sp = residual_signs(forward, obs);
  param = orig - h;
  const double lm = loss();
  const auto sm = residual_signs(forward, obs);
  param = orig;
  if (sp != sm) {
    ++tally.skipped;
    return;
  }
  const double fd = (lp - lm) / (2.0 * h);
  const double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
  tally.worst = std::max(tally.worst, rel);
  ++tally.checked;
}

Outcome gradient_checks() {
  NetworkConfig c;
  c.depth = 1;
  c.base_filters = 4;
  c.input_channels = 2;
  c.seed = 17;
  c.head_init_scale = 1.0;
  DpNetwork<double> net(c);
  const auto grid = sfr::testing::random_grid(16, 8, 31, 0.3);
  const auto obs = observe(grid, SamplingMask({0, 2, 3, 6}, 8), false);
  const auto z = sample_noise_input(16, 8, 2, 0.1, 5).tensor().cast<double>();

  GradTally base;
  auto grads = net.zero_like_params();
  masked_l1_objective(net, z, obs, &grads);
  auto base_loss = [&] { return masked_l1_objective<double>(net, z, obs, nullptr); };
  auto base_fwd = [&] { return net.forward(z); };
  for (std::size_t l = 0; l < net.params().size(); ++l) {
    auto& w = net.params()[l].weight;
    auto& b = net.params()[l].bias;
    for (std::size_t i = 0; i < w.size(); i += 1 + w.size() / 4) {
      check_entry(w[i], grads[l].weight[i], base_loss, base_fwd, obs, base);
    }
    check_entry(b[0], grads[l].bias[0], base_loss, base_fwd, obs, base);
  }

  GradTally lora;
  auto bundle = make_bundle<double>(net, 2, std::nullopt, 9);
  Rng rng(77);
  for (auto& ad : bundle.adapters) fill_normal(ad.b, rng, 0.05);
  AdaptedNetwork<double> view(net, std::move(bundle));
  auto agrads = view.zero_grads();
  masked_l1_objective(view, z, obs, &agrads);
  auto lora_loss = [&] { return masked_l1_objective<double>(view, z, obs, nullptr); };
  auto lora_fwd = [&] { return view.forward(z); };
  for (std::size_t l = 0; l < view.bundle().adapters.size(); ++l) {
    auto& ad = view.bundle().adapters[l];
    for (std::size_t i = 0; i < ad.a.size(); i += 1 + ad.a.size() / 2) {
      check_entry(ad.a[i], agrads[l].a[i], lora_loss, lora_fwd, obs, lora);
    }
    for (std::size_t i = 0; i < ad.b.size(); i += 1 + ad.b.size() / 2) {
      check_entry(ad.b[i], agrads[l].b[i], lora_loss, lora_fwd, obs, lora);
    }
  }

  const bool pass = base.checked >= 20 && lora.checked >= 20 && base.worst < 1e-3 && lora.worst < 1e-3;
  std::ostringstream os;
  os << "base: " << base.checked << " entries, worst rel " << sci(base.worst) << " (" << base.skipped
     << " at kinks); adapters: " << lora.checked << " entries, worst rel " << sci(lora.worst) << " ("
     << lora.skipped << " at kinks); limit 1e-3";
  return {pass, os.str()};
}

// ---- 4 ----------------------------------------------------------------------

Outcome parameter_accounting() {
  int exact = 0;
  for (int t = 0; t < 10; ++t) {
    Rng rng(4000 + static_cast<std::uint64_t>(t));
    NetworkConfig c;
    c.depth = 1 + static_cast<int>(rng.below(3));
    c.base_filters = 4 + static_cast<int>(rng.below(12));
    c.input_channels = 1 + static_cast<int>(rng.below(8));
    c.kernel_size = rng.below(2) ? 3 : 5;
    DpNetwork<float> net(c);
    const int rank = 1 + static_cast<int>(rng.below(16));
    const std::uint64_t pick = rng.next();
    std::size_t pos = 0;
    const LayerFilter every_other = [&](const ConvLayerSpec&) { return ((pick >> (pos++ % 64)) & 1u) != 0; };
    const auto bundle = make_bundle<float>(net, rank, std::nullopt, 1, t % 2 ? every_other : LayerFilter{});
    std::size_t closed = 0;
    for (const auto& ad : bundle.adapters) {
      const auto& s = ad.layer_shape;
      closed += static_cast<std::size_t>(rank) * s.in_channels * s.kernel +
                static_cast<std::size_t>(s.out_channels) * s.kernel * rank;
    }
    if (bundle_param_count(bundle) == closed) ++exact;
  }

  const NetworkConfig def;
  const auto layers = network_layers(def);
  const double base = static_cast<double>(count_parameters(def));
  std::ostringstream os;
  os << exact << "/10 bundles match the closed form; default fractions";
  bool increasing = true;
  double prev = -1.0, f16 = 0.0;
  for (int r : {1, 2, 4, 8, 16, 32, 64}) {
    const double f = static_cast<double>(lora_param_count(layers, r)) / base;
    os << " r" << r << "=" << db(100.0 * f) << "%";
    increasing = increasing && f > prev;
    prev = f;
    if (r == 16) f16 = f;
  }
  const bool in_band = f16 >= 0.15 && f16 <= 0.45;
  os << "; r=16 fraction " << f16 << (in_band ? " inside" : " outside") << " [0.15, 0.45]";
  return {exact == 10 && increasing && in_band, os.str()};
}

// ---- 5 ----------------------------------------------------------------------

Outcome frozen_base() {
  const auto spec = ex::load_spec(kScenes / "desk.json");
  const DpNetwork<float> net(spec.network);
  const NoiseInput z = ex::noise_for(spec);
  const auto truth = ex::ground_truth(spec, spec.scenes[1]);
  const auto obs = observe(truth, ex::draw_mask(spec.adapt_mask, spec.num_mics()));
  const auto before_out = net.forward(z.tensor());
  const std::uint64_t before = parameter_hash(net);

  auto view = attach_adapters(net, make_bundle<float>(net, spec.lora_rank, std::nullopt, spec.train.seed));
  TrainConfig cfg = spec.train;
  cfg.mode = TrainMode::lora;
  cfg.rank = spec.lora_rank;
  cfg.iterations = 50;
  cfg.eval_every = 50;
  const auto rec = fit(view, z, obs, cfg);
  const std::uint64_t after = parameter_hash(detach_adapters(view));
  const auto after_out = detach_adapters(view).forward(z.tensor());
  const bool moved = rec.final_loss() < rec.initial_loss();
  const bool same_out = same_bits(before_out.values(), after_out.values());
  std::ostringstream os;
  os << "base hash " << std::hex << before << " -> " << after << std::dec << "; detached output "
     << (same_out ? "bitwise equal" : "differs") << "; lora loss " << sci(rec.initial_loss()) << " -> "
     << sci(rec.final_loss());
  return {before == after && same_out && moved, os.str()};
}

// ---- 6 ----------------------------------------------------------------------

Outcome nmse_oracle() {
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    Rng rng(6000 + static_cast<std::uint64_t>(t));
    const int n = 16 + static_cast<int>(rng.below(200));
    const int m = 1 + static_cast<int>(rng.below(12));
    const auto ref = sfr::testing::random_grid(n, m, rng.next(), rng.uniform(0.01, 10.0));
    const auto est = sfr::testing::random_grid(n, m, rng.next(), rng.uniform(0.01, 10.0));
    worst = std::max(worst, std::abs(nmse(est, ref) - sfr::testing::nmse_ref_db(est, ref)));
  }
  const auto ref = sfr::testing::random_grid(128, 6, 99);
  ImpulseResponseGrid zero(128, 6, 8000.0, 0.03);
  ImpulseResponseGrid half = ref;
  for (float& v : half.samples()) v *= 0.5f;
  const double z_db = nmse(zero, ref);
  const double h_db = nmse(half, ref);
  const bool pass = worst <= 1e-9 && std::abs(z_db) <= 1e-9 && std::abs(h_db + 6.0206) <= 1e-3;
  return {pass, "20 random pairs, worst |dB difference| " + sci(worst) + " (limit 1e-9); zero estimate " +
                    sci(z_db) + " dB; half scale " + std::to_string(h_db) + " dB"};
}

// ---- 7 ----------------------------------------------------------------------

Outcome desk_reconstruction() {
  const auto spec = ex::load_spec(kScenes / "desk.json");
  DpNetwork<float> net(spec.network);
  const NoiseInput z = ex::noise_for(spec);
  const auto truth = ex::ground_truth(spec, spec.scenes[1]);
  const auto mask = ex::draw_mask({8, spec.adapt_mask.seed}, spec.num_mics());
  const auto obs = observe(truth, mask);
  TrainConfig cfg = spec.train;
  cfg.mode = TrainMode::scratch;
  cfg.iterations = 500;
  const auto rec = fit(net, z, obs, cfg);
  const auto& m = *rec.final_metrics;
  const auto nn = evaluate_prediction(baseline_nearest_neighbor(obs), truth, mask);
  const double margin = nn.unobserved_nmse_db - m.unobserved_nmse_db;
  const bool pass = m.observed_nmse_db <= -15.0 && margin >= 3.0;
  return {pass, "observed " + db(m.observed_nmse_db) + " dB (limit -15); unobserved " +
                    db(m.unobserved_nmse_db) + " dB vs nearest neighbor " + db(nn.unobserved_nmse_db) +
                    " dB, margin " + db(margin) + " dB (need 3); " + db(rec.wall_time_s) + " s"};
}

// ---- 8 ----------------------------------------------------------------------

Outcome adaptation_benefit() {
  auto spec = ex::load_spec(kScenes / "desk.json");
  ex::RunOptions opts;
  opts.output_dir = fresh_dir("c8");
  opts.log = &std::cerr;
  const auto pre = ex::cmd_pretrain(spec, opts);
  const auto scratch = ex::cmd_adapt(spec, pre.checkpoint, TrainMode::scratch, std::nullopt, opts);
  const auto ft = ex::cmd_adapt(spec, pre.checkpoint, TrainMode::full_finetune, std::nullopt, opts);
  const auto lora = ex::cmd_adapt(spec, pre.checkpoint, TrainMode::lora, 16, opts);
  const double s = scratch.metrics.full_nmse_db, f = ft.metrics.full_nmse_db, l = lora.metrics.full_nmse_db;
  return {f < s && l < s, "M~=4 full-grid NMSE: scratch " + db(s) + " dB, ft " + db(f) + " dB, lora r=16 " +
                              db(l) + " dB (pretraining observed " + db(pre.run.metrics.observed_nmse_db) + " dB)"};
}

// ---- 9 ----------------------------------------------------------------------

template <typename Err, typename F>
bool throws_as(F&& f) {
  try {
    f();
  } catch (const Err&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  if (pos == std::string::npos) throw std::logic_error("pattern not found: " + from);
  return s.replace(pos, from.size(), to);
}

Outcome serialization() {
  const fs::path dir = fresh_dir("c9");
  int round_trips = 0, typed = 0, cases = 0;
  for (int t = 0; t < 5; ++t) {
    Rng rng(9000 + static_cast<std::uint64_t>(t));
    auto grid = sfr::testing::random_grid(1 + static_cast<int>(rng.below(64)), 1 + static_cast<int>(rng.below(8)),
                                          rng.next());
    grid.samples()[0] = -0.0f;
    grid.samples().back() = std::numeric_limits<float>::denorm_min();
    write_grid(dir / "g.sfrgrid", grid);
    const auto g2 = read_grid(dir / "g.sfrgrid");
    if (same_bits<float>(grid.samples(), g2.samples()) && g2.num_samples() == grid.num_samples() &&
        g2.sample_rate_hz() == grid.sample_rate_hz() && g2.origin_label() == grid.origin_label()) {
      ++round_trips;
    }

    NetworkConfig c;
    c.depth = 1 + static_cast<int>(rng.below(2));
    c.base_filters = 4;
    c.input_channels = 2;
    c.seed = rng.next();
    DpNetwork<float> net(c);
    net.params()[0].weight[0] = -0.0f;
    write_checkpoint(dir / "n.sfrckpt", net);
    const auto n2 = read_checkpoint(dir / "n.sfrckpt");
    bool same = n2.fingerprint() == net.fingerprint() && n2.config() == net.config();
    for (std::size_t l = 0; l < net.params().size(); ++l) {
      same = same && same_bits<float>(net.params()[l].weight.values(), n2.params()[l].weight.values()) &&
             same_bits<float>(net.params()[l].bias.values(), n2.params()[l].bias.values());
    }
    if (same) ++round_trips;

    auto bundle = make_bundle<float>(net, 1 + static_cast<int>(rng.below(4)), std::nullopt, rng.next());
    for (auto& ad : bundle.adapters) {
      for (float& v : ad.b.values()) v = static_cast<float>(rng.normal());
    }
    bundle.adapters[0].a[0] = -0.0f;
    write_adapters(dir / "a.sfradapt", bundle);
    const auto b2 = read_adapters(dir / "a.sfradapt");
    same = b2.base_model_fingerprint == bundle.base_model_fingerprint && b2.rank == bundle.rank &&
           b2.adapters.size() == bundle.adapters.size();
    for (std::size_t i = 0; same && i < bundle.adapters.size(); ++i) {
      same = same_bits<float>(bundle.adapters[i].a.values(), b2.adapters[i].a.values()) &&
             same_bits<float>(bundle.adapters[i].b.values(), b2.adapters[i].b.values()) &&
             bundle.adapters[i].alpha == b2.adapters[i].alpha;
    }
    if (same) ++round_trips;
  }

  const std::string grid_text = read_file(dir / "g.sfrgrid");
  const std::string ckpt_text = read_file(dir / "n.sfrckpt");
  const std::string adapt_text = read_file(dir / "a.sfradapt");
  auto expect = [&](bool ok) {
    ++cases;
    if (ok) ++typed;
  };
  const fs::path bad = dir / "bad";
  write_file_atomic(bad, grid_text.substr(0, grid_text.size() - 3));
  expect(throws_as<TruncatedPayload>([&] { read_grid(bad); }));
  write_file_atomic(bad, replace_once(grid_text, "SFRGRID 1", "SFRGRID 7"));
  expect(throws_as<FormatVersionMismatch>([&] { read_grid(bad); }));
  std::string nan_grid = grid_text;
  const float qnan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan_grid.data() + nan_grid.size() - sizeof(float), &qnan, sizeof(float));
  write_file_atomic(bad, nan_grid);
  expect(throws_as<NonFinitePayload>([&] { read_grid(bad); }));
  write_file_atomic(bad, ckpt_text.substr(0, ckpt_text.size() - 1));
  expect(throws_as<TruncatedPayload>([&] { read_checkpoint(bad); }));
  write_file_atomic(bad, ckpt_text + "xx");
  expect(throws_as<CorruptFile>([&] { read_checkpoint(bad); }));
  expect(throws_as<CorruptFile>([&] { read_checkpoint(dir / "g.sfrgrid"); }));
  const auto fp_line = adapt_text.find("base_model_fingerprint=");
  const auto fp_end = adapt_text.find('\n', fp_line);
  write_file_atomic(bad, adapt_text.substr(0, fp_line) + adapt_text.substr(fp_end + 1));
  expect(throws_as<MissingFingerprint>([&] { read_adapters(bad); }));
  write_file_atomic(bad, adapt_text.substr(0, adapt_text.size() - 2));
  expect(throws_as<TruncatedPayload>([&] { read_adapters(bad); }));
  expect(throws_as<IoError>([&] { read_grid(dir / "absent.sfrgrid"); }));

  std::ostringstream os;
  os << round_trips << "/15 random round trips bitwise lossless; " << typed << "/" << cases
     << " corrupted files raised the expected error type";
  return {round_trips == 15 && typed == cases, os.str()};
}

// ---- 10 ---------------------------------------------------------------------

Outcome determinism() {
  auto spec = ex::load_spec(kScenes / "desk.json");
  spec.train.iterations = 100;
  std::vector<ex::PretrainResult> runs;
  for (const char* name : {"c10a", "c10b"}) {
    ex::RunOptions opts;
    opts.output_dir = fresh_dir(name);
    runs.push_back(ex::cmd_pretrain(spec, opts));
  }
  const auto& a = runs[0].run.record.rows;
  const auto& b = runs[1].run.record.rows;
  double worst = a.size() == b.size() ? 0.0 : 1.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    worst = std::max(worst, sfr::testing::rel_diff(a[i].l1_loss, b[i].l1_loss));
  }
  bool bytes = true;
  for (const char* f : {"train.csv", "result.csv"}) {
    bytes = bytes && read_file(kWork / "c10a" / "pretrain" / f) == read_file(kWork / "c10b" / "pretrain" / f);
  }
  const bool ckpt = read_file(runs[0].checkpoint) == read_file(runs[1].checkpoint);
  return {worst <= 1e-9 && bytes,
          std::to_string(a.size()) + " loss rows, worst relative difference " + sci(worst) + "; metric CSVs " +
              (bytes ? "byte-identical" : "differ") + "; checkpoints " + (ckpt ? "byte-identical" : "differ")};
}

// ---- 11 ---------------------------------------------------------------------

Outcome cross_room() {
  const auto spec = ex::load_spec(kScenes / "cross_room_reduced.json");
  ex::RunOptions opts;
  opts.output_dir = fresh_dir("c11");
  opts.workers = ex::workers_from_env();
  opts.log = &std::cerr;
  const auto res = ex::cmd_cross_room(spec, opts);
  bool finite = true;
  for (const auto& r : res.rows) finite = finite && std::isfinite(r.nmse_db);
  bool diagonal_best = true;
  std::ostringstream os;
  os << res.rows.size() << " rows (need 36), " << (finite ? "all finite" : "non-finite values");
  for (const auto& [room, v] : res.pretraining) {
    double best_adapt = std::numeric_limits<double>::infinity();
    for (const auto& r : res.rows) {
      if (r.pretrain_room == room) best_adapt = std::min(best_adapt, r.nmse_db);
    }
    diagonal_best = diagonal_best && v < best_adapt;
    os << "; " << room << " pretraining " << db(v) << " dB vs best adaptation " << db(best_adapt) << " dB";
  }
  return {res.rows.size() == 36 && finite && diagonal_best, os.str()};
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> list = {
      {"LoRA zero-init identity", zero_init_identity},
      {"contraction oracle", contraction_oracle},
      {"gradient checks", gradient_checks},
      {"parameter accounting", parameter_accounting},
      {"frozen-base guarantee", frozen_base},
      {"NMSE metric oracle", nmse_oracle},
      {"desk-scale DP reconstruction", desk_reconstruction},
      {"adaptation-benefit trend", adaptation_benefit},
      {"serialization", serialization},
      {"determinism", determinism},
      {"cross-room matrix shape", cross_room},
  };
  return list;
}

bool run_one(std::size_t n) {
  const auto& c = criteria()[n - 1];
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = c.run();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "criterion " << n << " (" << c.name << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
            << " [" << db(secs) << " s]" << std::endl;
  return o.pass;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: sfr_acceptance <1-11|all>\n";
    return 2;
  }
  const std::string arg = argv[1];
  fs::create_directories(kWork);
  if (arg == "all") {
    bool ok = true;
    for (std::size_t n = 1; n <= criteria().size(); ++n) ok = run_one(n) && ok;
    return ok ? 0 : 1;
  }
  std::size_t n = 0;
  try {
    n = std::stoul(arg);
  } catch (const std::exception&) {
  }
  if (n < 1 || n > criteria().size()) {
    std::cerr << "unknown criterion '" << arg << "'\n";
    return 2;
  }
  return run_one(n) ? 0 : 1;
}
