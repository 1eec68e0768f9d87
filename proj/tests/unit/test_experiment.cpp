#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>
#include <unistd.h>

#include "json.hpp"
#include "sfr/data_io.hpp"
#include "sfr/errors.hpp"
#include "sfr/experiment.hpp"
#include "sfr/plot.hpp"

using namespace sfr;
namespace ex = sfr::experiment;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("sfr_exp_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Small enough to train in well under a second.
const char* kTinySingle = R"({
  "name": "tiny",
  "scenario": "single_room_source_move",
  "sample_rate_hz": 8000,
  "rir_length": 32,
  "room": {"dimensions_m": [4, 3, 2.5], "t60_s": 0.3, "max_reflection_order": 2},
  "sources": [{"position_m": [1.2, 2.0, 1.2]}, {"position_m": [2.1, 2.2, 1.1]}],
  "array": {"first_mic_position_m": [1.0, 1.0, 1.2], "num_mics": 8, "spacing_m": 0.03},
  "network": {"depth": 1, "base_filters": 4, "input_channels": 2, "seed": 3},
  "noise": {"variance": 0.1, "seed": 4},
  "pretrain_mask": {"m_tilde": 8, "seed": 1},
  "adapt_mask": {"m_tilde": 3, "seed": 2},
  "train": {"learning_rate": 0.01, "iterations": 6, "seed": 5, "eval_every": 2},
  "lora": {"rank": 2},
  "ranks": [1, 2, 4],
  "mic_counts": [2, 8]
})";

const char* kTinyRooms = R"({
  "scenario": "multi_room",
  "rir_length": 32,
  "array": {"first_mic_position_m": [1.0, 1.0, 1.2], "num_mics": 8},
  "rooms": [
    {"name": "a", "dimensions_m": [4, 3, 2.5], "t60_s": 0.3, "max_reflection_order": 1, "source": {"position_m": [1.5, 2, 1]}},
    {"name": "b", "dimensions_m": [5, 4, 3], "t60_s": 0.4, "max_reflection_order": 1, "source": {"position_m": [1.4, 1.6, 1.1]}},
    {"name": "c", "dimensions_m": [6, 4, 3], "t60_s": 0.6, "max_reflection_order": 1, "source": {"position_m": [1.1, 1.7, 1.4]}}
  ],
  "network": {"depth": 1, "base_filters": 4, "input_channels": 2},
  "train": {"iterations": 4, "learning_rate": 0.01},
  "lora": {"rank": 1},
  "cross_room_counts": [3, 5]
})";

ex::RunOptions in(const fs::path& dir) {
  ex::RunOptions o;
  o.output_dir = dir;
  return o;
}

std::string with(std::string text, const std::string& from, const std::string& to) {
  const auto pos = text.find(from);
  REQUIRE(pos != std::string::npos);
  return text.replace(pos, from.size(), to);
}

}  // namespace

TEST_CASE("spec parsing fills scenes and defaults") {
  const auto s = ex::parse_spec(kTinySingle);
  CHECK(s.scenario == ex::Scenario::single_room_source_move);
  REQUIRE(s.scenes.size() == 2);
  CHECK(s.scenes[0].name == "room-source1");
  CHECK(s.scenes[1].source.position_m[0] == 2.1);
  CHECK(s.num_mics() == 8);
  CHECK(s.rank_sweep_mask.m_tilde == 3);
  CHECK(s.network.head_init_scale == 0.01);
  CHECK(s.train.weight_decay == 0.01);
  CHECK(s.noise_variance == 0.1);
  CHECK(s.output_dir == "runs");

  const auto r = ex::parse_spec(kTinyRooms);
  CHECK(r.scenes.size() == 3);
  CHECK(r.scenes[2].room.t60_s == 0.6);
  CHECK(r.pretrain_mask.m_tilde == 8);
}

TEST_CASE("spec errors") {
  CHECK_THROWS_AS(ex::parse_spec("{"), InvalidArgument);
  CHECK_THROWS_AS(ex::parse_spec(with(kTinySingle, "\"name\": \"tiny\"", "\"nmae\": \"tiny\"")), InvalidArgument);
  CHECK_THROWS_AS(ex::parse_spec(with(kTinySingle, "single_room_source_move", "two_rooms")), InvalidArgument);
  CHECK_THROWS_AS(ex::parse_spec(with(kTinySingle, "\"m_tilde\": 3", "\"m_tilde\": 9")), InvalidArgument);
  CHECK_THROWS_AS(ex::parse_spec(with(kTinySingle, "[2.1, 2.2, 1.1]", "[9.1, 2.2, 1.1]")), GeometryError);
  CHECK_THROWS_AS(ex::parse_spec(with(kTinySingle, "\"ranks\": [1, 2, 4]", "\"ranks\": []")), InvalidArgument);
  CHECK_THROWS_AS(ex::parse_spec(with(kTinySingle, ", {\"position_m\": [2.1, 2.2, 1.1]}", "")), InvalidArgument);
  CHECK_THROWS_AS(ex::parse_spec(with(kTinyRooms, "[3, 5]", "[3, 12]")), InvalidArgument);
  CHECK_THROWS_AS(ex::parse_spec(with(kTinyRooms, "\"name\": \"b\"", "\"name\": \"a\"")), InvalidArgument);
  CHECK_THROWS_AS(ex::load_spec("/nonexistent/spec.json"), IoError);
  // referenced files must exist
  CHECK_THROWS_AS(ex::parse_spec(with(kTinySingle, "{\"position_m\": [1.2, 2.0, 1.2]}",
                                      "{\"grid_file\": \"missing.sfrgrid\"}"),
                                 "/nonexistent"),
                  IoError);
}

TEST_CASE("ground truth can come from a grid file") {
  TempDir d("grid");
  auto spec = ex::parse_spec(kTinySingle);
  const auto sim = ex::ground_truth(spec, spec.scenes[0]);
  write_grid(d.path / "g.sfrgrid", sim);
  const auto s2 = ex::parse_spec(with(kTinySingle, "{\"position_m\": [1.2, 2.0, 1.2]}", "{\"grid_file\": \"g.sfrgrid\"}"),
                                 d.path);
  const auto loaded = ex::ground_truth(s2, s2.scenes[0]);
  CHECK(loaded.samples().size() == sim.samples().size());
  CHECK(std::equal(loaded.samples().begin(), loaded.samples().end(), sim.samples().begin()));

  auto s3 = ex::parse_spec(with(kTinySingle, "\"rir_length\": 32", "\"rir_length\": 16"));
  s3.scenes[0].grid_file = d.path / "g.sfrgrid";
  CHECK_THROWS_AS(ex::ground_truth(s3, s3.scenes[0]), ShapeMismatch);
}

TEST_CASE("workers come from the environment") {
  ::unsetenv("SFR_WORKERS");
  CHECK(ex::workers_from_env() == 1);
  ::setenv("SFR_WORKERS", "3", 1);
  CHECK(ex::workers_from_env() == 3);
  ::setenv("SFR_WORKERS", "zero", 1);
  CHECK(ex::workers_from_env() == 1);
  ::setenv("SFR_WORKERS", "-2", 1);
  CHECK(ex::workers_from_env() == 1);
  ::unsetenv("SFR_WORKERS");
}

TEST_CASE("pretrain writes its artifacts and is reproducible") {
  TempDir d("pre");
  const auto spec = ex::parse_spec(kTinySingle);
  const auto a = ex::cmd_pretrain(spec, in(d.path / "a"));
  const auto b = ex::cmd_pretrain(spec, in(d.path / "b"));
  for (const char* f : {"train.csv", "result.csv", "summary.json", "reconstruction.sfrgrid", "checkpoint.sfrckpt"}) {
    CAPTURE(f);
    CHECK(fs::is_regular_file(d.path / "a" / "pretrain" / f));
  }
  for (const char* f : {"train.csv", "result.csv", "reconstruction.sfrgrid", "checkpoint.sfrckpt"}) {
    CAPTURE(f);
    CHECK(read_file(d.path / "a" / "pretrain" / f) == read_file(d.path / "b" / "pretrain" / f));
  }
  const auto csv = read_file(d.path / "a" / "pretrain" / "train.csv");
  CHECK(csv.rfind("iteration,l1_loss,observed_nmse_db,full_nmse_db\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);  // header + iterations 0..6
  CHECK(csv.find("\n1,") != std::string::npos);
  CHECK(csv.find(",nan,nan\n") != std::string::npos);  // rows between evaluations
  CHECK(a.run.mode == TrainMode::scratch);
  CHECK(a.run.m_tilde == 8);
  // all channels observed
  CHECK(a.run.metrics.observed_nmse_db == a.run.metrics.full_nmse_db);
  CHECK(std::isnan(a.run.metrics.unobserved_nmse_db));
  CHECK(a.run.trainable_fraction == 1.0);
  CHECK(read_checkpoint(a.checkpoint).fingerprint() == DpNetwork<float>(spec.network).fingerprint());
}

TEST_CASE("seed override changes the initialization only") {
  TempDir d("seed");
  const auto spec = ex::parse_spec(kTinySingle);
  ex::RunOptions o = in(d.path);
  o.seed = 99;
  const auto a = ex::cmd_pretrain(spec, o);
  const auto b = ex::cmd_pretrain(spec, in(d.path / "plain"));
  CHECK(a.run.record.rows[0].l1_loss != b.run.record.rows[0].l1_loss);
  CHECK(read_checkpoint(a.checkpoint).config().seed == 99);
}

TEST_CASE("adapt modes") {
  TempDir d("adapt");
  const auto spec = ex::parse_spec(kTinySingle);
  const auto pre = ex::cmd_pretrain(spec, in(d.path));

  std::ostringstream log;
  ex::RunOptions o = in(d.path);
  o.log = &log;
  const auto scratch = ex::cmd_adapt(spec, pre.checkpoint, TrainMode::scratch, std::nullopt, o);
  CHECK(log.str().find("warning: scratch mode ignores the checkpoint") != std::string::npos);
  CHECK(scratch.trainable_fraction == 1.0);

  const auto ft = ex::cmd_adapt(spec, pre.checkpoint, TrainMode::full_finetune, std::nullopt, o);
  CHECK(ft.trainable_params == scratch.trainable_params);
  CHECK(ft.record.initial_loss() != scratch.record.initial_loss());

  const auto lora = ex::cmd_adapt(spec, pre.checkpoint, TrainMode::lora, 1, o);
  CHECK(lora.rank == 1);
  CHECK(lora.trainable_fraction < 1.0);
  CHECK(lora.trainable_params == lora_param_count(network_layers(spec.network), 1));
  // fresh adapters: the first LoRA row is the pretrained network's output
  CHECK(lora.record.initial_loss() == ft.record.initial_loss());
  const auto bundle = read_adapters(d.path / "adapt-lora-r1" / "adapters.sfradapt");
  CHECK(bundle.rank == 1);
  CHECK(bundle.base_model_fingerprint == DpNetwork<float>(spec.network).fingerprint());
  CHECK(fs::is_regular_file(d.path / "adapt-scratch" / "result.csv"));
  CHECK(fs::is_regular_file(d.path / "adapt-ft" / "train.csv"));
  CHECK_FALSE(fs::exists(d.path / "adapt-ft" / "adapters.sfradapt"));

  const auto result = read_file(d.path / "adapt-lora-r1" / "result.csv");
  CHECK(result.rfind("mode,rank,m_tilde,full_nmse_db,observed_nmse_db,unobserved_nmse_db,trainable_params,"
                     "trainable_fraction\nlora,1,3,",
                     0) == 0);

  CHECK_THROWS_AS(ex::cmd_adapt(spec, pre.checkpoint, TrainMode::full_finetune, 2, o), InvalidArgument);
}

TEST_CASE("adapt rejects a checkpoint of another architecture") {
  TempDir d("ckpt");
  const auto spec = ex::parse_spec(kTinySingle);
  NetworkConfig other = spec.network;
  other.base_filters = 6;
  write_checkpoint(d.path / "other.sfrckpt", DpNetwork<float>(other));
  CHECK_THROWS_AS(ex::cmd_adapt(spec, d.path / "other.sfrckpt", TrainMode::lora, std::nullopt, in(d.path)),
                  IncompatibleCheckpoint);
}

TEST_CASE("adapt without a checkpoint pretrains first") {
  TempDir d("auto");
  const auto spec = ex::parse_spec(kTinySingle);
  ex::cmd_adapt(spec, std::nullopt, TrainMode::full_finetune, std::nullopt, in(d.path));
  CHECK(fs::is_regular_file(d.path / "pretrain" / "checkpoint.sfrckpt"));
}

TEST_CASE("rank sweep") {
  TempDir d("rank");
  const auto spec = ex::parse_spec(kTinySingle);
  const auto rows = ex::cmd_sweep_rank(spec, std::nullopt, in(d.path));
  // evaluated rows only: iterations 0, 2, 4, 6 per rank
  REQUIRE(rows.size() == 12);
  std::set<int> ranks;
  std::size_t prev = 0;
  for (std::size_t i = 0; i < rows.size(); i += 4) {
    CHECK(rows[i].trainable_params > prev);
    prev = rows[i].trainable_params;
    ranks.insert(rows[i].rank);
    CHECK(rows[i + 3].iteration == 6);
  }
  CHECK(ranks == std::set<int>{1, 2, 4});
  const auto csv = read_file(d.path / "sweep_rank.csv");
  CHECK(csv.rfind("rank,iteration,nmse_db,trainable_params\n1,0,", 0) == 0);
  const auto svg = read_file(d.path / "sweep_rank.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("r=4") != std::string::npos);
  CHECK(fs::is_regular_file(d.path / "sweep-rank" / "r2" / "adapters.sfradapt"));
}

TEST_CASE("microphone sweep shares masks across modes") {
  TempDir d("mics");
  const auto spec = ex::parse_spec(kTinySingle);
  ex::RunOptions o = in(d.path);
  o.workers = 2;
  const auto rows = ex::cmd_sweep_mics(spec, std::nullopt, o);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].m_tilde == 2);
  CHECK(rows[0].mode == TrainMode::scratch);
  CHECK(rows[1].mode == TrainMode::full_finetune);
  CHECK(rows[2].mode == TrainMode::lora);
  CHECK(read_file(d.path / "sweep_mics.csv").rfind("M_tilde,mode,nmse_db\n2,scratch,", 0) == 0);
  // M~ = M: observed equals full for every mode
  for (const char* run : {"m8-scratch", "m8-ft", "m8-lora-r2"}) {
    CAPTURE(run);
    const auto j = nlohmann::json::parse(read_file(d.path / "sweep-mics" / run / "summary.json"));
    CHECK(j.at("full_nmse_db").get<double>() == j.at("observed_nmse_db").get<double>());
    CHECK(j.at("unobserved_nmse_db").is_null());
  }
  // serial and parallel cells agree exactly
  TempDir d1("mics1");
  const auto serial = ex::cmd_sweep_mics(spec, std::nullopt, in(d1.path));
  CHECK(read_file(d.path / "sweep_mics.csv") == read_file(d1.path / "sweep_mics.csv"));
  CHECK(serial.size() == rows.size());
}

TEST_CASE("cross-room matrix") {
  TempDir d("cross");
  const auto spec = ex::parse_spec(kTinyRooms);
  const auto res = ex::cmd_cross_room(spec, in(d.path));
  CHECK(res.rows.size() == 36);
  CHECK(res.pretraining.size() == 3);
  for (const auto& r : res.rows) {
    CHECK(r.pretrain_room != r.target_room);
    CHECK(std::isfinite(r.nmse_db));
    CHECK(r.lora_gap_db >= 0.0);
  }
  // scratch cells do not depend on the pretraining room
  CHECK(res.rows[0].target_room == "b");
  CHECK(res.rows[0].mode == TrainMode::scratch);
  const auto it = std::find_if(res.rows.begin(), res.rows.end(), [](const auto& r) {
    return r.pretrain_room == "c" && r.target_room == "b" && r.m_tilde == 3 && r.mode == TrainMode::scratch;
  });
  REQUIRE(it != res.rows.end());
  CHECK(it->nmse_db == res.rows[0].nmse_db);
  const auto csv = read_file(d.path / "cross_room.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 37);
  CHECK(read_file(d.path / "cross_room_pretrain.csv").rfind("room,nmse_db\na,", 0) == 0);
  CHECK_THROWS_AS(ex::cmd_cross_room(ex::parse_spec(kTinySingle), in(d.path)), InvalidArgument);
}

TEST_CASE("report") {
  TempDir d("report");
  CHECK_THROWS_AS(ex::cmd_report(d.path), IoError);
  CHECK_THROWS_AS(ex::cmd_report(d.path / "absent"), IoError);

  const auto spec = ex::parse_spec(kTinySingle);
  ex::cmd_pretrain(spec, in(d.path));
  const fs::path run = d.path / "pretrain";
  const auto text = ex::cmd_report(run);
  const auto csv = read_file(run / "train.csv");
  const auto last = csv.substr(csv.rfind('\n', csv.size() - 2) + 1);
  const auto fields = last.substr(last.find(',') + 1);
  const auto l1 = fields.substr(0, fields.find(','));
  CHECK(text.find("final l1_loss " + l1 + "\n") != std::string::npos);
  const auto full = last.substr(last.rfind(',') + 1, last.size() - last.rfind(',') - 2);
  CHECK(text.find("final full_nmse_db " + full + "\n") != std::string::npos);

  const auto loss_svg = read_file(run / "loss.svg");
  const auto nmse_svg = read_file(run / "nmse.svg");
  CHECK(ex::cmd_report(run) == text);
  CHECK(read_file(run / "loss.svg") == loss_svg);
  CHECK(read_file(run / "nmse.svg") == nmse_svg);

  write_file_atomic(d.path / "bogus.csv", "a,b\n1,2\n");
  write_file_atomic(run / "train.csv", "iteration,l1_loss,observed_nmse_db,full_nmse_db\n0,x,1,1\n");
  try {
    ex::cmd_report(d.path);
    FAIL("expected an error");
  } catch (const CorruptFile& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bogus.csv") != std::string::npos);
    CHECK(msg.find("train.csv") != std::string::npos);
  }
}

TEST_CASE("plots are deterministic and skip non-finite points") {
  const std::vector<plot::Series> s = {{"a", {0, 1, 2}, {1.0, std::nan(""), -3.0}}, {"b <&>", {0, 2}, {0.5, 0.25}}};
  const auto one = plot::line_chart("t", "x", "y", s);
  CHECK(one == plot::line_chart("t", "x", "y", s));
  CHECK(one.find("nan") == std::string::npos);
  CHECK(one.find("b &lt;&amp;&gt;") != std::string::npos);
  const auto bars = plot::grouped_bar_chart("t", "dB", {"g1", "g2"}, {"s1", "s2"}, {{-1.0, -2.0}, {-3.0, 1.0}});
  CHECK(bars == plot::grouped_bar_chart("t", "dB", {"g1", "g2"}, {"s1", "s2"}, {{-1.0, -2.0}, {-3.0, 1.0}}));
  CHECK(std::count(bars.begin(), bars.end(), '\n') > 10);
  CHECK(bars.find("<rect") != std::string::npos);
}

TEST_CASE("train record CSV keeps full precision") {
  TrainRecord r;
  r.rows.push_back({0, 0.1, -3.25, std::nan("")});
  r.rows.push_back({1, 1.0 / 3.0, -1e-300, 5.0});
  const auto csv = ex::train_record_csv(r);
  CHECK(csv == "iteration,l1_loss,observed_nmse_db,full_nmse_db\n0,0.1,-3.25,nan\n1,0.3333333333333333,-1e-300,5\n");
}
