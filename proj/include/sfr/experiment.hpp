#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sfr/core_signal.hpp"
#include "sfr/dp_network.hpp"
#include "sfr/room_sim.hpp"
#include "sfr/trainer.hpp"

namespace sfr::experiment {

enum class Scenario { single_room_source_move, multi_room };

struct MaskSpec {
  int m_tilde = 0;  // 0 means every microphone
  std::uint64_t seed = 0;
};

// One ground-truth grid: simulated from (room, source, array), or read from
// grid_file when set.
struct Scene {
  std::string name;
  RoomSpec room;
  SourceSpec source;
  ArrayGeometry array;
  std::optional<std::filesystem::path> grid_file;
};

struct ExperimentSpec {
  std::string name;
  Scenario scenario = Scenario::single_room_source_move;
  double sample_rate_hz = 8000.0;
  int rir_length = 1024;
  // single_room_source_move: [0] pretraining source, [1] adaptation source.
  // multi_room: one scene per room, pretraining and target alike.
  std::vector<Scene> scenes;
  NetworkConfig network;
  double noise_variance = 0.1;
  std::uint64_t noise_seed = 0;
  MaskSpec pretrain_mask;
  MaskSpec adapt_mask;
  TrainConfig train;  // mode, rank and alpha are set per command
  int lora_rank = 16;
  std::optional<double> lora_alpha;
  std::vector<int> ranks{1, 2, 4, 8, 16, 32, 64};
  MaskSpec rank_sweep_mask;
  std::vector<int> mic_counts{4, 8, 16, 32};
  std::vector<int> cross_room_counts{20, 33};
  std::filesystem::path output_dir = "runs";

  void validate() const;
  int num_mics() const;
};

// Reads a JSON spec; relative paths inside it resolve against its directory.
ExperimentSpec load_spec(const std::filesystem::path& path);
ExperimentSpec parse_spec(const std::string& json_text, const std::filesystem::path& base_dir = {});

struct RunOptions {
  std::optional<std::filesystem::path> output_dir;  // overrides spec.output_dir
  std::optional<std::uint64_t> seed;                // overrides network and adapter seeds
  int workers = 1;                                  // parallel sweep cells
  std::ostream* log = nullptr;
};

// SFR_WORKERS, clamped to >= 1; 1 when unset or malformed.
int workers_from_env();

ImpulseResponseGrid ground_truth(const ExperimentSpec& spec, const Scene& scene);
SamplingMask draw_mask(const MaskSpec& m, int total_channels);
NoiseInput noise_for(const ExperimentSpec& spec);

struct RunSummary {
  std::string label;
  TrainMode mode = TrainMode::scratch;
  std::optional<int> rank;
  int m_tilde = 0;
  EvalMetrics metrics;
  std::size_t trainable_params = 0;
  double trainable_fraction = 1.0;  // relative to the base parameter count
  double wall_time_s = 0.0;
  TrainRecord record;
};

struct PretrainResult {
  RunSummary run;
  std::filesystem::path checkpoint;
};

// Scratch fit on the pretraining scene and mask; writes
// <out>/pretrain/{checkpoint.sfrckpt, train.csv, summary.json, reconstruction.sfrgrid}.
PretrainResult cmd_pretrain(const ExperimentSpec& spec, const RunOptions& opts,
                            std::size_t scene_index = 0);

// Adapts to the adaptation scene (single room) or to scenes[scene_index]
// (multi room). A missing checkpoint for ft/lora runs the pretraining first.
// Writes <out>/adapt-<mode>[-r<rank>]/ with train.csv, result.csv,
// summary.json, reconstruction.sfrgrid and, for lora, adapters.sfradapt.
RunSummary cmd_adapt(const ExperimentSpec& spec, const std::optional<std::filesystem::path>& checkpoint,
                     TrainMode mode, std::optional<int> rank, const RunOptions& opts,
                     std::optional<std::size_t> scene_index = std::nullopt);

struct RankSweepRow {
  int rank = 0;
  int iteration = 0;
  double nmse_db = 0.0;
  std::size_t trainable_params = 0;
};
// sweep_rank.csv (rank,iteration,nmse_db,trainable_params) + sweep_rank.svg
std::vector<RankSweepRow> cmd_sweep_rank(const ExperimentSpec& spec,
                                         const std::optional<std::filesystem::path>& checkpoint,
                                         const RunOptions& opts);

struct MicSweepRow {
  int m_tilde = 0;
  TrainMode mode = TrainMode::scratch;
  double nmse_db = 0.0;
};
// sweep_mics.csv (M_tilde,mode,nmse_db) + sweep_mics.svg
std::vector<MicSweepRow> cmd_sweep_mics(const ExperimentSpec& spec,
                                        const std::optional<std::filesystem::path>& checkpoint,
                                        const RunOptions& opts);

struct CrossRoomRow {
  std::string pretrain_room;
  std::string target_room;
  int m_tilde = 0;
  TrainMode mode = TrainMode::scratch;
  double nmse_db = 0.0;
  double lora_gap_db = 0.0;  // NMSE(lora) - best NMSE of the cell
};
struct CrossRoomResult {
  std::vector<CrossRoomRow> rows;                             // cross_room.csv
  std::vector<std::pair<std::string, double>> pretraining;  // cross_room_pretrain.csv
};
CrossRoomResult cmd_cross_room(const ExperimentSpec& spec, const RunOptions& opts);

// Summarizes every run below run_dir into report.txt, loss.svg and nmse.svg.
// Returns the report text.
std::string cmd_report(const std::filesystem::path& run_dir);

// CSV text of a training record: iteration,l1_loss,observed_nmse_db,full_nmse_db
std::string train_record_csv(const TrainRecord& record);

}  // namespace sfr::experiment
