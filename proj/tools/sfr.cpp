// sfr: pretraining, adaptation and sweep driver.
//
//   sfr pretrain   --spec scene.json [--seed S] [--out DIR]
//   sfr adapt      --spec scene.json --mode ft|lora|scratch [--checkpoint F] [--rank R]
//   sfr sweep-rank --spec scene.json [--checkpoint F]
//   sfr sweep-mics --spec scene.json [--checkpoint F]
//   sfr cross-room --spec rooms.json
//   sfr report     --out DIR
//
// SFR_WORKERS sets how many sweep cells train at once (default 1).

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "sfr/data_io.hpp"
#include "sfr/errors.hpp"
#include "sfr/experiment.hpp"

namespace {

using sfr::format_double;
namespace ex = sfr::experiment;

void print_run(const ex::RunSummary& s) {
  std::cout << s.label << " full_nmse_db=" << format_double(s.metrics.full_nmse_db)
            << " observed_nmse_db=" << format_double(s.metrics.observed_nmse_db)
            << " unobserved_nmse_db=" << format_double(s.metrics.unobserved_nmse_db)
            << " trainable_params=" << s.trainable_params
            << " trainable_fraction=" << format_double(s.trainable_fraction) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep-prior sound-field reconstruction experiments"};
  app.require_subcommand(1);

  std::string spec_path;
  std::optional<std::string> checkpoint;
  std::string mode = "lora";
  std::optional<int> rank;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;

  auto with_spec = [&](CLI::App* c) {
    c->add_option("--spec", spec_path, "experiment spec (JSON)")->required()->check(CLI::ExistingFile);
    c->add_option("--seed", seed, "override network and adapter seeds");
    c->add_option("--out", out, "output directory (overrides the experiment file)");
  };
  auto* pretrain = app.add_subcommand("pretrain", "scratch fit on the pretraining scene");
  with_spec(pretrain);
  auto* adapt = app.add_subcommand("adapt", "adapt a pretrained network to the target scene");
  with_spec(adapt);
  adapt->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->check(CLI::ExistingFile);
  adapt->add_option("--mode", mode, "ft | lora | scratch")
      ->check(CLI::IsMember({"ft", "full_finetune", "lora", "scratch"}));
  adapt->add_option("--rank", rank, "lora rank")->check(CLI::PositiveNumber);
  auto* sweep_rank = app.add_subcommand("sweep-rank", "lora adaptation for every configured rank");
  with_spec(sweep_rank);
  sweep_rank->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->check(CLI::ExistingFile);
  auto* sweep_mics = app.add_subcommand("sweep-mics", "scratch/ft/lora for every configured mic count");
  with_spec(sweep_mics);
  sweep_mics->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->check(CLI::ExistingFile);
  auto* cross_room = app.add_subcommand("cross-room", "pretrain in each room, adapt to the others");
  with_spec(cross_room);
  auto* report = app.add_subcommand("report", "summarize the runs in a directory");
  std::string run_dir;
  report->add_option("--out,run_dir", run_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      std::cout << ex::cmd_report(run_dir);
      return 0;
    }
    const ex::ExperimentSpec spec = ex::load_spec(spec_path);
    ex::RunOptions opts;
    if (out) opts.output_dir = *out;
    opts.seed = seed;
    opts.workers = ex::workers_from_env();
    opts.log = &std::cerr;
    std::optional<std::filesystem::path> ckpt;
    if (checkpoint) ckpt = *checkpoint;

    if (pretrain->parsed()) {
      const auto r = ex::cmd_pretrain(spec, opts);
      print_run(r.run);
      std::cout << "checkpoint " << r.checkpoint.string() << '\n';
    } else if (adapt->parsed()) {
      print_run(ex::cmd_adapt(spec, ckpt, sfr::parse_train_mode(mode), rank, opts));
    } else if (sweep_rank->parsed()) {
      std::cout << "rank,iteration,nmse_db,trainable_params\n";
      for (const auto& r : ex::cmd_sweep_rank(spec, ckpt, opts)) {
        std::cout << r.rank << ',' << r.iteration << ',' << format_double(r.nmse_db) << ','
                  << r.trainable_params << '\n';
      }
    } else if (sweep_mics->parsed()) {
      std::cout << "M_tilde,mode,nmse_db\n";
      for (const auto& r : ex::cmd_sweep_mics(spec, ckpt, opts)) {
        std::cout << r.m_tilde << ',' << sfr::to_string(r.mode) << ',' << format_double(r.nmse_db) << '\n';
      }
    } else if (cross_room->parsed()) {
      const auto res = ex::cmd_cross_room(spec, opts);
      std::cout << "pretrain_room,target_room,m_tilde,mode,nmse_db,lora_gap_db\n";
      for (const auto& r : res.rows) {
        std::cout << r.pretrain_room << ',' << r.target_room << ',' << r.m_tilde << ','
                  << sfr::to_string(r.mode) << ',' << format_double(r.nmse_db) << ','
                  << format_double(r.lora_gap_db) << '\n';
      }
      for (const auto& [room, v] : res.pretraining) {
        std::cout << room << " (pretraining) " << format_double(v) << '\n';
      }
    }
  } catch (const sfr::TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
