#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mafenn/channel.hpp"
#include "mafenn/equalizer.hpp"
#include "mafenn/game.hpp"
#include "mafenn/gradcheck.hpp"
#include "mafenn/harness.hpp"
#include "mafenn/kv.hpp"
#include "mafenn/rng.hpp"

using namespace mafenn;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << text;
  if (!out) throw std::runtime_error(path + ": write failed");
}

// Options shared by the single-cell commands (generate/train/evaluate).
struct CellFlags {
  std::string channel = "nonlinear";
  double snr_db = 20.0;
  std::uint64_t seed = 1;
};

void add_cell_flags(CLI::App* cmd, CellFlags& f) {
  cmd->add_option("--channel", f.channel,
                  "Channel: identity, linear or nonlinear")
      ->check(CLI::IsMember({"identity", "linear", "nonlinear"}));
  cmd->add_option("--snr-db", f.snr_db, "Signal-to-noise ratio in dB");
  cmd->add_option("--seed", f.seed, "Base seed for this run");
}

TransmissionRecord record_for(const CellFlags& f, std::uint64_t symbols,
                              const std::string& role) {
  return transmit(channel_at(parse_channel(f.channel), f.snr_db,
                             derive_seed(f.seed, role)),
                  symbols);
}

// Model settings: desk defaults, then the config file, then the explicit
// flags, later layers overriding earlier ones.
struct ModelFlags {
  std::string config_path;
  int cycles = -1;
  int feed_window = -1;
  std::string combine;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--config", f.config_path,
                  "key = value model config applied over the desk defaults")
      ->check(CLI::ExistingFile);
  cmd->add_option("--cycles", f.cycles, "Feedback cycles per slot");
  cmd->add_option("--feedback-window", f.feed_window,
                  "Past recovered values kept as history");
  cmd->add_option("--combine", f.combine, "Splice mode: concat or replace")
      ->check(CLI::IsMember({"concat", "replace"}));
}

EqualizerConfig resolve_model(const ModelFlags& f) {
  std::string text = format_config(desk_config());
  if (!f.config_path.empty()) text += read_text_file(f.config_path);
  EqualizerConfig cfg = parse_config(text);
  if (f.cycles >= 0) cfg.cycles = f.cycles;
  if (f.feed_window >= 0) cfg.feed_window = f.feed_window;
  if (f.combine == "concat") cfg.combine = CombineMode::kConcat;
  if (f.combine == "replace") cfg.combine = CombineMode::kReplace;
  cfg.validate();
  return cfg;
}

void print_summary(const std::vector<SummaryRow>& summary) {
  std::printf("%-10s %-10s %8s %6s %12s %12s\n", "equalizer", "channel",
              "snr_db", "n", "ser_mean", "ser_std");
  for (const auto& s : summary)
    std::printf("%-10s %-10s %8s %6d %12s %12s\n", s.equalizer.c_str(),
                s.channel.c_str(), fmt(s.snr_db).c_str(), s.n,
                fmt(s.ser_mean).c_str(), fmt(s.ser_std).c_str());
}

// Plan assembly shared by `sweep` and `grid`.
struct PlanFlags {
  std::string config_path;
  std::string channel;
  std::vector<std::string> equalizers;
  std::vector<double> snr_grid;
  int trials = -1;
  std::int64_t train_symbols = -1, val_symbols = -1, test_symbols = -1;
  std::int64_t base_seed = -1;
};

void add_plan_flags(CLI::App* cmd, PlanFlags& f) {
  cmd->add_option("--config", f.config_path,
                  "Experiment plan file (key = value)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--channel", f.channel,
                  "Channel: identity, linear or nonlinear")
      ->check(CLI::IsMember({"identity", "linear", "nonlinear"}));
  cmd->add_option("--equalizer", f.equalizers,
                  "Equalizers to sweep (mafenn, mlp, rls, ff, loop)")
      ->delimiter(',');
  cmd->add_option("--snr-db", f.snr_grid, "SNR grid in dB")->delimiter(',');
  cmd->add_option("--trials", f.trials, "Trials per sweep point");
  cmd->add_option("--train-symbols", f.train_symbols,
                  "Training symbols per cell");
  cmd->add_option("--val-symbols", f.val_symbols,
                  "Validation symbols per grid cell");
  cmd->add_option("--test-symbols", f.test_symbols, "Test symbols per cell");
  cmd->add_option("--base-seed", f.base_seed, "Plan base seed");
}

ExperimentPlan resolve_plan(const PlanFlags& f) {
  ExperimentPlan plan = f.config_path.empty()
                            ? ExperimentPlan{}
                            : parse_plan(read_text_file(f.config_path));
  if (!f.channel.empty()) plan.channel = parse_channel(f.channel);
  if (!f.equalizers.empty()) {
    plan.equalizers.clear();
    for (const auto& name : f.equalizers)
      plan.equalizers.push_back(parse_equalizer(name));
  }
  if (!f.snr_grid.empty()) plan.snr_grid = f.snr_grid;
  if (f.trials >= 0) plan.trials = f.trials;
  if (f.train_symbols >= 0) plan.train_symbols = f.train_symbols;
  if (f.val_symbols >= 0) plan.val_symbols = f.val_symbols;
  if (f.test_symbols >= 0) plan.test_symbols = f.test_symbols;
  if (f.base_seed >= 0) plan.base_seed = f.base_seed;
  return plan;
}

std::string verify_csv(const std::vector<VerifyRow>& rows) {
  std::string s = "check_name,game_id,value,threshold,pass\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%d\n",
                  r.check_name.c_str(), r.game_id.c_str(), r.value,
                  r.threshold, r.pass ? 1 : 0);
    s += buf;
  }
  return s;
}

std::string gradcheck_csv(const std::vector<GradBatteryRow>& rows) {
  std::string s = "check_name,seed,rel_err,tol,pass\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%llu,%.17g,%.17g,%d\n",
                  r.check_name.c_str(),
                  static_cast<unsigned long long>(r.seed), r.rel_err, r.tol,
                  r.pass ? 1 : 0);
    s += buf;
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MAFENN channel-equalization laboratory"};
  app.require_subcommand(1);

  // ---- generate ----
  auto* generate = app.add_subcommand(
      "generate", "Generate a transmission dataset (.mafd)");
  CellFlags gen_cell;
  std::uint64_t gen_symbols = 100000;
  std::string gen_out = "dataset.mafd";
  add_cell_flags(generate, gen_cell);
  generate->add_option("--symbols", gen_symbols, "Symbols to generate");
  generate->add_option("--out", gen_out, "Output dataset path");

  // ---- train ----
  auto* train = app.add_subcommand(
      "train", "Train an equalizer and write a checkpoint");
  CellFlags train_cell;
  ModelFlags train_model;
  std::string train_eq = "mafenn";
  std::uint64_t train_symbols = 100000;
  std::string train_data, train_out = "model.mafw";
  add_cell_flags(train, train_cell);
  add_model_flags(train, train_model);
  train->add_option("--equalizer", train_eq, "mafenn, mlp, ff or loop")
      ->check(CLI::IsMember({"mafenn", "mlp", "ff", "loop", "rls"}));
  train->add_option("--train-symbols", train_symbols, "Training symbols");
  train->add_option("--data", train_data,
                    "Train from this dataset instead of generating one")
      ->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Checkpoint path");

  // ---- evaluate ----
  auto* evaluate = app.add_subcommand(
      "evaluate", "Evaluate a checkpoint's symbol error rate");
  CellFlags eval_cell;
  std::uint64_t eval_symbols = 10000;
  std::string eval_model, eval_data;
  add_cell_flags(evaluate, eval_cell);
  evaluate->add_option("--model", eval_model, "Checkpoint to evaluate")
      ->required()
      ->check(CLI::ExistingFile);
  evaluate->add_option("--symbols", eval_symbols, "Test symbols");
  evaluate->add_option("--data", eval_data,
                       "Evaluate on this dataset instead of generating one")
      ->check(CLI::ExistingFile);

  // ---- sweep ----
  auto* sweep = app.add_subcommand(
      "sweep", "Run an SNR sweep over equalizers and emit CSV results");
  PlanFlags sweep_plan;
  std::string sweep_out = "results";
  add_plan_flags(sweep, sweep_plan);
  sweep->add_option("--out", sweep_out, "Results directory");

  // ---- grid ----
  auto* grid = app.add_subcommand(
      "grid", "Hyperparameter grid search (cycles, feed window, combine)");
  PlanFlags grid_plan;
  std::string grid_out = "results";
  std::vector<int> grid_cycles, grid_windows;
  std::vector<std::string> grid_combines;
  add_plan_flags(grid, grid_plan);
  grid->add_option("--grid-cycles", grid_cycles, "Cycle counts to try")
      ->delimiter(',');
  grid->add_option("--grid-feed-windows", grid_windows,
                   "Feed window lengths to try")
      ->delimiter(',');
  grid->add_option("--grid-combines", grid_combines,
                   "Combine modes to try (concat, replace)")
      ->delimiter(',');
  grid->add_option("--out", grid_out, "Results directory");

  // ---- game-verify ----
  auto* game_verify = app.add_subcommand(
      "game-verify", "Run the game-dynamics verification battery");
  std::string verify_out;
  game_verify->add_option("--out", verify_out, "Also write the CSV here");

  // ---- gradcheck ----
  auto* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "Check every layer's gradients against finite differences");
  int gradcheck_seeds = 20;
  std::string gradcheck_out;
  gradcheck_cmd->add_option("--seeds", gradcheck_seeds, "Seeds per check");
  gradcheck_cmd->add_option("--out", gradcheck_out, "Also write the CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) {
      const auto rec = record_for(gen_cell, gen_symbols, "data");
      save_dataset(gen_out, rec);
      std::printf("wrote %s: %zu symbols, channel %s, snr %s dB, sigma2 %s, "
                  "delay %d\n",
                  gen_out.c_str(), rec.size(), gen_cell.channel.c_str(),
                  fmt(gen_cell.snr_db).c_str(), fmt(rec.sigma2).c_str(),
                  rec.decision_delay);
      return 0;
    }

    if (*train) {
      if (train_eq == "rls") {
        std::fprintf(stderr,
                     "rls has no checkpoint form; run it through `sweep`\n");
        return 2;
      }
      EqualizerConfig cfg = resolve_model(train_model);
      const TransmissionRecord rec =
          train_data.empty() ? record_for(train_cell, train_symbols, "train")
                             : load_dataset(train_data);
      const std::uint64_t model_seed = derive_seed(train_cell.seed, "model");
      const auto t0 = std::chrono::steady_clock::now();
      if (train_eq == "mlp") {
        MlpModel model(cfg, model_seed);
        const FitReport report = fit_mlp(model, rec);
        save_model(model, train_out);
        const auto dt = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
        std::printf("wrote %s: mlp, %zu train symbols, final loss %s, "
                    "%.1f s\n",
                    train_out.c_str(), rec.size(),
                    report.l3.empty() ? "-" : fmt(report.l3.back()).c_str(),
                    dt);
      } else {
        if (train_eq == "ff") cfg = feedforward_config(cfg);
        if (train_eq == "loop") cfg = simple_loop_config(cfg);
        MafennModel model(cfg, model_seed);
        const FitReport report = fit_mafenn(model, rec);
        save_model(model, train_out);
        const auto dt = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
        std::printf("wrote %s: %s, %zu train symbols, final l3 %s, %.1f s\n",
                    train_out.c_str(), train_eq.c_str(), rec.size(),
                    report.l3.empty() ? "-" : fmt(report.l3.back()).c_str(),
                    dt);
      }
      return 0;
    }

    if (*evaluate) {
      const TransmissionRecord rec =
          eval_data.empty() ? record_for(eval_cell, eval_symbols, "test")
                            : load_dataset(eval_data);
      const std::string kind = checkpoint_kind(eval_model);
      double ser = 0.0;
      if (kind == "mlp") {
        const MlpModel model = load_mlp(eval_model);
        ser = evaluate_ser(model, rec);
      } else {
        const MafennModel model = load_mafenn(eval_model);
        ser = evaluate_ser(model, rec);
      }
      std::printf("ser %.17g over %zu symbols (%llu errors)\n", ser,
                  rec.size(),
                  static_cast<unsigned long long>(
                      ser * static_cast<double>(rec.size()) + 0.5));
      return 0;
    }

    if (*sweep) {
      const ExperimentPlan plan = resolve_plan(sweep_plan);
      std::filesystem::create_directories(sweep_out);
      const auto dir = std::filesystem::path(sweep_out);
      write_text_file((dir / "plan.txt").string(), format_plan(plan));
      const SweepOutput out =
          run_sweep(plan, (dir / "results.csv").string());
      emit_plotdata(out.summary, sweep_out);
      print_summary(out.summary);
      int failed = 0;
      for (const auto& row : out.rows) failed += row.failed() ? 1 : 0;
      std::printf("%zu cells -> %s (%d failed)\n", out.rows.size(),
                  (dir / "results.csv").string().c_str(), failed);
      return 0;
    }

    if (*grid) {
      ExperimentPlan plan = resolve_plan(grid_plan);
      if (!grid_cycles.empty()) plan.grid_cycles = grid_cycles;
      if (!grid_windows.empty()) plan.grid_feed_windows = grid_windows;
      if (!grid_combines.empty()) {
        plan.grid_combines.clear();
        for (const auto& name : grid_combines)
          plan.grid_combines.push_back(name == "replace"
                                           ? CombineMode::kReplace
                                           : CombineMode::kConcat);
      }
      if (plan.grid_cycles.empty()) plan.grid_cycles = {0, 1, 5};
      if (plan.grid_feed_windows.empty()) plan.grid_feed_windows = {6};
      if (plan.grid_combines.empty())
        plan.grid_combines = {CombineMode::kConcat};
      std::filesystem::create_directories(grid_out);
      const auto dir = std::filesystem::path(grid_out);
      write_text_file((dir / "plan.txt").string(), format_plan(plan));
      const GridOutcome out = grid_search(plan, (dir / "grid.csv").string());
      std::printf("%-16s %6s %12s %12s\n", "point", "n", "ser_mean",
                  "ser_std");
      for (const auto& row : out.table)
        std::printf("%-16s %6d %12s %12s\n", grid_point_tag(row.point).c_str(),
                    row.n, fmt(row.ser_mean).c_str(),
                    fmt(row.ser_std).c_str());
      std::printf("best: %s\n", grid_point_tag(out.best).c_str());
      return 0;
    }

    if (*game_verify) {
      const auto rows = verify_battery();
      const std::string csv = verify_csv(rows);
      std::fputs(csv.c_str(), stdout);
      if (!verify_out.empty()) {
        std::filesystem::create_directories(verify_out);
        write_text_file((std::filesystem::path(verify_out) /
                         "game_verify.csv")
                            .string(),
                        csv);
      }
      int failed = 0;
      for (const auto& r : rows) failed += r.pass ? 0 : 1;
      std::fprintf(stderr, "%zu checks, %d failed\n", rows.size(), failed);
      return failed == 0 ? 0 : 1;
    }

    if (*gradcheck_cmd) {
      const auto rows = gradcheck_battery(gradcheck_seeds);
      const std::string csv = gradcheck_csv(rows);
      std::fputs(csv.c_str(), stdout);
      if (!gradcheck_out.empty()) {
        std::filesystem::create_directories(gradcheck_out);
        write_text_file((std::filesystem::path(gradcheck_out) /
                         "gradcheck.csv")
                            .string(),
                        csv);
      }
      int failed = 0;
      for (const auto& r : rows) failed += r.pass ? 0 : 1;
      std::fprintf(stderr, "%zu checks, %d failed\n", rows.size(), failed);
      return failed == 0 ? 0 : 1;
    }
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  return 0;
}
