#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mafenn/channel.hpp"
#include "mafenn/equalizer.hpp"

namespace mafenn {

// Seeded, resumable experiment runner: SNR sweeps with repeated trials and
// hyperparameter grids over the equalizer family.  Cells are independent
// jobs executed in parallel; every cell's seed is a pure function of the
// plan, so adding rows to a sweep never shifts the seeds of existing rows
// and identical plans reproduce identical tables.

enum class EqualizerKind { kMafenn, kMlp, kRls, kFeedforward, kSimpleLoop };

// CLI names: "mafenn", "mlp", "rls", "ff", "loop".
std::string equalizer_name(EqualizerKind k);
EqualizerKind parse_equalizer(const std::string& name);

enum class ChannelKind { kIdentity, kLinear, kNonlinear };

std::string channel_name(ChannelKind k);
ChannelKind parse_channel(const std::string& name);

// Channel configuration for one sweep point.  Identity is the single unit
// tap; linear and nonlinear share the 10-tap multipath response, the
// latter with the amplifier distortion enabled.
ChannelConfig channel_at(ChannelKind kind, double snr_db, std::uint64_t seed);

// {0, 4, 8, 12, 16, 20, 24, 28, 30} dB.
std::vector<double> default_snr_grid();

// One vertex of the hyperparameter grid.
struct GridPoint {
  int cycles = 5;
  int feed_window = 6;
  CombineMode combine = CombineMode::kConcat;
};

// Compact tag used inside run ids, e.g. "c5_k6_concat".
std::string grid_point_tag(const GridPoint& p);

struct ExperimentPlan {
  ChannelKind channel = ChannelKind::kNonlinear;
  std::vector<EqualizerKind> equalizers{EqualizerKind::kMafenn};
  std::vector<double> snr_grid = default_snr_grid();
  int trials = 3;
  std::uint64_t train_symbols = 100000;
  std::uint64_t val_symbols = 10000;
  std::uint64_t test_symbols = 100000;
  std::uint64_t base_seed = 1;
  // Architecture and training protocol shared by every neural cell; grid
  // points override cycles / feed window / combine mode per cell.
  EqualizerConfig model = desk_config();
  RlsConfig rls;
  // Hyperparameter grid as a cross product (grid_search only).
  std::vector<int> grid_cycles;
  std::vector<int> grid_feed_windows;
  std::vector<CombineMode> grid_combines;

  // Cross product in plan order: cycles outermost, combine innermost.
  std::vector<GridPoint> grid() const;
  void validate() const;
};

// Plan files are "key = value" text; model fields carry a "model." prefix
// and land on top of the desk defaults.  format/parse round-trip exactly.
std::string format_plan(const ExperimentPlan& plan);
ExperimentPlan parse_plan(const std::string& text);

struct SweepResult {
  std::string run_id;
  std::string equalizer;
  std::string channel;
  double snr_db = 0.0;
  int trial = 0;
  std::uint64_t seed = 0;
  double ser = 0.0;  // NaN marks a cell whose training failed
  std::uint64_t n_test = 0;
  std::uint64_t train_symbols = 0;
  double wall_s = 0.0;

  bool failed() const { return !(ser == ser); }
};

struct SummaryRow {
  std::string equalizer;
  std::string channel;
  double snr_db = 0.0;
  int n = 0;  // trials aggregated; failed cells are excluded
  double ser_mean = 0.0;
  double ser_std = 0.0;  // sample standard deviation, 0 when n < 2
};

// Derived cell seed: FNV-1a over "base/equalizer/snr/trial".
std::uint64_t trial_seed(std::uint64_t base_seed, const std::string& equalizer,
                         double snr_db, int trial);

struct SweepOutput {
  std::vector<SweepResult> rows;    // plan order
  std::vector<SummaryRow> summary;  // per (equalizer, snr), plan order
};

// Executes every (equalizer, snr, trial) cell at its derived seed and
// aggregates mean / sample std per point.  When `results_csv` is given,
// rows already present there are reused instead of re-run (resume), every
// finished cell is appended immediately, and the file is rewritten in
// canonical plan order at the end.  A cell whose training throws is
// recorded as a failed row (SER = NaN) and the sweep continues.
SweepOutput run_sweep(const ExperimentPlan& plan,
                      const std::string& results_csv = "");

struct GridSummary {
  GridPoint point;
  int n = 0;
  double ser_mean = 0.0;
  double ser_std = 0.0;
};

// Smallest mean; ties break toward smaller cycles, then smaller feed
// window, then earlier table position.  Throws on an empty table.
GridPoint pick_best_grid_point(const std::vector<GridSummary>& table);

struct GridOutcome {
  std::vector<SweepResult> rows;   // plan order
  std::vector<GridSummary> table;  // one row per grid point
  GridPoint best;
};

// Exhaustive evaluation of the plan's hyperparameter grid.  Grid cells
// score on a held-out validation stream (val_symbols) so the test stream
// stays untouched by model selection; seeds depend only on (equalizer,
// snr, trial), so every grid point sees identical data.  Requires the
// equalizer list to be exactly {mafenn} and a non-empty grid.
GridOutcome grid_search(const ExperimentPlan& plan,
                        const std::string& results_csv = "");

// Results CSV.  Columns, in order:
//   run_id, equalizer, channel, snr_db, trial, seed, ser, n_test,
//   train_symbols, wall_s
std::string results_header();
void emit_results(const std::vector<SweepResult>& rows,
                  const std::string& path);
std::vector<SweepResult> parse_results(const std::string& path);

// One curve file per equalizer, "curve_<name>.csv", rows
// (snr_db, ser_mean, ser_std) sorted ascending in snr_db.  Returns the
// paths written.
std::vector<std::string> emit_plotdata(const std::vector<SummaryRow>& summary,
                                       const std::string& dir);

// Mean and sample standard deviation (n-1 denominator; std 0 when n < 2).
std::pair<double, double> mean_std(const std::vector<double>& v);

}  // namespace mafenn
