#include "mafenn/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "mafenn/kv.hpp"
#include "mafenn/rng.hpp"

namespace mafenn {
namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Readable form for run ids and file names.
std::string fmt_short(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string combine_name(CombineMode m) {
  return m == CombineMode::kConcat ? "concat" : "replace";
}

CombineMode parse_combine(const std::string& v) {
  if (v == "concat") return CombineMode::kConcat;
  if (v == "replace") return CombineMode::kReplace;
  throw std::invalid_argument("plan: bad combine mode: " + v);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(line);
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

}  // namespace

std::string equalizer_name(EqualizerKind k) {
  switch (k) {
    case EqualizerKind::kMafenn: return "mafenn";
    case EqualizerKind::kMlp: return "mlp";
    case EqualizerKind::kRls: return "rls";
    case EqualizerKind::kFeedforward: return "ff";
    case EqualizerKind::kSimpleLoop: return "loop";
  }
  throw std::logic_error("equalizer_name: bad kind");
}

EqualizerKind parse_equalizer(const std::string& name) {
  if (name == "mafenn") return EqualizerKind::kMafenn;
  if (name == "mlp") return EqualizerKind::kMlp;
  if (name == "rls") return EqualizerKind::kRls;
  if (name == "ff") return EqualizerKind::kFeedforward;
  if (name == "loop") return EqualizerKind::kSimpleLoop;
  throw std::invalid_argument("unknown equalizer: " + name);
}

std::string channel_name(ChannelKind k) {
  switch (k) {
    case ChannelKind::kIdentity: return "identity";
    case ChannelKind::kLinear: return "linear";
    case ChannelKind::kNonlinear: return "nonlinear";
  }
  throw std::logic_error("channel_name: bad kind");
}

ChannelKind parse_channel(const std::string& name) {
  if (name == "identity") return ChannelKind::kIdentity;
  if (name == "linear") return ChannelKind::kLinear;
  if (name == "nonlinear") return ChannelKind::kNonlinear;
  throw std::invalid_argument("unknown channel: " + name);
}

ChannelConfig channel_at(ChannelKind kind, double snr_db, std::uint64_t seed) {
  ChannelConfig cfg;
  cfg.taps = kind == ChannelKind::kIdentity ? ChannelTaps::identity()
                                            : ChannelTaps::multipath10();
  cfg.nonlinear = kind == ChannelKind::kNonlinear;
  cfg.snr_db = snr_db;
  cfg.seed = seed;
  return cfg;
}

std::vector<double> default_snr_grid() {
  return {0.0, 4.0, 8.0, 12.0, 16.0, 20.0, 24.0, 28.0, 30.0};
}

std::string grid_point_tag(const GridPoint& p) {
  return "c" + std::to_string(p.cycles) + "_k" + std::to_string(p.feed_window) +
         "_" + combine_name(p.combine);
}

std::vector<GridPoint> ExperimentPlan::grid() const {
  std::vector<GridPoint> out;
  for (int c : grid_cycles)
    for (int k : grid_feed_windows)
      for (CombineMode m : grid_combines) out.push_back({c, k, m});
  return out;
}

void ExperimentPlan::validate() const {
  if (equalizers.empty()) throw std::invalid_argument("plan: no equalizers");
  if (snr_grid.empty()) throw std::invalid_argument("plan: empty snr grid");
  if (trials < 1) throw std::invalid_argument("plan: trials must be >= 1");
  if (train_symbols < 1 || test_symbols < 1 || val_symbols < 1)
    throw std::invalid_argument("plan: symbol counts must be >= 1");
  model.validate();
}

std::string format_plan(const ExperimentPlan& plan) {
  std::string s;
  s += "channel = " + channel_name(plan.channel) + "\n";
  std::string eqs;
  for (const auto k : plan.equalizers) {
    if (!eqs.empty()) eqs += ", ";
    eqs += equalizer_name(k);
  }
  s += "equalizers = " + eqs + "\n";
  std::string snrs;
  for (double v : plan.snr_grid) {
    if (!snrs.empty()) snrs += ", ";
    snrs += fmt_double(v);
  }
  s += "snr_grid = " + snrs + "\n";
  s += "trials = " + std::to_string(plan.trials) + "\n";
  s += "train_symbols = " + std::to_string(plan.train_symbols) + "\n";
  s += "val_symbols = " + std::to_string(plan.val_symbols) + "\n";
  s += "test_symbols = " + std::to_string(plan.test_symbols) + "\n";
  s += "base_seed = " + std::to_string(plan.base_seed) + "\n";
  if (!plan.grid_cycles.empty()) {
    std::string v;
    for (int c : plan.grid_cycles) {
      if (!v.empty()) v += ", ";
      v += std::to_string(c);
    }
    s += "grid_cycles = " + v + "\n";
  }
  if (!plan.grid_feed_windows.empty()) {
    std::string v;
    for (int k : plan.grid_feed_windows) {
      if (!v.empty()) v += ", ";
      v += std::to_string(k);
    }
    s += "grid_feed_windows = " + v + "\n";
  }
  if (!plan.grid_combines.empty()) {
    std::string v;
    for (CombineMode m : plan.grid_combines) {
      if (!v.empty()) v += ", ";
      v += combine_name(m);
    }
    s += "grid_combines = " + v + "\n";
  }
  s += "rls_taps = " + std::to_string(plan.rls.n_taps) + "\n";
  s += "rls_forget = " + fmt_double(plan.rls.forget) + "\n";
  s += "rls_delta = " + fmt_double(plan.rls.delta) + "\n";
  s += "rls_preamble = " + std::to_string(plan.rls.preamble) + "\n";
  std::istringstream model_text(format_config(plan.model));
  std::string line;
  while (std::getline(model_text, line)) s += "model." + line + "\n";
  return s;
}

ExperimentPlan parse_plan(const std::string& text) {
  ExperimentPlan plan;
  plan.equalizers.clear();
  plan.snr_grid.clear();
  std::string model_overrides;
  bool have_equalizers = false, have_snr = false;
  for (const auto& [key, v] : parse_kv_text(text)) {
    if (key.rfind("model.", 0) == 0) {
      model_overrides += key.substr(6) + " = " + v + "\n";
    } else if (key == "channel") {
      plan.channel = parse_channel(v);
    } else if (key == "equalizers") {
      have_equalizers = true;
      for (const auto& item : kv_split_list(v))
        plan.equalizers.push_back(parse_equalizer(item));
    } else if (key == "snr_grid") {
      have_snr = true;
      for (const auto& item : kv_split_list(v))
        plan.snr_grid.push_back(std::stod(item));
    } else if (key == "trials") {
      plan.trials = std::stoi(v);
    } else if (key == "train_symbols") {
      plan.train_symbols = std::stoull(v);
    } else if (key == "val_symbols") {
      plan.val_symbols = std::stoull(v);
    } else if (key == "test_symbols") {
      plan.test_symbols = std::stoull(v);
    } else if (key == "base_seed") {
      plan.base_seed = std::stoull(v);
    } else if (key == "grid_cycles") {
      for (const auto& item : kv_split_list(v))
        plan.grid_cycles.push_back(std::stoi(item));
    } else if (key == "grid_feed_windows") {
      for (const auto& item : kv_split_list(v))
        plan.grid_feed_windows.push_back(std::stoi(item));
    } else if (key == "grid_combines") {
      for (const auto& item : kv_split_list(v))
        plan.grid_combines.push_back(parse_combine(item));
    } else if (key == "rls_taps") {
      plan.rls.n_taps = std::stoi(v);
    } else if (key == "rls_forget") {
      plan.rls.forget = std::stod(v);
    } else if (key == "rls_delta") {
      plan.rls.delta = std::stod(v);
    } else if (key == "rls_preamble") {
      plan.rls.preamble = std::stoi(v);
    } else {
      throw std::invalid_argument("plan: unknown key: " + key);
    }
  }
  if (!have_equalizers) plan.equalizers = {EqualizerKind::kMafenn};
  if (!have_snr) plan.snr_grid = default_snr_grid();
  plan.model = parse_config(format_config(desk_config()) + model_overrides);
  plan.validate();
  return plan;
}

std::uint64_t trial_seed(std::uint64_t base_seed, const std::string& equalizer,
                         double snr_db, int trial) {
  return fnv1a(std::to_string(base_seed) + "/" + equalizer + "/" +
               fmt_double(snr_db) + "/" + std::to_string(trial));
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty())
    return {std::numeric_limits<double>::quiet_NaN(), 0.0};
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

namespace {

// One executable unit of a sweep or grid run.
struct CellSpec {
  EqualizerKind eq = EqualizerKind::kMafenn;
  double snr_db = 0.0;
  int trial = 0;
  int grid_index = -1;  // -1: plain sweep cell
};

std::string cell_run_id(const ExperimentPlan& plan, const CellSpec& cell) {
  std::string id = equalizer_name(cell.eq);
  if (cell.grid_index >= 0)
    id += ":" + grid_point_tag(plan.grid()[cell.grid_index]);
  id += "/" + channel_name(plan.channel) + "/snr" + fmt_short(cell.snr_db) +
        "/t" + std::to_string(cell.trial);
  return id;
}

double train_and_score(const ExperimentPlan& plan, const CellSpec& cell,
                       const TransmissionRecord& train,
                       const TransmissionRecord& eval_rec,
                       std::uint64_t model_seed) {
  switch (cell.eq) {
    case EqualizerKind::kMafenn: {
      EqualizerConfig cfg = plan.model;
      if (cell.grid_index >= 0) {
        const GridPoint gp = plan.grid()[cell.grid_index];
        cfg.cycles = gp.cycles;
        cfg.feed_window = gp.feed_window;
        cfg.combine = gp.combine;
      }
      MafennModel model(cfg, model_seed);
      fit_mafenn(model, train);
      return evaluate_ser(model, eval_rec);
    }
    case EqualizerKind::kFeedforward: {
      MafennModel model(feedforward_config(plan.model), model_seed);
      fit_mafenn(model, train);
      return evaluate_ser(model, eval_rec);
    }
    case EqualizerKind::kSimpleLoop: {
      MafennModel model(simple_loop_config(plan.model), model_seed);
      fit_mafenn(model, train);
      return evaluate_ser(model, eval_rec);
    }
    case EqualizerKind::kMlp: {
      MlpModel model(plan.model, model_seed);
      fit_mlp(model, train);
      return evaluate_ser(model, eval_rec);
    }
    case EqualizerKind::kRls: {
      RlsEqualizer rls(plan.rls);
      fit_rls(rls, train);
      return evaluate_ser(rls, eval_rec);
    }
  }
  throw std::logic_error("train_and_score: bad equalizer kind");
}

SweepResult execute_cell(const ExperimentPlan& plan, const CellSpec& cell,
                         bool eval_on_validation) {
  SweepResult row;
  row.run_id = cell_run_id(plan, cell);
  row.equalizer = equalizer_name(cell.eq);
  row.channel = channel_name(plan.channel);
  row.snr_db = cell.snr_db;
  row.trial = cell.trial;
  row.seed = trial_seed(plan.base_seed, row.equalizer, cell.snr_db, cell.trial);
  row.train_symbols = plan.train_symbols;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const TransmissionRecord train = transmit(
        channel_at(plan.channel, cell.snr_db, derive_seed(row.seed, "train")),
        plan.train_symbols);
    const std::uint64_t n_eval =
        eval_on_validation ? plan.val_symbols : plan.test_symbols;
    const TransmissionRecord eval_rec = transmit(
        channel_at(plan.channel, cell.snr_db,
                   derive_seed(row.seed, eval_on_validation ? "val" : "test")),
        n_eval);
    row.ser = train_and_score(plan, cell, train, eval_rec,
                              derive_seed(row.seed, "model"));
    row.n_test = n_eval;
  } catch (const std::exception&) {
    row.ser = std::numeric_limits<double>::quiet_NaN();
    row.n_test = 0;
  }
  row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                             t0)
                   .count();
  return row;
}

std::string format_row(const SweepResult& r) {
  std::string s;
  s += r.run_id + "," + r.equalizer + "," + r.channel + ",";
  s += fmt_double(r.snr_db) + "," + std::to_string(r.trial) + ",";
  s += std::to_string(r.seed) + "," + fmt_double(r.ser) + ",";
  s += std::to_string(r.n_test) + "," + std::to_string(r.train_symbols) + ",";
  s += fmt_double(r.wall_s);
  return s;
}

// Runs every cell not already present in the resume table, appending each
// finished row to `csv_path` as it lands; the caller canonicalizes the
// file afterwards.  Cells are independent, so they are farmed out to a
// parallel loop with a single-writer append discipline.
std::vector<SweepResult> execute_cells(const ExperimentPlan& plan,
                                       const std::vector<CellSpec>& cells,
                                       bool eval_on_validation,
                                       const std::string& csv_path) {
  std::vector<SweepResult> rows(cells.size());
  std::map<std::string, SweepResult> done;
  if (!csv_path.empty() && std::filesystem::exists(csv_path))
    for (auto& row : parse_results(csv_path)) done[row.run_id] = row;

  std::vector<int> pending;
  for (int i = 0; i < static_cast<int>(cells.size()); ++i) {
    const std::string id = cell_run_id(plan, cells[i]);
    const auto hit = done.find(id);
    if (hit == done.end()) {
      pending.push_back(i);
      continue;
    }
    const std::uint64_t expect = trial_seed(
        plan.base_seed, equalizer_name(cells[i].eq), cells[i].snr_db,
        cells[i].trial);
    if (hit->second.seed != expect ||
        hit->second.train_symbols != plan.train_symbols)
      throw std::runtime_error(csv_path +
                               ": existing row " + id +
                               " does not match the plan; refusing to resume");
    rows[i] = hit->second;
  }

  std::ofstream append;
  if (!csv_path.empty()) {
    const bool fresh = !std::filesystem::exists(csv_path);
    append.open(csv_path, std::ios::app);
    if (!append)
      throw std::runtime_error(csv_path + ": cannot open results file");
    if (fresh) append << results_header() << "\n" << std::flush;
  }

#pragma omp parallel for schedule(dynamic)
  for (int j = 0; j < static_cast<int>(pending.size()); ++j) {
    const int i = pending[j];
    const SweepResult row = execute_cell(plan, cells[i], eval_on_validation);
#pragma omp critical(mafenn_sweep_append)
    {
      rows[i] = row;
      if (append.is_open()) append << format_row(row) << "\n" << std::flush;
    }
  }
  if (append.is_open() && !append)
    throw std::runtime_error(csv_path + ": write failed");
  return rows;
}

}  // namespace

SweepOutput run_sweep(const ExperimentPlan& plan,
                      const std::string& results_csv) {
  plan.validate();
  std::vector<CellSpec> cells;
  for (const auto eq : plan.equalizers)
    for (double snr : plan.snr_grid)
      for (int t = 0; t < plan.trials; ++t)
        cells.push_back({eq, snr, t, -1});

  SweepOutput out;
  out.rows = execute_cells(plan, cells, false, results_csv);
  if (!results_csv.empty()) emit_results(out.rows, results_csv);

  std::size_t at = 0;
  for (const auto eq : plan.equalizers)
    for (double snr : plan.snr_grid) {
      std::vector<double> sers;
      for (int t = 0; t < plan.trials; ++t, ++at)
        if (!out.rows[at].failed()) sers.push_back(out.rows[at].ser);
      SummaryRow s;
      s.equalizer = equalizer_name(eq);
      s.channel = channel_name(plan.channel);
      s.snr_db = snr;
      s.n = static_cast<int>(sers.size());
      std::tie(s.ser_mean, s.ser_std) = mean_std(sers);
      out.summary.push_back(s);
    }
  return out;
}

GridPoint pick_best_grid_point(const std::vector<GridSummary>& table) {
  if (table.empty())
    throw std::invalid_argument("pick_best_grid_point: empty table");
  const GridSummary* best = nullptr;
  for (const auto& row : table) {
    if (row.n == 0) continue;  // every trial failed; nothing to rank
    if (best == nullptr || row.ser_mean < best->ser_mean ||
        (row.ser_mean == best->ser_mean &&
         (row.point.cycles < best->point.cycles ||
          (row.point.cycles == best->point.cycles &&
           row.point.feed_window < best->point.feed_window))))
      best = &row;
  }
  if (best == nullptr)
    throw std::runtime_error("pick_best_grid_point: all grid cells failed");
  return best->point;
}

GridOutcome grid_search(const ExperimentPlan& plan,
                        const std::string& results_csv) {
  plan.validate();
  if (plan.equalizers.size() != 1 ||
      plan.equalizers[0] != EqualizerKind::kMafenn)
    throw std::invalid_argument(
        "grid_search: the equalizer list must be exactly {mafenn}");
  const std::vector<GridPoint> grid = plan.grid();
  if (grid.empty())
    throw std::invalid_argument("grid_search: empty hyperparameter grid");

  std::vector<CellSpec> cells;
  for (int g = 0; g < static_cast<int>(grid.size()); ++g)
    for (double snr : plan.snr_grid)
      for (int t = 0; t < plan.trials; ++t)
        cells.push_back({EqualizerKind::kMafenn, snr, t, g});

  GridOutcome out;
  out.rows = execute_cells(plan, cells, true, results_csv);
  if (!results_csv.empty()) emit_results(out.rows, results_csv);

  std::size_t at = 0;
  for (int g = 0; g < static_cast<int>(grid.size()); ++g) {
    std::vector<double> sers;
    for (std::size_t k = 0; k < plan.snr_grid.size(); ++k)
      for (int t = 0; t < plan.trials; ++t, ++at)
        if (!out.rows[at].failed()) sers.push_back(out.rows[at].ser);
    GridSummary s;
    s.point = grid[g];
    s.n = static_cast<int>(sers.size());
    std::tie(s.ser_mean, s.ser_std) = mean_std(sers);
    out.table.push_back(s);
  }
  out.best = pick_best_grid_point(out.table);
  return out;
}

std::string results_header() {
  return "run_id,equalizer,channel,snr_db,trial,seed,ser,n_test,"
         "train_symbols,wall_s";
}

void emit_results(const std::vector<SweepResult>& rows,
                  const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << results_header() << "\n";
  for (const auto& r : rows) out << format_row(r) << "\n";
  if (!out) throw std::runtime_error(path + ": write failed");
}

std::vector<SweepResult> parse_results(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) || kv_trim(line) != results_header())
    throw std::runtime_error(path + ": not a results file");
  std::vector<SweepResult> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (kv_trim(line).empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != 10)
      throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                               ": expected 10 fields");
    SweepResult r;
    r.run_id = f[0];
    r.equalizer = f[1];
    r.channel = f[2];
    r.snr_db = std::stod(f[3]);
    r.trial = std::stoi(f[4]);
    r.seed = std::stoull(f[5]);
    r.ser = std::stod(f[6]);
    r.n_test = std::stoull(f[7]);
    r.train_symbols = std::stoull(f[8]);
    r.wall_s = std::stod(f[9]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<std::string> emit_plotdata(const std::vector<SummaryRow>& summary,
                                       const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;  // first-appearance order
  for (const auto& row : summary)
    if (std::find(names.begin(), names.end(), row.equalizer) == names.end())
      names.push_back(row.equalizer);

  std::vector<std::string> paths;
  for (const auto& name : names) {
    std::vector<const SummaryRow*> curve;
    for (const auto& row : summary)
      if (row.equalizer == name) curve.push_back(&row);
    std::stable_sort(curve.begin(), curve.end(),
                     [](const SummaryRow* a, const SummaryRow* b) {
                       return a->snr_db < b->snr_db;
                     });
    const std::string path =
        (std::filesystem::path(dir) / ("curve_" + name + ".csv")).string();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error(path + ": cannot write");
    out << "snr_db,ser_mean,ser_std\n";
    for (const auto* row : curve)
      out << fmt_double(row->snr_db) << "," << fmt_double(row->ser_mean) << ","
          << fmt_double(row->ser_std) << "\n";
    if (!out) throw std::runtime_error(path + ": write failed");
    paths.push_back(path);
  }
  return paths;
}

}  // namespace mafenn
