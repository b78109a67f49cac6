// Acceptance gate: one binary, ten checks, one PASS/FAIL line each.
//
//   acceptance fast    -- checks 1-6 and 10 (minutes)
//   acceptance trend   -- checks 7-9 (desk-scale sweeps; about an hour cold)
//   acceptance all     -- everything (default)
//
// Trend checks cache their sweep cells as CSV files under --out so a rerun
// (or a later check sharing a cell) only pays for what is missing.  The
// exit status is the number of failed checks.

#include <mafenn/channel.hpp>
#include <mafenn/equalizer.hpp>
#include <mafenn/game.hpp>
#include <mafenn/gradcheck.hpp>
#include <mafenn/harness.hpp>
#include <mafenn/rng.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <limits>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace mafenn;

namespace {

struct CheckResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double wall_s = 0.0;

  CheckResult(int i, std::string n) : id(i), name(std::move(n)) {}
};

double now_s() {
  using clk = std::chrono::steady_clock;
  return std::chrono::duration<double>(clk::now().time_since_epoch()).count();
}

std::string fmt(const char* f, ...) {
  va_list ap;
  va_start(ap, f);
  char buf[512];
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// ---- checks 1-5: differentiation and game dynamics ----

CheckResult check_gradients() {
  CheckResult r{1, "layer and loss gradients"};
  const double t0 = now_s();
  const auto rows = gradcheck_battery(20);
  r.wall_s = now_s() - t0;
  double worst_ratio = 0.0;
  int fails = 0;
  for (const auto& row : rows) {
    worst_ratio = std::max(worst_ratio, row.rel_err / row.tol);
    fails += row.pass ? 0 : 1;
  }
  r.pass = fails == 0 && r.wall_s < 60.0;
  r.detail = fmt("%zu checks over 20 seeds, %d failed, worst err/tol %.2e",
                 rows.size(), fails, worst_ratio);
  return r;
}

CheckResult check_dynamics() {
  CheckResult r{2, "dynamics reach the closed-form equilibrium"};
  const double t0 = now_s();
  const auto ref = make_reference_game();
  const DynamicsTrace tr = run_dynamics(*ref, JointPoint(0, 0, 0),
                                        LearnRates(0.02, 0.05, 0.1), 10000,
                                        1e-10);
  r.wall_s = now_s() - t0;
  const double dist =
      (tr.final_point().flat() - reference_game_equilibrium().flat()).norm();
  const bool classified = tr.terminus.cls == DfseClass::kDfse;
  r.pass = tr.converged && dist < 1e-6 && classified &&
           tr.omega_norms.back() < 1e-10 && r.wall_s < 10.0;
  r.detail = fmt("|x - x*| %.2e in %zu iters, |w| %.2e, classified %s", dist,
                 tr.iterates.size() - 1, tr.omega_norms.back(),
                 classified ? "equilibrium" : "NOT equilibrium");
  return r;
}

CheckResult check_implicit() {
  CheckResult r{3, "implicit response derivatives vs nested oracle"};
  const double t0 = now_s();
  auto worst_of = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    double w = 0.0;
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < a.cols(); ++j)
        w = std::max(w, std::abs(a(i, j) - b(i, j)) /
                            std::max(1e-8,
                                     std::abs(a(i, j)) + std::abs(b(i, j))));
    return w;
  };
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto game = make_random_pd_quadratic(seed);
    CounterRng rng{derive_seed(seed, "acceptance-probe")};
    const auto d = game->dims();
    JointPoint p;
    p.x1 = Eigen::VectorXd::NullaryExpr(d[0],
                                        [&](Eigen::Index) {
                                          return 4.0 * rng.uniform() - 2.0;
                                        });
    p.x2 = Eigen::VectorXd::NullaryExpr(d[1],
                                        [&](Eigen::Index) {
                                          return 4.0 * rng.uniform() - 2.0;
                                        });
    p.x3 = Eigen::VectorXd::NullaryExpr(d[2],
                                        [&](Eigen::Index) {
                                          return 4.0 * rng.uniform() - 2.0;
                                        });
    const ImplicitJacobians exact = implicit_jacobians(*game, p);
    const ImplicitJacobians oracle = response_fd_oracle(*game, p);
    worst = std::max({worst, worst_of(exact.d1h, oracle.d1h),
                      worst_of(exact.d2h, oracle.d2h),
                      worst_of(exact.d1r, oracle.d1r)});
  }
  r.wall_s = now_s() - t0;
  r.pass = worst < 1e-5 && r.wall_s < 60.0;
  r.detail = fmt("50 random convex games, worst rel err %.2e (tol 1e-05)",
                 worst);
  return r;
}

// Checks 4 and 5 are rows of the verification battery (the same code the
// game-verify command prints); pull the named rows and report them.
std::vector<VerifyRow> battery_rows(const std::string& name,
                                    const std::vector<VerifyRow>& all) {
  std::vector<VerifyRow> out;
  for (const auto& row : all)
    if (row.check_name == name) out.push_back(row);
  return out;
}

CheckResult check_diffeo(const std::vector<VerifyRow>& battery,
                         double battery_wall) {
  CheckResult r{4, "update map stays a local diffeomorphism"};
  r.wall_s = battery_wall;
  const auto safe = battery_rows("spectral-safe", battery);
  const auto unsafe_ = battery_rows("spectral-unsafe", battery);
  const auto det = battery_rows("diffeo-det", battery);
  if (safe.size() != 1 || unsafe_.size() != 1 || det.size() != 1) {
    r.detail = "battery rows missing";
    return r;
  }
  r.pass = safe[0].pass && unsafe_[0].pass && det[0].pass &&
           battery_wall < 60.0;
  r.detail = fmt("100 points: rho %.3f at rate 0.5/L, rho %.1f at 1e3/L "
                 "(flagged), min |det| %.2e",
                 safe[0].value, unsafe_[0].value, det[0].value);
  return r;
}

CheckResult check_saddle(const std::vector<VerifyRow>& battery,
                         double battery_wall) {
  CheckResult r{5, "saddle avoidance"};
  r.wall_s = battery_wall;
  const auto rows = battery_rows("saddle-avoidance", battery);
  if (rows.size() != 1) {
    r.detail = "battery row missing";
    return r;
  }
  r.pass = rows[0].pass && battery_wall < 60.0;
  r.detail = fmt("%.0f of 100 inits ended >= 0.1 from the saddle",
                 100.0 * rows[0].value);
  return r;
}

// ---- checks 6-10: equalizer laboratory ----

double mean_ser(const SweepOutput& out, EqualizerKind eq, double snr) {
  for (const auto& s : out.summary)
    if (s.equalizer == equalizer_name(eq) && s.snr_db == snr)
      return s.ser_mean;
  return std::nan("");
}

int failed_cells(const SweepOutput& out) {
  int n = 0;
  for (const auto& row : out.rows) n += row.failed() ? 1 : 0;
  return n;
}

void stash_plan(const ExperimentPlan& plan, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  f << format_plan(plan);
}

CheckResult check_identity_zero(const std::string& out_dir) {
  CheckResult r{6, "noise-free identity channel is solved exactly"};
  const double t0 = now_s();
  ExperimentPlan plan;
  plan.channel = ChannelKind::kIdentity;
  plan.equalizers = {EqualizerKind::kMafenn, EqualizerKind::kRls};
  plan.snr_grid = {std::numeric_limits<double>::infinity()};
  plan.trials = 1;
  plan.train_symbols = 20000;
  plan.val_symbols = 1000;
  plan.test_symbols = 10000;
  plan.base_seed = 1;
  stash_plan(plan, out_dir + "/identity.plan");
  const SweepOutput out = run_sweep(plan, out_dir + "/identity.csv");
  r.wall_s = now_s() - t0;
  const double inf = std::numeric_limits<double>::infinity();
  const double m = mean_ser(out, EqualizerKind::kMafenn, inf);
  const double rls = mean_ser(out, EqualizerKind::kRls, inf);
  r.pass = failed_cells(out) == 0 && m == 0.0 && rls == 0.0 &&
           r.wall_s < 300.0;
  r.detail = fmt("network ser %.3g, adaptive-filter ser %.3g over 10^4 "
                 "symbols", m, rls);
  return r;
}

ExperimentPlan trend_base() {
  ExperimentPlan plan;
  plan.channel = ChannelKind::kNonlinear;
  plan.equalizers = {EqualizerKind::kMafenn};
  plan.snr_grid = {20.0};
  plan.trials = 3;
  plan.train_symbols = 100000;
  plan.val_symbols = 1000;
  plan.test_symbols = 100000;
  plan.base_seed = 1;
  return plan;
}

SweepOutput run_cached(ExperimentPlan plan, const std::string& out_dir,
                       const std::string& tag) {
  stash_plan(plan, out_dir + "/" + tag + ".plan");
  return run_sweep(plan, out_dir + "/" + tag + ".csv");
}

CheckResult check_cycles_trend(const std::string& out_dir) {
  CheckResult r{7, "refinement cycles improve the nonlinear channel"};
  const double t0 = now_s();
  ExperimentPlan c0 = trend_base();
  c0.model.cycles = 0;
  ExperimentPlan c1 = trend_base();
  c1.model.cycles = 1;
  const ExperimentPlan c5 = trend_base();
  const SweepOutput o0 = run_cached(c0, out_dir, "cycles0");
  const SweepOutput o1 = run_cached(c1, out_dir, "cycles1");
  const SweepOutput o5 = run_cached(c5, out_dir, "cycles5");
  r.wall_s = now_s() - t0;
  const double m0 = mean_ser(o0, EqualizerKind::kMafenn, 20.0);
  const double m1 = mean_ser(o1, EqualizerKind::kMafenn, 20.0);
  const double m5 = mean_ser(o5, EqualizerKind::kMafenn, 20.0);
  const int bad = failed_cells(o0) + failed_cells(o1) + failed_cells(o5);
  const bool link51 = m5 <= m1, link10 = m1 <= m0, strict50 = m5 < m0;
  r.pass = bad == 0 && link51 && link10 && strict50 && r.wall_s < 3600.0;
  r.detail = fmt("mean ser: 5cy %.6f, 1cy %.6f, 0cy %.6f (3 seeds, 20 dB); "
                 "5<=1 %s, 1<=0 %s, 5<0 %s", m5, m1, m0,
                 link51 ? "ok" : "violated", link10 ? "ok" : "violated",
                 strict50 ? "ok" : "violated");
  if (bad) r.detail += fmt("; %d cells failed", bad);
  return r;
}

CheckResult check_combine_trend(const std::string& out_dir) {
  CheckResult r{8, "concatenated history beats replacement"};
  const double t0 = now_s();
  const ExperimentPlan concat = trend_base();
  ExperimentPlan replace = trend_base();
  replace.model.combine = CombineMode::kReplace;
  const SweepOutput oc = run_cached(concat, out_dir, "cycles5");
  const SweepOutput orp = run_cached(replace, out_dir, "replace");
  r.wall_s = now_s() - t0;
  const double mc = mean_ser(oc, EqualizerKind::kMafenn, 20.0);
  const double mr = mean_ser(orp, EqualizerKind::kMafenn, 20.0);
  const int bad = failed_cells(oc) + failed_cells(orp);
  r.pass = bad == 0 && mc <= mr && r.wall_s < 3600.0;
  r.detail = fmt("mean ser: concat %.6f vs replace %.6f (3 seeds, 20 dB)",
                 mc, mr);
  if (bad) r.detail += fmt("; %d cells failed", bad);
  return r;
}

CheckResult check_baselines(const std::string& out_dir) {
  CheckResult r{9, "feedback network beats both baselines"};
  const double t0 = now_s();
  const ExperimentPlan net = trend_base();
  ExperimentPlan base = trend_base();
  base.equalizers = {EqualizerKind::kMlp, EqualizerKind::kRls};
  const SweepOutput on = run_cached(net, out_dir, "cycles5");
  const SweepOutput ob = run_cached(base, out_dir, "baselines");
  r.wall_s = now_s() - t0;
  const double mn = mean_ser(on, EqualizerKind::kMafenn, 20.0);
  const double mm = mean_ser(ob, EqualizerKind::kMlp, 20.0);
  const double mr = mean_ser(ob, EqualizerKind::kRls, 20.0);
  const int bad = failed_cells(on) + failed_cells(ob);
  r.pass = bad == 0 && mn <= mm && mn <= mr && r.wall_s < 3600.0;
  r.detail = fmt("mean ser: network %.6f vs mlp %.6f, rls %.6f "
                 "(3 seeds, 20 dB)", mn, mm, mr);
  if (bad) r.detail += fmt("; %d cells failed", bad);
  return r;
}

CheckResult check_determinism() {
  CheckResult r{10, "sweeps are bitwise reproducible"};
  const double t0 = now_s();
  ExperimentPlan plan;
  plan.channel = ChannelKind::kNonlinear;
  plan.equalizers = {EqualizerKind::kMafenn, EqualizerKind::kRls};
  plan.snr_grid = {20.0};
  plan.trials = 1;
  plan.train_symbols = 10000;
  plan.val_symbols = 1000;
  plan.test_symbols = 10000;
  plan.base_seed = 99;
  plan.model.cycles = 1;
  const SweepOutput a = run_sweep(plan);
  const SweepOutput b = run_sweep(plan);
  r.wall_s = now_s() - t0;
  bool equal = a.rows.size() == b.rows.size();
  double worst = 0.0;
  for (std::size_t i = 0; equal && i < a.rows.size(); ++i) {
    equal = a.rows[i].run_id == b.rows[i].run_id &&
            std::memcmp(&a.rows[i].ser, &b.rows[i].ser, sizeof(double)) == 0 &&
            a.rows[i].n_test == b.rows[i].n_test;
    worst = std::max(worst, std::abs(a.rows[i].ser - b.rows[i].ser));
  }
  r.pass = equal && failed_cells(a) == 0;
  r.detail = fmt("%zu cells run twice, %s (max |delta| %g)", a.rows.size(),
                 equal ? "bitwise equal" : "MISMATCH", worst);
  return r;
}

void print_result(const CheckResult& r) {
  std::printf("%s  %2d  %-52s %s  [%.1f s]\n", r.pass ? "PASS" : "FAIL",
              r.id, r.name.c_str(), r.detail.c_str(), r.wall_s);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  std::string mode = "all";
  std::string out_dir = "acceptance_runs";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "fast" || a == "trend" || a == "all") {
      mode = a;
    } else if (a == "--out" && i + 1 < argc) {
      out_dir = argv[++i];
    } else {
      std::fprintf(stderr,
                   "usage: acceptance [fast|trend|all] [--out DIR]\n");
      return 2;
    }
  }
  std::filesystem::create_directories(out_dir);

  std::vector<CheckResult> results;
  auto run = [&](CheckResult r) {
    print_result(r);
    results.push_back(std::move(r));
  };

  try {
    if (mode != "trend") {
      run(check_gradients());
      run(check_dynamics());
      run(check_implicit());
      const double t0 = now_s();
      const auto battery = verify_battery();
      const double battery_wall = now_s() - t0;
      run(check_diffeo(battery, battery_wall));
      run(check_saddle(battery, battery_wall));
      run(check_identity_zero(out_dir));
    }
    if (mode != "fast") {
      run(check_cycles_trend(out_dir));
      run(check_combine_trend(out_dir));
      run(check_baselines(out_dir));
    }
    if (mode != "trend") {
      run(check_determinism());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  int fails = 0;
  for (const auto& r : results) fails += r.pass ? 0 : 1;
  std::printf("%zu checks, %d failed\n", results.size(), fails);
  return fails;
}
