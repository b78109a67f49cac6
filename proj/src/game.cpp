#include "mafenn/game.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mafenn/rng.hpp"

namespace mafenn {

namespace {

constexpr double kCondLimit = 1e12;
constexpr double kManifoldStep = 1e-5;   // probe step for curvature/Jacobian
constexpr double kPdTol = 1e-8;          // positive-definiteness margin
constexpr double kDivergenceRadius = 1e9;

// Column-pivoted solve of A X = B with an explicit singularity report.
Eigen::MatrixXd solve_checked(const Eigen::MatrixXd& a,
                              const Eigen::MatrixXd& b, const char* what) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  const double cond = smin > 0.0 ? smax / smin
                                 : std::numeric_limits<double>::infinity();
  if (!(cond < kCondLimit))
    throw SingularHessianError(std::string(what) +
                                   ": near-singular block, condition number " +
                                   std::to_string(cond),
                               cond);
  return a.colPivHouseholderQr().solve(b);
}

}  // namespace

JointPoint::JointPoint(double a, double b, double c)
    : x1(Eigen::VectorXd::Constant(1, a)),
      x2(Eigen::VectorXd::Constant(1, b)),
      x3(Eigen::VectorXd::Constant(1, c)) {}

Eigen::VectorXd& JointPoint::block(int i) {
  return i == 0 ? x1 : (i == 1 ? x2 : x3);
}

const Eigen::VectorXd& JointPoint::block(int i) const {
  return i == 0 ? x1 : (i == 1 ? x2 : x3);
}

Eigen::VectorXd JointPoint::flat() const {
  Eigen::VectorXd v(total_dim());
  v << x1, x2, x3;
  return v;
}

JointPoint JointPoint::from_flat(const Eigen::VectorXd& v,
                                 const std::array<int, 3>& dims) {
  JointPoint p;
  p.x1 = v.segment(0, dims[0]);
  p.x2 = v.segment(dims[0], dims[1]);
  p.x3 = v.segment(dims[0] + dims[1], dims[2]);
  return p;
}

bool JointPoint::finite() const {
  return x1.allFinite() && x2.allFinite() && x3.allFinite();
}

LearnRates::LearnRates(double l1, double l2, double l3)
    : lambda1(l1), lambda2(l2), lambda3(l3) {
  if (!(0.0 < l1 && l1 < l2 && l2 < l3))
    throw std::invalid_argument(
        "rates must satisfy 0 < lambda1 < lambda2 < lambda3");
}

SingularHessianError::SingularHessianError(const std::string& what,
                                           double cond)
    : std::runtime_error(what), condition_number(cond) {}

Eigen::VectorXd fd_grad(const ThreePlayerGame& g, int player, int block,
                        const JointPoint& x, double eps) {
  const int m = static_cast<int>(x.block(block).size());
  Eigen::VectorXd out(m);
  JointPoint p = x;
  for (int i = 0; i < m; ++i) {
    const double saved = p.block(block)(i);
    p.block(block)(i) = saved + eps;
    const double up = g.loss(player, p);
    p.block(block)(i) = saved - eps;
    const double dn = g.loss(player, p);
    p.block(block)(i) = saved;
    out(i) = (up - dn) / (2.0 * eps);
  }
  return out;
}

Eigen::MatrixXd fd_hess(const ThreePlayerGame& g, int player, int a, int b,
                        const JointPoint& x, double eps) {
  const int ma = static_cast<int>(x.block(a).size());
  const int mb = static_cast<int>(x.block(b).size());
  Eigen::MatrixXd out(ma, mb);
  JointPoint p = x;
  for (int i = 0; i < ma; ++i)
    for (int j = 0; j < mb; ++j) {
      double corners[4];
      int k = 0;
      for (double si : {1.0, -1.0})
        for (double sj : {1.0, -1.0}) {
          p = x;
          p.block(a)(i) += si * eps;
          p.block(b)(j) += sj * eps;
          corners[k++] = g.loss(player, p);
        }
      out(i, j) = (corners[0] - corners[1] - corners[2] + corners[3]) /
                  (4.0 * eps * eps);
    }
  return out;
}

Eigen::VectorXd ThreePlayerGame::grad(int player, int block,
                                      const JointPoint& x) const {
  return fd_grad(*this, player, block, x);
}

Eigen::MatrixXd ThreePlayerGame::hess(int player, int a, int b,
                                      const JointPoint& x) const {
  return fd_hess(*this, player, a, b, x);
}

double StackelbergGradients::norm() const { return flat().norm(); }

Eigen::VectorXd StackelbergGradients::flat() const {
  Eigen::VectorXd v(w1.size() + w2.size() + w3.size());
  v << w1, w2, w3;
  return v;
}

ImplicitJacobians implicit_jacobians(const ThreePlayerGame& g,
                                     const JointPoint& x) {
  const Eigen::MatrixXd a3 = g.hess(2, 2, 2, x);
  ImplicitJacobians ij;
  ij.d1h = -solve_checked(a3, g.hess(2, 2, 0, x), "implicit_jacobians: D3^2 l3");
  ij.d2h = -solve_checked(a3, g.hess(2, 2, 1, x), "implicit_jacobians: D3^2 l3");
  const Eigen::MatrixXd a2 = g.hess(1, 1, 1, x);
  ij.d1r = -solve_checked(a2, g.hess(1, 1, 0, x) + g.hess(1, 1, 2, x) * ij.d1h,
                          "implicit_jacobians: D2^2 l2");
  return ij;
}

StackelbergGradients stackelberg_gradients(const ThreePlayerGame& g,
                                           const JointPoint& x) {
  const ImplicitJacobians ij = implicit_jacobians(g, x);
  StackelbergGradients w;
  w.w3 = g.grad(2, 2, x);
  w.w2 = g.grad(1, 1, x) + ij.d2h.transpose() * g.grad(1, 2, x);
  w.w1 = g.grad(0, 0, x) + ij.d1r.transpose() * g.grad(0, 1, x) +
         (ij.d1h + ij.d2h * ij.d1r).transpose() * g.grad(0, 2, x);
  return w;
}

JointPoint stackelberg_step(const ThreePlayerGame& g, const JointPoint& x,
                            const LearnRates& rates) {
  const StackelbergGradients w = stackelberg_gradients(g, x);
  JointPoint next;
  next.x1 = x.x1 - rates.lambda3 * (w.w1 / rates.tau1());
  next.x2 = x.x2 - rates.lambda3 * (w.w2 / rates.tau2());
  next.x3 = x.x3 - rates.lambda3 * w.w3;
  return next;
}

Eigen::VectorXd solve_follower3(const ThreePlayerGame& g,
                                const Eigen::VectorXd& x1,
                                const Eigen::VectorXd& x2,
                                const Eigen::VectorXd& x3_init) {
  JointPoint p{x1, x2, x3_init};
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd gr = g.grad(2, 2, p);
    if (gr.norm() < 1e-12) return p.x3;
    p.x3 -= solve_checked(g.hess(2, 2, 2, p), gr, "solve_follower3").col(0);
  }
  if (g.grad(2, 2, p).norm() < 1e-8) return p.x3;
  throw std::runtime_error("solve_follower3: Newton did not converge");
}

namespace {

// Newton solve over x2 of the partial condition D2 l2 (x1, x2, x3) = 0
// with x3 held fixed.
Eigen::VectorXd solve_middle_partial(const ThreePlayerGame& g,
                                     const Eigen::VectorXd& x1,
                                     const Eigen::VectorXd& x2_init,
                                     const Eigen::VectorXd& x3) {
  JointPoint p{x1, x2_init, x3};
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd gr = g.grad(1, 1, p);
    if (gr.norm() < 1e-12) return p.x2;
    p.x2 -= solve_checked(g.hess(1, 1, 1, p), gr, "solve_middle_partial").col(0);
  }
  if (g.grad(1, 1, p).norm() < 1e-8) return p.x2;
  throw std::runtime_error("solve_middle_partial: Newton did not converge");
}

}  // namespace

std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_partial_followers(
    const ThreePlayerGame& g, const Eigen::VectorXd& x1,
    const Eigen::VectorXd& x2_init, const Eigen::VectorXd& x3_init) {
  JointPoint p{x1, x2_init, x3_init};
  const int m2 = static_cast<int>(x2_init.size());
  const int m3 = static_cast<int>(x3_init.size());
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd res(m2 + m3);
    res << g.grad(1, 1, p), g.grad(2, 2, p);
    if (res.norm() < 1e-12) return {p.x2, p.x3};
    Eigen::MatrixXd jac(m2 + m3, m2 + m3);
    jac.topLeftCorner(m2, m2) = g.hess(1, 1, 1, p);
    jac.topRightCorner(m2, m3) = g.hess(1, 1, 2, p);
    jac.bottomLeftCorner(m3, m2) = g.hess(2, 2, 1, p);
    jac.bottomRightCorner(m3, m3) = g.hess(2, 2, 2, p);
    const Eigen::VectorXd step =
        solve_checked(jac, res, "solve_partial_followers").col(0);
    p.x2 -= step.head(m2);
    p.x3 -= step.tail(m3);
  }
  Eigen::VectorXd res(m2 + m3);
  res << g.grad(1, 1, p), g.grad(2, 2, p);
  if (res.norm() < 1e-8) return {p.x2, p.x3};
  throw std::runtime_error("solve_partial_followers: Newton did not converge");
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_total_followers(
    const ThreePlayerGame& g, const Eigen::VectorXd& x1,
    const Eigen::VectorXd& x2_init, const Eigen::VectorXd& x3_init) {
  const int m2 = static_cast<int>(x2_init.size());
  const int m3 = static_cast<int>(x3_init.size());
  JointPoint p{x1, x2_init, x3_init};
  auto residual = [&](const JointPoint& q) {
    const StackelbergGradients w = stackelberg_gradients(g, q);
    Eigen::VectorXd res(m2 + m3);
    res << w.w2, w.w3;
    return res;
  };
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd res = residual(p);
    if (res.norm() < 1e-11) return {p.x2, p.x3};
    // The residual involves response Jacobians, so its derivative is not
    // available from the game's second-order oracles; difference it.
    Eigen::MatrixXd jac(m2 + m3, m2 + m3);
    for (int j = 0; j < m2 + m3; ++j) {
      JointPoint up = p, dn = p;
      auto& ub = j < m2 ? up.x2 : up.x3;
      auto& db = j < m2 ? dn.x2 : dn.x3;
      const int jj = j < m2 ? j : j - m2;
      ub(jj) += kManifoldStep;
      db(jj) -= kManifoldStep;
      jac.col(j) = (residual(up) - residual(dn)) / (2.0 * kManifoldStep);
    }
    const Eigen::VectorXd step =
        solve_checked(jac, res, "solve_total_followers").col(0);
    p.x2 -= step.head(m2);
    p.x3 -= step.tail(m3);
  }
  if (residual(p).norm() < 1e-8) return {p.x2, p.x3};
  throw std::runtime_error("solve_total_followers: Newton did not converge");
}

DfseReport dfse_check(const ThreePlayerGame& g, const JointPoint& x,
                      double tol) {
  DfseReport rep;
  const StackelbergGradients w = stackelberg_gradients(g, x);
  rep.omega_norm = w.norm();
  if (!(rep.omega_norm < tol)) {
    rep.cls = DfseClass::kNonStationary;
    return rep;
  }

  const auto d = g.dims();
  const double eps = kManifoldStep;
  std::array<Eigen::MatrixXd, 3> curv;

  // Player 3: plain difference of w3 over x3.
  curv[2].resize(d[2], d[2]);
  for (int j = 0; j < d[2]; ++j) {
    JointPoint up = x, dn = x;
    up.x3(j) += eps;
    dn.x3(j) -= eps;
    curv[2].col(j) = (g.grad(2, 2, up) - g.grad(2, 2, dn)) / (2.0 * eps);
  }
  // Player 2: x3 re-solved to its stationarity at each probe.
  curv[1].resize(d[1], d[1]);
  for (int j = 0; j < d[1]; ++j) {
    auto probe = [&](double s) {
      JointPoint p = x;
      p.x2(j) += s;
      p.x3 = solve_follower3(g, p.x1, p.x2, x.x3);
      return stackelberg_gradients(g, p).w2;
    };
    curv[1].col(j) = (probe(eps) - probe(-eps)) / (2.0 * eps);
  }
  // Player 1: both subordinates re-solved to their joint stationarity.
  curv[0].resize(d[0], d[0]);
  for (int j = 0; j < d[0]; ++j) {
    auto probe = [&](double s) {
      JointPoint p = x;
      p.x1(j) += s;
      auto [r2, r3] = solve_total_followers(g, p.x1, x.x2, x.x3);
      p.x2 = r2;
      p.x3 = r3;
      return stackelberg_gradients(g, p).w1;
    };
    curv[0].col(j) = (probe(eps) - probe(-eps)) / (2.0 * eps);
  }

  bool all_pd = true;
  for (int i = 0; i < 3; ++i) {
    const Eigen::MatrixXd sym = 0.5 * (curv[i] + curv[i].transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    rep.min_curvature[i] = es.eigenvalues().minCoeff();
    all_pd = all_pd && rep.min_curvature[i] > kPdTol;
  }
  rep.cls = all_pd ? DfseClass::kDfse : DfseClass::kStationaryNotDfse;
  return rep;
}

DynamicsTrace run_dynamics(const ThreePlayerGame& g, const JointPoint& x0,
                           const LearnRates& rates, int max_iters,
                           double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("run_dynamics: tol must be > 0");
  DynamicsTrace trace;
  JointPoint x = x0;
  for (int k = 0; k <= max_iters; ++k) {
    trace.iterates.push_back(x);
    if (!x.finite() || x.flat().norm() > kDivergenceRadius) {
      trace.omega_norms.push_back(std::numeric_limits<double>::quiet_NaN());
      trace.status = RunStatus::kDiverged;
      break;
    }
    const StackelbergGradients w = stackelberg_gradients(g, x);
    trace.omega_norms.push_back(w.norm());
    if (w.norm() < tol) {
      trace.status = RunStatus::kConverged;
      trace.converged = true;
      break;
    }
    if (k == max_iters) {
      trace.status = RunStatus::kMaxIters;
      break;
    }
    JointPoint next;
    next.x1 = x.x1 - rates.lambda3 * (w.w1 / rates.tau1());
    next.x2 = x.x2 - rates.lambda3 * (w.w2 / rates.tau2());
    next.x3 = x.x3 - rates.lambda3 * w.w3;
    x = next;
  }
  if (trace.status != RunStatus::kDiverged) {
    try {
      trace.terminus = dfse_check(g, trace.iterates.back(), tol);
    } catch (const std::runtime_error&) {
      trace.terminus = DfseReport{};  // classification stays non-stationary
    }
  }
  return trace;
}

Eigen::MatrixXd game_jacobian(const ThreePlayerGame& g, const JointPoint& x,
                              const LearnRates& rates) {
  const auto d = g.dims();
  const int m = d[0] + d[1] + d[2];
  Eigen::MatrixXd jac(m, m);
  const Eigen::VectorXd base = x.flat();
  for (int j = 0; j < m; ++j) {
    Eigen::VectorXd up = base, dn = base;
    up(j) += kManifoldStep;
    dn(j) -= kManifoldStep;
    jac.col(j) =
        (stackelberg_gradients(g, JointPoint::from_flat(up, d)).flat() -
         stackelberg_gradients(g, JointPoint::from_flat(dn, d)).flat()) /
        (2.0 * kManifoldStep);
  }
  jac.topRows(d[0]) /= rates.tau1();
  jac.middleRows(d[0], d[1]) /= rates.tau2();
  return jac;
}

double spectral_radius(const Eigen::MatrixXd& m) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, /*computeEigenvectors=*/false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double matrix_two_norm(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd b = m.transpose() * m;
  const int n = static_cast<int>(b.rows());
  if (b.norm() == 0.0) return 0.0;
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = 1.0 + 0.01 * i;
  v.normalize();
  double prev = 0.0;
  for (int it = 0; it < 10000; ++it) {
    const Eigen::VectorXd u = b * v;
    const double lambda = v.dot(u);
    if (std::abs(lambda - prev) <= 1e-14 * std::max(1.0, std::abs(lambda)))
      return std::sqrt(std::max(lambda, 0.0));
    const double norm = u.norm();
    if (norm == 0.0) return 0.0;
    v = u / norm;
    prev = lambda;
  }
  throw std::runtime_error(
      "matrix_two_norm: power iteration did not converge within 10000 steps");
}

double saddle_avoidance_experiment(const ThreePlayerGame& g,
                                   const JointPoint& saddle, int n_inits,
                                   const LearnRates& rates, int max_iters,
                                   std::uint64_t seed) {
  const auto d = g.dims();
  const int m = d[0] + d[1] + d[2];
  const CounterRng rng{derive_seed(seed, "saddle-inits")};
  const Eigen::VectorXd saddle_flat = saddle.flat();
  std::vector<char> avoided(static_cast<std::size_t>(n_inits), 0);
#pragma omp parallel for schedule(static)
  for (int t = 0; t < n_inits; ++t) {
    Eigen::VectorXd v(m);
    for (int i = 0; i < m; ++i)
      v(i) = 2.0 * rng.uniform_at(static_cast<std::uint64_t>(t) * m + i) - 1.0;
    const DynamicsTrace trace =
        run_dynamics(g, JointPoint::from_flat(v, d), rates, max_iters);
    const double dist = (trace.final_point().flat() - saddle_flat).norm();
    avoided[static_cast<std::size_t>(t)] = dist >= 0.1 ? 1 : 0;
  }
  int n_avoided = 0;
  for (char c : avoided) n_avoided += c;
  return static_cast<double>(n_avoided) / n_inits;
}

// ---- Closed-form games ----

namespace {

class ReferenceGame : public ThreePlayerGame {
 public:
  std::array<int, 3> dims() const override { return {1, 1, 1}; }

  double loss(int player, const JointPoint& p) const override {
    const double x1 = p.x1(0), x2 = p.x2(0), x3 = p.x3(0);
    switch (player) {
      case 0:
        return 0.5 * (x1 - 1) * (x1 - 1) + 0.5 * (x2 - 2) * (x2 - 2) +
               0.5 * (x3 - 1) * (x3 - 1);
      case 1:
        return x2 * x2 + x1 * x2 + x2 * x3 - 4 * x2 + 0.5 * x3 * x3;
      default: {
        const double s = x3 - 2 * x1 - 3 * x2;
        return 0.5 * s * s;
      }
    }
  }

  Eigen::VectorXd grad(int player, int block,
                       const JointPoint& p) const override {
    const double x1 = p.x1(0), x2 = p.x2(0), x3 = p.x3(0);
    double v = 0.0;
    if (player == 0) {
      v = block == 0 ? x1 - 1 : (block == 1 ? x2 - 2 : x3 - 1);
    } else if (player == 1) {
      v = block == 0 ? x2
                     : (block == 1 ? 2 * x2 + x1 + x3 - 4 : x2 + x3);
    } else {
      const double s = x3 - 2 * x1 - 3 * x2;
      v = block == 0 ? -2 * s : (block == 1 ? -3 * s : s);
    }
    return Eigen::VectorXd::Constant(1, v);
  }

  Eigen::MatrixXd hess(int player, int a, int b,
                       const JointPoint&) const override {
    static const double h1[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    static const double h2[3][3] = {{0, 1, 0}, {1, 2, 1}, {0, 1, 1}};
    static const double h3[3][3] = {{4, 6, -2}, {6, 9, -3}, {-2, -3, 1}};
    const auto& h = player == 0 ? h1 : (player == 1 ? h2 : h3);
    return Eigen::MatrixXd::Constant(1, 1, h[a][b]);
  }
};

class DecoupledGame : public ThreePlayerGame {
 public:
  explicit DecoupledGame(std::array<int, 3> d) : dims_(d) {}
  std::array<int, 3> dims() const override { return dims_; }

  double loss(int player, const JointPoint& p) const override {
    return 0.5 * p.block(player).squaredNorm();
  }
  Eigen::VectorXd grad(int player, int block,
                       const JointPoint& p) const override {
    if (block == player) return p.block(block);
    return Eigen::VectorXd::Zero(dims_[static_cast<std::size_t>(block)]);
  }
  Eigen::MatrixXd hess(int player, int a, int b,
                       const JointPoint&) const override {
    const int ma = dims_[static_cast<std::size_t>(a)];
    const int mb = dims_[static_cast<std::size_t>(b)];
    if (a == player && b == player)
      return Eigen::MatrixXd::Identity(ma, mb);
    return Eigen::MatrixXd::Zero(ma, mb);
  }

 private:
  std::array<int, 3> dims_;
};

class QuadraticGame : public ThreePlayerGame {
 public:
  QuadraticGame(std::array<int, 3> d, std::array<Eigen::MatrixXd, 3> a,
                std::array<Eigen::VectorXd, 3> b)
      : dims_(d), a_(std::move(a)), b_(std::move(b)) {}

  std::array<int, 3> dims() const override { return dims_; }

  double loss(int player, const JointPoint& p) const override {
    const Eigen::VectorXd v = p.flat();
    const auto pi = static_cast<std::size_t>(player);
    return 0.5 * v.dot(a_[pi] * v) + b_[pi].dot(v);
  }
  Eigen::VectorXd grad(int player, int block,
                       const JointPoint& p) const override {
    const auto pi = static_cast<std::size_t>(player);
    const Eigen::VectorXd full = a_[pi] * p.flat() + b_[pi];
    return full.segment(offset(block), dims_[static_cast<std::size_t>(block)]);
  }
  Eigen::MatrixXd hess(int player, int a, int b,
                       const JointPoint&) const override {
    return a_[static_cast<std::size_t>(player)].block(
        offset(a), offset(b), dims_[static_cast<std::size_t>(a)],
        dims_[static_cast<std::size_t>(b)]);
  }

 private:
  int offset(int block) const {
    int off = 0;
    for (int i = 0; i < block; ++i) off += dims_[static_cast<std::size_t>(i)];
    return off;
  }

  std::array<int, 3> dims_;
  std::array<Eigen::MatrixXd, 3> a_;
  std::array<Eigen::VectorXd, 3> b_;
};

class SaddleGame : public ThreePlayerGame {
 public:
  std::array<int, 3> dims() const override { return {1, 1, 1}; }

  double loss(int player, const JointPoint& p) const override {
    if (player == 0) {
      const double x1 = p.x1(0);
      return -0.5 * x1 * x1 + 0.25 * x1 * x1 * x1 * x1;
    }
    return 0.5 * p.block(player).squaredNorm();
  }
  Eigen::VectorXd grad(int player, int block,
                       const JointPoint& p) const override {
    double v = 0.0;
    if (player == 0 && block == 0) {
      const double x1 = p.x1(0);
      v = -x1 + x1 * x1 * x1;
    } else if (player == block) {
      v = p.block(block)(0);
    }
    return Eigen::VectorXd::Constant(1, v);
  }
  Eigen::MatrixXd hess(int player, int a, int b,
                       const JointPoint& p) const override {
    double v = 0.0;
    if (player == 0 && a == 0 && b == 0) {
      const double x1 = p.x1(0);
      v = -1.0 + 3.0 * x1 * x1;
    } else if (player == a && a == b) {
      v = 1.0;
    }
    return Eigen::MatrixXd::Constant(1, 1, v);
  }
};

class ConcaveFollowerGame : public ThreePlayerGame {
 public:
  std::array<int, 3> dims() const override { return {1, 1, 1}; }
  double loss(int player, const JointPoint& p) const override {
    const double sq = 0.5 * p.block(player).squaredNorm();
    return player == 2 ? -sq : sq;
  }
  Eigen::VectorXd grad(int player, int block,
                       const JointPoint& p) const override {
    double v = 0.0;
    if (player == block) v = player == 2 ? -p.x3(0) : p.block(block)(0);
    return Eigen::VectorXd::Constant(1, v);
  }
  Eigen::MatrixXd hess(int player, int a, int b,
                       const JointPoint&) const override {
    double v = 0.0;
    if (player == a && a == b) v = player == 2 ? -1.0 : 1.0;
    return Eigen::MatrixXd::Constant(1, 1, v);
  }
};

class ScaledGame : public ThreePlayerGame {
 public:
  ScaledGame(std::unique_ptr<ThreePlayerGame> base, double c)
      : base_(std::move(base)), c_(c) {
    if (!(c > 0.0))
      throw std::invalid_argument("scaled game needs a positive factor");
  }
  std::array<int, 3> dims() const override { return base_->dims(); }
  double loss(int player, const JointPoint& p) const override {
    return c_ * base_->loss(player, p);
  }
  Eigen::VectorXd grad(int player, int block,
                       const JointPoint& p) const override {
    return c_ * base_->grad(player, block, p);
  }
  Eigen::MatrixXd hess(int player, int a, int b,
                       const JointPoint& p) const override {
    return c_ * base_->hess(player, a, b, p);
  }

 private:
  std::unique_ptr<ThreePlayerGame> base_;
  double c_;
};

}  // namespace

std::unique_ptr<ThreePlayerGame> make_reference_game() {
  return std::make_unique<ReferenceGame>();
}

JointPoint reference_game_equilibrium() {
  return JointPoint(-81.0 / 26.0, 49.0 / 26.0, -15.0 / 26.0);
}

std::unique_ptr<ThreePlayerGame> make_decoupled_game(std::array<int, 3> dims) {
  return std::make_unique<DecoupledGame>(dims);
}

std::unique_ptr<ThreePlayerGame> make_random_pd_quadratic(std::uint64_t seed) {
  CounterRng rng{derive_seed(seed, "pd-quadratic")};
  std::array<int, 3> dims;
  for (auto& d : dims) d = 1 + static_cast<int>(rng.below(3));
  const int m = dims[0] + dims[1] + dims[2];
  std::array<Eigen::MatrixXd, 3> a;
  std::array<Eigen::VectorXd, 3> b;
  for (int p = 0; p < 3; ++p) {
    Eigen::MatrixXd mat(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) mat(i, j) = rng.normal();
    a[static_cast<std::size_t>(p)] =
        mat.transpose() * mat / m + 0.5 * Eigen::MatrixXd::Identity(m, m);
    Eigen::VectorXd vec(m);
    for (int i = 0; i < m; ++i) vec(i) = rng.normal();
    b[static_cast<std::size_t>(p)] = vec;
  }
  return std::make_unique<QuadraticGame>(dims, std::move(a), std::move(b));
}

std::unique_ptr<ThreePlayerGame> make_saddle_game() {
  return std::make_unique<SaddleGame>();
}

std::unique_ptr<ThreePlayerGame> make_concave_follower_game() {
  return std::make_unique<ConcaveFollowerGame>();
}

std::unique_ptr<ThreePlayerGame> make_scaled_game(
    std::unique_ptr<ThreePlayerGame> base, double c) {
  return std::make_unique<ScaledGame>(std::move(base), c);
}

// ---- Nested-minimization oracles ----

ImplicitJacobians response_fd_oracle(const ThreePlayerGame& g,
                                     const JointPoint& x, double eps) {
  const auto d = g.dims();
  ImplicitJacobians ij;
  ij.d1h.resize(d[2], d[0]);
  ij.d2h.resize(d[2], d[1]);
  ij.d1r.resize(d[1], d[0]);
  for (int j = 0; j < d[0]; ++j) {
    Eigen::VectorXd up = x.x1, dn = x.x1;
    up(j) += eps;
    dn(j) -= eps;
    ij.d1h.col(j) = (solve_follower3(g, up, x.x2, x.x3) -
                     solve_follower3(g, dn, x.x2, x.x3)) /
                    (2.0 * eps);
    // Middle response: the x3 reaction is recomputed at the base x2, then
    // the middle player re-balances against that reaction.
    const Eigen::VectorXd h_up = solve_follower3(g, up, x.x2, x.x3);
    const Eigen::VectorXd h_dn = solve_follower3(g, dn, x.x2, x.x3);
    ij.d1r.col(j) = (solve_middle_partial(g, up, x.x2, h_up) -
                     solve_middle_partial(g, dn, x.x2, h_dn)) /
                    (2.0 * eps);
  }
  for (int j = 0; j < d[1]; ++j) {
    Eigen::VectorXd up = x.x2, dn = x.x2;
    up(j) += eps;
    dn(j) -= eps;
    ij.d2h.col(j) = (solve_follower3(g, x.x1, up, x.x3) -
                     solve_follower3(g, x.x1, dn, x.x3)) /
                    (2.0 * eps);
  }
  return ij;
}

Eigen::VectorXd omega1_fd_oracle(const ThreePlayerGame& g,
                                 const JointPoint& x, double eps) {
  const auto d = g.dims();
  auto leader_value = [&](const Eigen::VectorXd& x1) {
    const Eigen::VectorXd h_frozen = solve_follower3(g, x1, x.x2, x.x3);
    const Eigen::VectorXd r = solve_middle_partial(g, x1, x.x2, h_frozen);
    const Eigen::VectorXd h = solve_follower3(g, x1, r, h_frozen);
    return g.loss(0, JointPoint{x1, r, h});
  };
  Eigen::VectorXd out(d[0]);
  for (int j = 0; j < d[0]; ++j) {
    Eigen::VectorXd up = x.x1, dn = x.x1;
    up(j) += eps;
    dn(j) -= eps;
    out(j) = (leader_value(up) - leader_value(dn)) / (2.0 * eps);
  }
  return out;
}

// ---- Verification battery ----

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

double matrix_rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double worst = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      worst = std::max(worst, rel_err(a(i, j), b(i, j)));
  return worst;
}

}  // namespace

std::vector<VerifyRow> verify_battery() {
  std::vector<VerifyRow> rows;
  auto add = [&](const std::string& name, const std::string& game,
                 double value, double threshold, bool pass) {
    rows.push_back({name, game, value, threshold, pass});
  };

  const auto ref = make_reference_game();
  const JointPoint star = reference_game_equilibrium();
  const JointPoint probe(0.3, -0.7, 1.1);

  // Analytic derivative oracles against plain finite differences.
  auto oracle_agreement = [&](const ThreePlayerGame& game, const JointPoint& p,
                              const std::string& id) {
    double worst = 0.0;
    for (int pl = 0; pl < 3; ++pl)
      for (int a = 0; a < 3; ++a) {
        worst = std::max(worst, (game.grad(pl, a, p) - fd_grad(game, pl, a, p))
                                    .cwiseAbs()
                                    .maxCoeff());
        for (int b = 0; b < 3; ++b)
          worst = std::max(worst, (game.hess(pl, a, b, p) -
                                   fd_hess(game, pl, a, b, p))
                                      .cwiseAbs()
                                      .maxCoeff());
      }
    add("oracle-agreement", id, worst, 1e-5, worst < 1e-5);
  };
  oracle_agreement(*ref, probe, "reference");
  {
    const auto rnd = make_random_pd_quadratic(7);
    const auto d = rnd->dims();
    JointPoint p{Eigen::VectorXd::Constant(d[0], 0.4),
                 Eigen::VectorXd::Constant(d[1], -0.2),
                 Eigen::VectorXd::Constant(d[2], 0.9)};
    oracle_agreement(*rnd, p, "random-pd-7");
  }

  // Hand-derived response slopes of the reference game.
  {
    const ImplicitJacobians ij = implicit_jacobians(*ref, probe);
    const double worst =
        std::max({std::abs(ij.d1h(0, 0) - 2.0), std::abs(ij.d2h(0, 0) - 3.0),
                  std::abs(ij.d1r(0, 0) + 1.5)});
    add("implicit-scalars", "reference", worst, 1e-8, worst < 1e-8);
  }

  // Orientation against the nested-minimization oracle, 50 random games.
  {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
      const auto game = make_random_pd_quadratic(seed);
      const auto d = game->dims();
      CounterRng rng{derive_seed(seed, "probe-point")};
      JointPoint p;
      p.x1.resize(d[0]);
      p.x2.resize(d[1]);
      p.x3.resize(d[2]);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < d[static_cast<std::size_t>(i)]; ++j)
          p.block(i)(j) = 2.0 * rng.uniform() - 1.0;
      const ImplicitJacobians exact = implicit_jacobians(*game, p);
      const ImplicitJacobians fd = response_fd_oracle(*game, p);
      worst = std::max({worst, matrix_rel_err(exact.d1h, fd.d1h),
                        matrix_rel_err(exact.d2h, fd.d2h),
                        matrix_rel_err(exact.d1r, fd.d1r)});
    }
    add("implicit-orientation", "random-pd", worst, 1e-5, worst < 1e-5);
  }

  // First-order conditions and dynamics on the reference game.
  {
    const double n = stackelberg_gradients(*ref, star).norm();
    add("omega-at-equilibrium", "reference", n, 1e-10, n < 1e-10);
  }
  {
    Eigen::VectorXd x1 = Eigen::VectorXd::Constant(1, 0.7);
    auto [r2, r3] = solve_partial_followers(*ref, x1, star.x2, star.x3);
    const JointPoint consistent{x1, r2, r3};
    const Eigen::VectorXd w1 = stackelberg_gradients(*ref, consistent).w1;
    const Eigen::VectorXd fd = omega1_fd_oracle(*ref, consistent);
    const double worst = matrix_rel_err(w1, fd);
    add("omega1-chain-fd", "reference", worst, 1e-4, worst < 1e-4);
  }
  const LearnRates ref_rates(0.02, 0.05, 0.1);
  {
    const DynamicsTrace trace =
        run_dynamics(*ref, JointPoint(0, 0, 0), ref_rates, 10000, 1e-10);
    const double dist = (trace.final_point().flat() - star.flat()).norm();
    add("dynamics-converge", "reference", dist, 1e-6,
        trace.converged && dist < 1e-6);
    add("dfse-class", "reference",
        static_cast<double>(trace.terminus.cls == DfseClass::kDfse), 1.0,
        trace.terminus.cls == DfseClass::kDfse);
  }

  // Zero-coupling games reduce to per-player gradients exactly.
  {
    const auto dec = make_decoupled_game({2, 1, 2});
    JointPoint p;
    p.x1 = Eigen::VectorXd::Constant(2, 0.8);
    p.x2 = Eigen::VectorXd::Constant(1, -1.2);
    p.x3 = Eigen::VectorXd::Constant(2, 0.5);
    const StackelbergGradients w = stackelberg_gradients(*dec, p);
    const double worst = std::max({(w.w1 - p.x1).cwiseAbs().maxCoeff(),
                                   (w.w2 - p.x2).cwiseAbs().maxCoeff(),
                                   (w.w3 - p.x3).cwiseAbs().maxCoeff()});
    add("decoupled-reduction", "decoupled", worst, 0.0, worst == 0.0);
  }

  // Equilibria are fixed points of the step map.
  {
    const JointPoint next = stackelberg_step(*ref, star, ref_rates);
    const double dist = (next.flat() - star.flat()).norm();
    add("step-fixed-point", "reference", dist, 1e-12, dist < 1e-12);
  }

  // Common positive rescaling of the losses rescales the gradient and
  // preserves the classification.
  {
    double worst = 0.0;
    bool classes_ok = true;
    const Eigen::VectorXd base = stackelberg_gradients(*ref, probe).flat();
    for (double c : {0.5, 2.0, 10.0}) {
      const auto scaled = make_scaled_game(make_reference_game(), c);
      const Eigen::VectorXd w = stackelberg_gradients(*scaled, probe).flat();
      worst = std::max(worst, ((w - c * base) / c).cwiseAbs().maxCoeff());
      classes_ok = classes_ok && dfse_check(*scaled, star, c * 1e-8).cls ==
                                     DfseClass::kDfse;
    }
    add("scale-invariance", "reference", worst, 1e-10,
        worst < 1e-10 && classes_ok);
  }

  // Spectral safety margin: lambda3 = 0.5/L keeps the scaled Jacobian
  // inside the unit disc; a huge rate does not.
  {
    CounterRng rng{derive_seed(11, "spectral-samples")};
    std::vector<JointPoint> samples;
    for (int k = 0; k < 100; ++k) {
      JointPoint p(6.0 * rng.uniform() - 3.0, 6.0 * rng.uniform() - 3.0,
                   6.0 * rng.uniform() - 3.0);
      samples.push_back(p);
    }
    double lips = 0.0;
    std::vector<Eigen::MatrixXd> jacs;
    for (const auto& p : samples) {
      jacs.push_back(game_jacobian(*ref, p, ref_rates));
      lips = std::max(lips, matrix_two_norm(jacs.back()));
    }
    double worst_rho = 0.0, best_rho_huge = 1e300, worst_det = 1e300;
    const double safe = 0.5 / lips, huge = 1e3 / lips;
    for (const auto& j : jacs) {
      worst_rho = std::max(worst_rho, spectral_radius(safe * j));
      best_rho_huge = std::min(best_rho_huge, spectral_radius(huge * j));
      worst_det = std::min(
          worst_det,
          std::abs((Eigen::MatrixXd::Identity(3, 3) - safe * j).determinant()));
    }
    add("spectral-safe", "reference", worst_rho, 1.0, worst_rho < 1.0);
    add("spectral-unsafe", "reference", best_rho_huge, 1.0,
        best_rho_huge >= 1.0);
    add("diffeo-det", "reference", worst_det, 1e-12, worst_det > 1e-12);
  }

  // Saddle avoidance and follower divergence.
  {
    const auto saddle = make_saddle_game();
    const double frac = saddle_avoidance_experiment(
        *saddle, JointPoint(0, 0, 0), 100, LearnRates(0.05, 0.1, 0.2), 2000,
        12345);
    add("saddle-avoidance", "saddle", frac, 0.99, frac >= 0.99);
  }
  {
    const auto concave = make_concave_follower_game();
    const DynamicsTrace trace = run_dynamics(
        *concave, JointPoint(0.1, 0.1, 0.1), LearnRates(0.05, 0.1, 0.2), 2000);
    add("concave-divergence", "concave-follower",
        static_cast<double>(trace.status == RunStatus::kDiverged), 1.0,
        trace.status == RunStatus::kDiverged);
  }

  return rows;
}

}  // namespace mafenn
