#pragma once

#include <Eigen/Dense>
#include <array>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mafenn {

// Three-player hierarchical game: player 0 leads, player 1 follows, player 2
// reacts last.  Losses take the joint point; derivative oracles default to
// finite differences of the losses so a subclass only has to provide l_i,
// overriding grad/hess when analytic forms are available.
//
// Index conventions used throughout: `player` selects the loss (0 -> l1),
// `block` selects the variable group (0 -> x1).  grad(p, a, x) is the partial
// gradient D_a l_p of length m_a; hess(p, a, b, x) is d(D_a l_p)/d x_b with
// shape m_a x m_b.

struct JointPoint {
  Eigen::VectorXd x1, x2, x3;

  JointPoint() = default;
  JointPoint(Eigen::VectorXd a, Eigen::VectorXd b, Eigen::VectorXd c)
      : x1(std::move(a)), x2(std::move(b)), x3(std::move(c)) {}
  // Scalar convenience for the closed-form games.
  JointPoint(double a, double b, double c);

  Eigen::VectorXd& block(int i);
  const Eigen::VectorXd& block(int i) const;
  Eigen::VectorXd flat() const;
  static JointPoint from_flat(const Eigen::VectorXd& v,
                              const std::array<int, 3>& dims);
  int total_dim() const {
    return static_cast<int>(x1.size() + x2.size() + x3.size());
  }
  bool finite() const;
};

// Learning rates with the follower fastest.  tau1/tau2 are the timescale
// ratios of the follower rate to each leader rate.
struct LearnRates {
  double lambda1, lambda2, lambda3;

  LearnRates(double l1, double l2, double l3);
  double tau1() const { return lambda3 / lambda1; }
  double tau2() const { return lambda3 / lambda2; }
};

class ThreePlayerGame {
 public:
  virtual ~ThreePlayerGame() = default;
  virtual std::array<int, 3> dims() const = 0;
  virtual double loss(int player, const JointPoint& x) const = 0;
  virtual Eigen::VectorXd grad(int player, int block,
                               const JointPoint& x) const;
  virtual Eigen::MatrixXd hess(int player, int a, int b,
                               const JointPoint& x) const;
  int total_dim() const {
    auto d = dims();
    return d[0] + d[1] + d[2];
  }
};

// Finite-difference reference oracles, always available regardless of any
// analytic overrides; used to cross-check analytic derivative code.
Eigen::VectorXd fd_grad(const ThreePlayerGame& g, int player, int block,
                        const JointPoint& x, double eps = 1e-6);
Eigen::MatrixXd fd_hess(const ThreePlayerGame& g, int player, int a, int b,
                        const JointPoint& x, double eps = 1e-4);

struct SingularHessianError : std::runtime_error {
  double condition_number;
  SingularHessianError(const std::string& what, double cond);
};

struct ImplicitJacobians {
  Eigen::MatrixXd d1h;  // follower response to leader moves   [m3 x m1]
  Eigen::MatrixXd d2h;  // follower response to middle moves   [m3 x m2]
  Eigen::MatrixXd d1r;  // middle response to leader moves     [m2 x m1]
};

struct StackelbergGradients {
  Eigen::VectorXd w1, w2, w3;
  double norm() const;
  Eigen::VectorXd flat() const;
};

// Response Jacobians via the implicit function theorem:
//   d1h = -(D3^2 l3)^-1 D31 l3
//   d2h = -(D3^2 l3)^-1 D32 l3
//   d1r = -(D2^2 l2)^-1 (D21 l2 + D23 l2 * d1h)
// Throws SingularHessianError if either inverted block has condition
// number >= 1e12.
ImplicitJacobians implicit_jacobians(const ThreePlayerGame& g,
                                     const JointPoint& x);

// Total-derivative gradient vector of the hierarchical play:
//   w1 = D1 l1 + d1r^T D2 l1 + (d1h + d2h d1r)^T D3 l1
//   w2 = D2 l2 + d2h^T D3 l2
//   w3 = D3 l3
StackelbergGradients stackelberg_gradients(const ThreePlayerGame& g,
                                           const JointPoint& x);

// One simultaneous update of all three blocks from gradients at x:
//   x_i' = x_i - lambda3 * (w_i / tau_i)   (tau3 = 1)
JointPoint stackelberg_step(const ThreePlayerGame& g, const JointPoint& x,
                            const LearnRates& rates);

enum class DfseClass { kDfse, kStationaryNotDfse, kNonStationary };

struct DfseReport {
  DfseClass cls = DfseClass::kNonStationary;
  double omega_norm = 0.0;
  // Minimum eigenvalue of each player's curvature along the subordinates'
  // response manifold (symmetrized finite differences of w).
  std::array<double, 3> min_curvature{0.0, 0.0, 0.0};
};

// First-order: ||w|| < tol.  Second-order: all three response-manifold
// curvature blocks positive definite (min eigenvalue > 1e-8).  Curvatures
// are central differences of w with step 1e-5; subordinate blocks are
// re-solved to their own stationarity at each probe point.
DfseReport dfse_check(const ThreePlayerGame& g, const JointPoint& x,
                      double tol);

enum class RunStatus { kConverged, kMaxIters, kDiverged };

struct DynamicsTrace {
  std::vector<JointPoint> iterates;
  std::vector<double> omega_norms;
  RunStatus status = RunStatus::kMaxIters;
  bool converged = false;
  DfseReport terminus;

  const JointPoint& final_point() const { return iterates.back(); }
};

// Iterates stackelberg_step until ||w|| < tol, max_iters, or ||x|| > 1e9
// (reported as divergence, never silently).  The terminus is classified
// with dfse_check.
DynamicsTrace run_dynamics(const ThreePlayerGame& g, const JointPoint& x0,
                           const LearnRates& rates, int max_iters = 100000,
                           double tol = 1e-8);

// Row-scaled Jacobian of the stacked gradient vector at x: the first block
// of rows carries 1/tau1, the second 1/tau2, the third 1.  The Jacobian of
// the update map is I - lambda3 * J.
Eigen::MatrixXd game_jacobian(const ThreePlayerGame& g, const JointPoint& x,
                              const LearnRates& rates);

// Largest |eigenvalue| (general eigensolve).
double spectral_radius(const Eigen::MatrixXd& m);

// 2-norm via power iteration on m^T m; throws std::runtime_error if the
// iteration has not settled after 10^4 steps.
double matrix_two_norm(const Eigen::MatrixXd& m);

// Fraction of uniform random inits in [-1,1]^m whose dynamics terminate at
// distance >= 0.1 from the given saddle point.  Trajectories are
// independent and run in parallel, each with its own counter RNG.
double saddle_avoidance_experiment(const ThreePlayerGame& g,
                                   const JointPoint& saddle, int n_inits,
                                   const LearnRates& rates, int max_iters,
                                   std::uint64_t seed);

// ---- Closed-form games used by the verification battery and tests ----

// Quadratic game with hand-solved equilibrium:
//   l1 = 1/2 (x1-1)^2 + 1/2 (x2-2)^2 + 1/2 (x3-1)^2
//   l2 = x2^2 + x1 x2 + x2 x3 - 4 x2 + 1/2 x3^2
//   l3 = 1/2 (x3 - 2 x1 - 3 x2)^2
// Response derivatives d1h = 2, d2h = 3, d1r = -3/2; the stationary point
// of the resulting dynamics is x* = (-81, 49, -15)/26.
std::unique_ptr<ThreePlayerGame> make_reference_game();
JointPoint reference_game_equilibrium();

// l_i = 1/2 ||x_i||^2 with the given block dims: no coupling at all.
std::unique_ptr<ThreePlayerGame> make_decoupled_game(
    std::array<int, 3> dims = {1, 1, 1});

// Random strictly convex quadratic over the joint space: l_p has Hessian
// A_p = M^T M / m + I/2 (symmetric, eigenvalues >= 1/2) and linear term
// b_p, all drawn from the seed.  Block dims drawn from {1,2,3}.
std::unique_ptr<ThreePlayerGame> make_random_pd_quadratic(std::uint64_t seed);

// Double-well leader with decoupled quadratic followers:
//   l1 = -1/2 x1^2 + 1/4 x1^4,  l2 = 1/2 x2^2,  l3 = 1/2 x3^2
// The origin is a stationary saddle whose stable set {x1 = 0} has measure
// zero; the attractors sit at x1 = +-1.
std::unique_ptr<ThreePlayerGame> make_saddle_game();

// Follower objective concave in x3 (l3 = -1/2 x3^2): follower dynamics
// run uphill and diverge.
std::unique_ptr<ThreePlayerGame> make_concave_follower_game();

// All three losses of `base` multiplied by c > 0 (gradient scale test).
std::unique_ptr<ThreePlayerGame> make_scaled_game(
    std::unique_ptr<ThreePlayerGame> base, double c);

// ---- Nested-minimization oracles (validation apparatus) ----
// These solve the follower problems numerically and differentiate the
// solved responses by central differences, providing a formula-free cross
// check of implicit_jacobians and stackelberg_gradients.

// Newton solve of D3 l3 = 0 over x3 (x1, x2 held fixed).
Eigen::VectorXd solve_follower3(const ThreePlayerGame& g,
                                const Eigen::VectorXd& x1,
                                const Eigen::VectorXd& x2,
                                const Eigen::VectorXd& x3_init);

// Joint Newton solve of the partial stationarity system
//   D2 l2 (x1, x2, x3) = 0,  D3 l3 (x1, x2, x3) = 0
// over (x2, x3); returns the solved pair.
std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_partial_followers(
    const ThreePlayerGame& g, const Eigen::VectorXd& x1,
    const Eigen::VectorXd& x2_init, const Eigen::VectorXd& x3_init);

// Joint Newton solve of the total stationarity system w2 = 0, w3 = 0
// over (x2, x3) (finite-difference Jacobian of w).
std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_total_followers(
    const ThreePlayerGame& g, const Eigen::VectorXd& x1,
    const Eigen::VectorXd& x2_init, const Eigen::VectorXd& x3_init);

// Finite-difference slopes of the numerically solved responses:
//   d1h, d2h: perturb x1 (resp. x2) and re-minimize l3 over x3;
//   d1r: perturb x1, recompute the x3 response at the base x2, then
//        re-solve D2 l2 = 0 over x2 against that response.
// The default step suits quadratic games, whose responses are linear in
// the perturbation: the difference quotient has no truncation error, and
// a generous step keeps the Newton-solve roundoff diluted.
ImplicitJacobians response_fd_oracle(const ThreePlayerGame& g,
                                     const JointPoint& x, double eps = 1e-2);

// Central difference of the leader value along the solved response path
// x1 -> l1(x1, r(x1), h(x1, r(x1))).  Valid at points already satisfying
// the partial follower stationarity (use solve_partial_followers first).
Eigen::VectorXd omega1_fd_oracle(const ThreePlayerGame& g,
                                 const JointPoint& x, double eps = 1e-2);

// ---- Verification battery (the game-verify CLI) ----

struct VerifyRow {
  std::string check_name;
  std::string game_id;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

std::vector<VerifyRow> verify_battery();

}  // namespace mafenn
