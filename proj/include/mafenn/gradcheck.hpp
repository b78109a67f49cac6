#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mafenn/tensor.hpp"

namespace mafenn {

// A gradient-check problem: `params` are perturbed in place, `loss` runs a
// fresh forward pass and returns the scalar, `analytic` builds a tape,
// runs backward and returns gradients aligned with params->values.
struct GradCheckCase {
  ParamSet* params = nullptr;
  std::function<double()> loss;
  std::function<std::vector<Tensor>()> analytic;
};

// Central-difference check with step eps.  Returns the maximum over all
// parameter components of
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double grad_check(const GradCheckCase& c, double eps) {
  const std::vector<Tensor> grads = c.analytic();
  double worst = 0.0;
  for (std::size_t p = 0; p < c.params->size(); ++p) {
    Tensor& t = c.params->values[p];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data[i];
      t.data[i] = saved + eps;
      const double up = c.loss();
      t.data[i] = saved - eps;
      const double dn = c.loss();
      t.data[i] = saved;
      const double numeric = (up - dn) / (2.0 * eps);
      const double analytic = grads[p].data[i];
      const double denom =
          std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

// One derivative check of the standard battery: every layer kind plus the
// loss heads, each against central differences at its own step size.
struct GradBatteryRow {
  std::string check_name;
  std::uint64_t seed = 0;
  double rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// Runs the battery over seeds 1..n_seeds.  Layer and loss checks must land
// under 1e-5; the recurrent composite gets 1e-4.
std::vector<GradBatteryRow> gradcheck_battery(int n_seeds = 20);

}  // namespace mafenn
