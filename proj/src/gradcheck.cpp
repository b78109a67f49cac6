#include "mafenn/gradcheck.hpp"

#include <tuple>
#include <utility>

#include "mafenn/rng.hpp"
#include "mafenn/tape.hpp"

namespace mafenn {
namespace {

Tensor random_tensor(std::vector<int> shape, CounterRng& rng,
                     double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

// Shared scaffolding: run one case through grad_check and append the row.
void run_case(std::vector<GradBatteryRow>& rows, const std::string& name,
              std::uint64_t seed, const GradCheckCase& c, double eps,
              double tol) {
  const double err = grad_check(c, eps);
  rows.push_back({name, seed, err, tol, err < tol});
}

}  // namespace

std::vector<GradBatteryRow> gradcheck_battery(int n_seeds) {
  std::vector<GradBatteryRow> rows;
  for (std::uint64_t seed = 1; seed <= static_cast<std::uint64_t>(n_seeds);
       ++seed) {
    CounterRng rng{seed};

    {  // linear + mse
      ParamSet ps;
      ps.add("W", random_tensor({2, 5}, rng));
      ps.add("b", random_tensor({2}, rng));
      const Tensor xv = random_tensor({4, 5}, rng);
      const Tensor target = random_tensor({4, 2}, rng);
      auto build = [&](Tape& t, bool info) {
        const int W = t.leaf(ps.values[0], info);
        const int b = t.leaf(ps.values[1], info);
        return std::tuple{t.mse(t.linear(t.leaf(xv), W, b), target), W, b};
      };
      GradCheckCase c;
      c.params = &ps;
      c.loss = [&] {
        Tape t;
        return t.value(std::get<0>(build(t, false)))(0);
      };
      c.analytic = [&] {
        Tape t;
        auto [loss, W, b] = build(t, true);
        t.backward(loss);
        return std::vector<Tensor>{t.grad(W), t.grad(b)};
      };
      run_case(rows, "linear_mse", seed, c, 1e-5, 1e-5);
    }

    {  // conv1d + projection + mse
      ParamSet ps;
      ps.add("K", random_tensor({3, 3, 2}, rng));
      ps.add("b", random_tensor({3}, rng));
      const Tensor xv = random_tensor({2, 6, 2}, rng);
      const Tensor target = random_tensor({2, 2}, rng);
      const Tensor proj({2, 3}, {1.0, 0.5, -0.25, -0.5, 1.0, 0.75});
      auto build = [&](Tape& t, bool info) {
        const int K = t.leaf(ps.values[0], info);
        const int b = t.leaf(ps.values[1], info);
        const int y = t.conv1d(t.leaf(xv), K, b);
        const int p =
            t.linear(t.time_slice(y, 2), t.leaf(proj), t.leaf(Tensor({2})));
        return std::tuple{t.mse(p, target), K, b};
      };
      GradCheckCase c;
      c.params = &ps;
      c.loss = [&] {
        Tape t;
        return t.value(std::get<0>(build(t, false)))(0);
      };
      c.analytic = [&] {
        Tape t;
        auto [loss, K, b] = build(t, true);
        t.backward(loss);
        return std::vector<Tensor>{t.grad(K), t.grad(b)};
      };
      run_case(rows, "conv1d_mse", seed, c, 1e-5, 1e-5);
    }

    {  // relu chain, preactivations pushed off the kink
      ParamSet ps;
      Tensor& W = ps.add("W", random_tensor({2, 3}, rng));
      for (auto& v : W.data) v += v >= 0.0 ? 0.5 : -0.5;
      const Tensor xb({1, 3}, {1.0, 1.0, 1.0});
      const Tensor target = random_tensor({1, 2}, rng);
      auto build = [&](Tape& t, bool info) {
        const int W_id = t.leaf(ps.values[0], info);
        const int h =
            t.relu(t.linear(t.leaf(xb), W_id, t.leaf(Tensor({2}))));
        return std::pair{t.mse(h, target), W_id};
      };
      GradCheckCase c;
      c.params = &ps;
      c.loss = [&] {
        Tape t;
        return t.value(build(t, false).first)(0);
      };
      c.analytic = [&] {
        Tape t;
        auto [loss, W_id] = build(t, true);
        t.backward(loss);
        return std::vector<Tensor>{t.grad(W_id)};
      };
      run_case(rows, "relu_chain", seed, c, 1e-5, 1e-5);
    }

    {  // softmax + cross-entropy
      ParamSet ps;
      ps.add("W", random_tensor({4, 3}, rng));
      ps.add("b", random_tensor({4}, rng));
      const Tensor xv = random_tensor({3, 3}, rng);
      const std::vector<int> labels = {static_cast<int>(rng.below(4)),
                                       static_cast<int>(rng.below(4)),
                                       static_cast<int>(rng.below(4))};
      auto build = [&](Tape& t, bool info) {
        const int W = t.leaf(ps.values[0], info);
        const int b = t.leaf(ps.values[1], info);
        const int y = t.softmax(t.linear(t.leaf(xv), W, b));
        return std::tuple{t.cross_entropy(y, labels), W, b};
      };
      GradCheckCase c;
      c.params = &ps;
      c.loss = [&] {
        Tape t;
        return t.value(std::get<0>(build(t, false)))(0);
      };
      c.analytic = [&] {
        Tape t;
        auto [loss, W, b] = build(t, true);
        t.backward(loss);
        return std::vector<Tensor>{t.grad(W), t.grad(b)};
      };
      run_case(rows, "softmax_cross_entropy", seed, c, 1e-5, 1e-5);
    }

    {  // two-step LSTM unroll + latent affine + softmax + cross-entropy
      const int B = 3, I = 4, H = 5, M = 4;
      ParamSet ps;
      ps.add("w_ih", random_tensor({4 * H, I}, rng, 0.5));
      ps.add("w_hh", random_tensor({4 * H, H}, rng, 0.5));
      ps.add("b", random_tensor({4 * H}, rng, 0.5));
      ps.add("Wo", random_tensor({M, H}, rng, 0.5));
      ps.add("bo", random_tensor({M}, rng, 0.5));
      const Tensor x0 = random_tensor({B, I}, rng);
      const Tensor x1 = random_tensor({B, I}, rng);
      const std::vector<int> labels = {static_cast<int>(rng.below(M)),
                                       static_cast<int>(rng.below(M)),
                                       static_cast<int>(rng.below(M))};
      auto build = [&](Tape& t, bool info) {
        std::vector<int> ids;
        for (auto& v : ps.values) ids.push_back(t.leaf(v, info));
        int hc = t.leaf(Tensor({B, 2 * H}));
        hc = t.lstm_cell(t.leaf(x0), hc, ids[0], ids[1], ids[2]);
        hc = t.lstm_cell(t.leaf(x1), hc, ids[0], ids[1], ids[2]);
        const int h = t.slice_cols(hc, 0, H);
        const int y = t.softmax(t.linear(h, ids[3], ids[4]));
        return std::pair{t.cross_entropy(y, labels), ids};
      };
      GradCheckCase c;
      c.params = &ps;
      c.loss = [&] {
        Tape t;
        return t.value(build(t, false).first)(0);
      };
      c.analytic = [&] {
        Tape t;
        auto [loss, ids] = build(t, true);
        t.backward(loss);
        std::vector<Tensor> out;
        for (int id : ids) out.push_back(t.grad(id));
        return out;
      };
      run_case(rows, "lstm_composite", seed, c, 1e-4, 1e-4);
    }
  }
  return rows;
}

}  // namespace mafenn
