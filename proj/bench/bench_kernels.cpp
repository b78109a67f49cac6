// Serial reference vs OpenMP kernels on the shapes the equalizer actually
// runs: batch 64, encoder input 19x2, conv stack 16/32/64, LSTM hidden 64.
// Items processed are reported so throughput is comparable across variants.

#include <benchmark/benchmark.h>

#include <vector>

#include "mafenn/kernels.hpp"
#include "mafenn/rng.hpp"

using mafenn::CounterRng;
namespace kr = mafenn::kernels;

namespace {

std::vector<double> rand_vec(std::size_t n, std::uint64_t seed) {
  CounterRng rng{seed};
  std::vector<double> v(n);
  for (auto& x : v) x = 2.0 * rng.uniform() - 1.0;
  return v;
}

constexpr int kB = 64;   // batch
constexpr int kI = 128;  // lstm input + hidden
constexpr int kO = 256;  // 4 * hidden

template <bool Par>
void bm_matmul(benchmark::State& state) {
  auto x = rand_vec(kB * kI, 1);
  auto w = rand_vec(kI * kO, 2);
  std::vector<double> y(kB * kO, 0.0);
  for (auto _ : state) {
    if constexpr (Par)
      kr::par::matmul(x.data(), w.data(), y.data(), kB, kI, kO, false);
    else
      kr::ref::matmul(x.data(), w.data(), y.data(), kB, kI, kO, false);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * kB * kI * kO);
}

template <bool Par>
void bm_matmul_dx(benchmark::State& state) {
  auto dy = rand_vec(kB * kO, 3);
  auto w = rand_vec(kI * kO, 4);
  std::vector<double> dx(kB * kI, 0.0);
  for (auto _ : state) {
    if constexpr (Par)
      kr::par::matmul_dx(dy.data(), w.data(), dx.data(), kB, kI, kO, true);
    else
      kr::ref::matmul_dx(dy.data(), w.data(), dx.data(), kB, kI, kO, true);
    benchmark::DoNotOptimize(dx.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * kB * kI * kO);
}

template <bool Par>
void bm_matmul_dw(benchmark::State& state) {
  auto dy = rand_vec(kB * kO, 5);
  auto x = rand_vec(kB * kI, 6);
  std::vector<double> dw(kI * kO, 0.0);
  for (auto _ : state) {
    if constexpr (Par)
      kr::par::matmul_dw(dy.data(), x.data(), dw.data(), kB, kI, kO, true);
    else
      kr::ref::matmul_dw(dy.data(), x.data(), dw.data(), kB, kI, kO, true);
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * kB * kI * kO);
}

template <bool Par>
void bm_conv1d(benchmark::State& state) {
  const int T = 19, Cin = 32, F = 64, w = 3;
  auto x = rand_vec(kB * T * Cin, 7);
  auto k = rand_vec(w * Cin * F, 8);
  auto b = rand_vec(F, 9);
  std::vector<double> y(kB * (T - w + 1) * F, 0.0);
  for (auto _ : state) {
    if constexpr (Par)
      kr::par::conv1d(x.data(), k.data(), b.data(), y.data(), kB, T, Cin, F, w);
    else
      kr::ref::conv1d(x.data(), k.data(), b.data(), y.data(), kB, T, Cin, F, w);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * kB * (T - w + 1) * F * w *
                          Cin);
}

template <bool Par>
void bm_lstm_point(benchmark::State& state) {
  const int H = 64;
  auto a = rand_vec(kB * 4 * H, 10);
  auto cp = rand_vec(kB * H, 11);
  std::vector<double> act(kB * 4 * H), c(kB * H), h(kB * H);
  for (auto _ : state) {
    if constexpr (Par)
      kr::par::lstm_point(a.data(), cp.data(), act.data(), c.data(), h.data(),
                          kB, H);
    else
      kr::ref::lstm_point(a.data(), cp.data(), act.data(), c.data(), h.data(),
                          kB, H);
    benchmark::DoNotOptimize(h.data());
  }
  state.SetItemsProcessed(state.iterations() * kB * H);
}

template <bool Par>
void bm_fir(benchmark::State& state) {
  const std::size_t n = 1 << 16, nt = 10;
  std::vector<kr::cplx> x(n), taps(nt), y(n);
  CounterRng rng{12};
  for (auto& v : x) v = {rng.normal(), rng.normal()};
  for (auto& v : taps) v = {rng.normal(), rng.normal()};
  for (auto _ : state) {
    if constexpr (Par)
      kr::par::fir_filter(x.data(), taps.data(), y.data(), n, nt);
    else
      kr::ref::fir_filter(x.data(), taps.data(), y.data(), n, nt);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long long>(n));
}

template <bool Par>
void bm_awgn(benchmark::State& state) {
  const std::size_t n = 1 << 16;
  std::vector<kr::cplx> x(n, {1.0, -1.0}), y(n);
  CounterRng rng{13};
  for (auto _ : state) {
    if constexpr (Par)
      kr::par::awgn(x.data(), y.data(), n, 0.1, rng);
    else
      kr::ref::awgn(x.data(), y.data(), n, 0.1, rng);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long long>(n));
}

}  // namespace

BENCHMARK(bm_matmul<false>)->Name("matmul/ref");
BENCHMARK(bm_matmul<true>)->Name("matmul/omp");
BENCHMARK(bm_matmul_dx<false>)->Name("matmul_dx/ref");
BENCHMARK(bm_matmul_dx<true>)->Name("matmul_dx/omp");
BENCHMARK(bm_matmul_dw<false>)->Name("matmul_dw/ref");
BENCHMARK(bm_matmul_dw<true>)->Name("matmul_dw/omp");
BENCHMARK(bm_conv1d<false>)->Name("conv1d/ref");
BENCHMARK(bm_conv1d<true>)->Name("conv1d/omp");
BENCHMARK(bm_lstm_point<false>)->Name("lstm_point/ref");
BENCHMARK(bm_lstm_point<true>)->Name("lstm_point/omp");
BENCHMARK(bm_fir<false>)->Name("fir/ref");
BENCHMARK(bm_fir<true>)->Name("fir/omp");
BENCHMARK(bm_awgn<false>)->Name("awgn/ref");
BENCHMARK(bm_awgn<true>)->Name("awgn/omp");

BENCHMARK_MAIN();
