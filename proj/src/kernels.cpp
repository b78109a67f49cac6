#include "mafenn/kernels.hpp"

#include <omp.h>

#include <atomic>
#include <cmath>
#include <cstring>

// Each kernel's per-output arithmetic lives in a `detail` worker that both
// the serial and the OpenMP driver call.  The drivers only decide which
// rows (or index ranges) run where; the worker fixes the summation order.
//
// The workers are marked noinline on purpose: with -O3 the compiler is
// allowed to contract a*b+c into fma differently per inlining context, so
// letting a worker inline into both drivers could break their bitwise
// agreement even though the source is shared.  One compiled instance, one
// rounding behavior.  The per-call overhead is irrelevant next to the work
// a row represents.

#define MAFENN_WORKER [[gnu::noinline]] static

namespace mafenn::kernels {

namespace {

std::atomic<bool> g_parallel{true};

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Split [0, n) into the static chunk owned by this thread.
template <typename F>
void omp_ranges(std::size_t n, F&& body) {
#pragma omp parallel
  {
    const std::size_t nt = static_cast<std::size_t>(omp_get_num_threads());
    const std::size_t tid = static_cast<std::size_t>(omp_get_thread_num());
    const std::size_t lo = n * tid / nt;
    const std::size_t hi = n * (tid + 1) / nt;
    if (lo < hi) body(lo, hi);
  }
}

namespace detail {

MAFENN_WORKER void matmul_row(const double* x, const double* w, double* y,
                              int I, int O, bool acc, int b) {
  double* yr = y + static_cast<std::size_t>(b) * O;
  const double* xr = x + static_cast<std::size_t>(b) * I;
  if (!acc)
    for (int o = 0; o < O; ++o) yr[o] = 0.0;
  for (int i = 0; i < I; ++i) {
    const double xv = xr[i];
    const double* wr = w + static_cast<std::size_t>(i) * O;
    for (int o = 0; o < O; ++o) yr[o] += xv * wr[o];
  }
}

MAFENN_WORKER void bias_row(double* y, const double* bias, int O, int b) {
  double* yr = y + static_cast<std::size_t>(b) * O;
  for (int o = 0; o < O; ++o) yr[o] += bias[o];
}

MAFENN_WORKER void matmul_dx_row(const double* dy, const double* w, double* dx,
                                 int I, int O, bool acc, int b) {
  const double* dyr = dy + static_cast<std::size_t>(b) * O;
  double* dxr = dx + static_cast<std::size_t>(b) * I;
  for (int i = 0; i < I; ++i) {
    const double* wr = w + static_cast<std::size_t>(i) * O;
    double s = 0.0;
    for (int o = 0; o < O; ++o) s += dyr[o] * wr[o];
    dxr[i] = acc ? dxr[i] + s : s;
  }
}

// One row i of dw, accumulated over the batch in index order.
MAFENN_WORKER void matmul_dw_row(const double* dy, const double* x, double* dw,
                                 int B, int I, int O, bool acc, int i) {
  double* dwr = dw + static_cast<std::size_t>(i) * O;
  if (!acc)
    for (int o = 0; o < O; ++o) dwr[o] = 0.0;
  for (int b = 0; b < B; ++b) {
    const double xv = x[static_cast<std::size_t>(b) * I + i];
    const double* dyr = dy + static_cast<std::size_t>(b) * O;
    for (int o = 0; o < O; ++o) dwr[o] += xv * dyr[o];
  }
}

MAFENN_WORKER void col_sum_one(const double* dy, double* db, int B, int O,
                               bool acc, int o) {
  double s = 0.0;
  for (int b = 0; b < B; ++b) s += dy[static_cast<std::size_t>(b) * O + o];
  db[o] = acc ? db[o] + s : s;
}

MAFENN_WORKER void conv1d_row(const double* x, const double* k,
                              const double* bias, double* y, int T, int Cin,
                              int F, int w, int b) {
  const int Tout = T - w + 1;
  const double* xb = x + static_cast<std::size_t>(b) * T * Cin;
  double* yb = y + static_cast<std::size_t>(b) * Tout * F;
  for (int t = 0; t < Tout; ++t) {
    double* yr = yb + static_cast<std::size_t>(t) * F;
    for (int f = 0; f < F; ++f) yr[f] = bias[f];
    const double* xt = xb + static_cast<std::size_t>(t) * Cin;
    for (int jc = 0; jc < w * Cin; ++jc) {
      const double xv = xt[jc];
      const double* kr = k + static_cast<std::size_t>(jc) * F;
      for (int f = 0; f < F; ++f) yr[f] += xv * kr[f];
    }
  }
}

MAFENN_WORKER void conv1d_dx_row(const double* dy, const double* k, double* dx,
                                 int T, int Cin, int F, int w, bool acc,
                                 int b) {
  const int Tout = T - w + 1;
  const double* dyb = dy + static_cast<std::size_t>(b) * Tout * F;
  double* dxb = dx + static_cast<std::size_t>(b) * T * Cin;
  if (!acc)
    for (int i = 0; i < T * Cin; ++i) dxb[i] = 0.0;
  for (int t = 0; t < Tout; ++t) {
    const double* dyr = dyb + static_cast<std::size_t>(t) * F;
    double* dxt = dxb + static_cast<std::size_t>(t) * Cin;
    for (int jc = 0; jc < w * Cin; ++jc) {
      const double* kr = k + static_cast<std::size_t>(jc) * F;
      double s = 0.0;
      for (int f = 0; f < F; ++f) s += dyr[f] * kr[f];
      dxt[jc] += s;
    }
  }
}

// One (tap, channel) row of dk, accumulated over batch and time in order.
MAFENN_WORKER void conv1d_dk_row(const double* dy, const double* x, double* dk,
                                 int B, int T, int Cin, int F, int w, bool acc,
                                 int jc) {
  const int Tout = T - w + 1;
  double* dkr = dk + static_cast<std::size_t>(jc) * F;
  if (!acc)
    for (int f = 0; f < F; ++f) dkr[f] = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* xb = x + static_cast<std::size_t>(b) * T * Cin;
    const double* dyb = dy + static_cast<std::size_t>(b) * Tout * F;
    for (int t = 0; t < Tout; ++t) {
      const double xv = xb[static_cast<std::size_t>(t) * Cin + jc];
      const double* dyr = dyb + static_cast<std::size_t>(t) * F;
      for (int f = 0; f < F; ++f) dkr[f] += xv * dyr[f];
    }
  }
}

MAFENN_WORKER void conv1d_db_one(const double* dy, double* db, int B, int Tout,
                                 int F, bool acc, int f) {
  double s = 0.0;
  for (int bt = 0; bt < B * Tout; ++bt)
    s += dy[static_cast<std::size_t>(bt) * F + f];
  db[f] = acc ? db[f] + s : s;
}

MAFENN_WORKER void relu_range(const double* x, double* y, std::size_t lo,
                              std::size_t hi) {
  for (std::size_t i = lo; i < hi; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

MAFENN_WORKER void relu_dx_range(const double* x, const double* dy, double* dx,
                                 bool acc, std::size_t lo, std::size_t hi) {
  for (std::size_t i = lo; i < hi; ++i) {
    const double v = x[i] > 0.0 ? dy[i] : 0.0;
    dx[i] = acc ? dx[i] + v : v;
  }
}

MAFENN_WORKER void softmax_row(const double* x, double* y, int M, int b) {
  const double* xr = x + static_cast<std::size_t>(b) * M;
  double* yr = y + static_cast<std::size_t>(b) * M;
  double mx = xr[0];
  for (int m = 1; m < M; ++m) mx = xr[m] > mx ? xr[m] : mx;
  double z = 0.0;
  for (int m = 0; m < M; ++m) {
    yr[m] = std::exp(xr[m] - mx);
    z += yr[m];
  }
  const double inv = 1.0 / z;
  for (int m = 0; m < M; ++m) yr[m] *= inv;
}

MAFENN_WORKER void softmax_dx_row(const double* y, const double* dy,
                                  double* dx, int M, bool acc, int b) {
  const double* yr = y + static_cast<std::size_t>(b) * M;
  const double* dyr = dy + static_cast<std::size_t>(b) * M;
  double* dxr = dx + static_cast<std::size_t>(b) * M;
  double dot = 0.0;
  for (int m = 0; m < M; ++m) dot += dyr[m] * yr[m];
  for (int m = 0; m < M; ++m) {
    const double v = yr[m] * (dyr[m] - dot);
    dxr[m] = acc ? dxr[m] + v : v;
  }
}

MAFENN_WORKER void lstm_point_row(const double* a, const double* c_prev,
                                  double* act, double* c, double* h, int H,
                                  int b) {
  const double* ab = a + static_cast<std::size_t>(b) * 4 * H;
  const double* cp = c_prev + static_cast<std::size_t>(b) * H;
  double* tb = act + static_cast<std::size_t>(b) * 4 * H;
  double* cb = c + static_cast<std::size_t>(b) * H;
  double* hb = h + static_cast<std::size_t>(b) * H;
  for (int j = 0; j < H; ++j) {
    const double gi = sigmoid(ab[j]);
    const double gf = sigmoid(ab[H + j]);
    const double gg = std::tanh(ab[2 * H + j]);
    const double go = sigmoid(ab[3 * H + j]);
    tb[j] = gi;
    tb[H + j] = gf;
    tb[2 * H + j] = gg;
    tb[3 * H + j] = go;
    const double cn = gf * cp[j] + gi * gg;
    cb[j] = cn;
    hb[j] = go * std::tanh(cn);
  }
}

MAFENN_WORKER void lstm_point_back_row(const double* act, const double* c_prev,
                                       const double* c, const double* dh,
                                       const double* dc_in, double* da,
                                       double* dc_prev, int H, int b) {
  const double* tb = act + static_cast<std::size_t>(b) * 4 * H;
  const double* cp = c_prev + static_cast<std::size_t>(b) * H;
  const double* cb = c + static_cast<std::size_t>(b) * H;
  const double* dhb = dh + static_cast<std::size_t>(b) * H;
  const double* dcb = dc_in + static_cast<std::size_t>(b) * H;
  double* dab = da + static_cast<std::size_t>(b) * 4 * H;
  double* dpb = dc_prev + static_cast<std::size_t>(b) * H;
  for (int j = 0; j < H; ++j) {
    const double gi = tb[j];
    const double gf = tb[H + j];
    const double gg = tb[2 * H + j];
    const double go = tb[3 * H + j];
    const double tc = std::tanh(cb[j]);
    const double dgo = dhb[j] * tc;
    const double dc = dcb[j] + dhb[j] * go * (1.0 - tc * tc);
    const double dgi = dc * gg;
    const double dgf = dc * cp[j];
    const double dgg = dc * gi;
    dab[j] = dgi * gi * (1.0 - gi);
    dab[H + j] = dgf * gf * (1.0 - gf);
    dab[2 * H + j] = dgg * (1.0 - gg * gg);
    dab[3 * H + j] = dgo * go * (1.0 - go);
    dpb[j] = dc * gf;
  }
}

MAFENN_WORKER void fir_range(const cplx* x, const cplx* taps, cplx* y,
                             std::size_t n_taps, std::size_t lo,
                             std::size_t hi) {
  for (std::size_t i = lo; i < hi; ++i) {
    const std::size_t kmax = i < n_taps - 1 ? i : n_taps - 1;
    cplx s{0.0, 0.0};
    for (std::size_t k = 0; k <= kmax; ++k) s += taps[k] * x[i - k];
    y[i] = s;
  }
}

MAFENN_WORKER void awgn_range(const cplx* x, cplx* y, double sd,
                              const CounterRng& rng, std::size_t lo,
                              std::size_t hi) {
  for (std::size_t i = lo; i < hi; ++i) {
    const auto [zr, zi] = rng.normal_pair_at(i);
    y[i] = x[i] + cplx{sd * zr, sd * zi};
  }
}

}  // namespace detail

}  // namespace

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

namespace ref {

void matmul(const double* x, const double* w, double* y, int B, int I, int O,
            bool acc) {
  for (int b = 0; b < B; ++b) detail::matmul_row(x, w, y, I, O, acc, b);
}

void add_bias_rows(double* y, const double* bias, int B, int O) {
  for (int b = 0; b < B; ++b) detail::bias_row(y, bias, O, b);
}

void matmul_dx(const double* dy, const double* w, double* dx, int B, int I,
               int O, bool acc) {
  for (int b = 0; b < B; ++b) detail::matmul_dx_row(dy, w, dx, I, O, acc, b);
}

void matmul_dw(const double* dy, const double* x, double* dw, int B, int I,
               int O, bool acc) {
  for (int i = 0; i < I; ++i) detail::matmul_dw_row(dy, x, dw, B, I, O, acc, i);
}

void col_sums(const double* dy, double* db, int B, int O, bool acc) {
  for (int o = 0; o < O; ++o) detail::col_sum_one(dy, db, B, O, acc, o);
}

void conv1d(const double* x, const double* k, const double* bias, double* y,
            int B, int T, int Cin, int F, int w) {
  for (int b = 0; b < B; ++b) detail::conv1d_row(x, k, bias, y, T, Cin, F, w, b);
}

void conv1d_dx(const double* dy, const double* k, double* dx, int B, int T,
               int Cin, int F, int w, bool acc) {
  for (int b = 0; b < B; ++b)
    detail::conv1d_dx_row(dy, k, dx, T, Cin, F, w, acc, b);
}

void conv1d_dk(const double* dy, const double* x, double* dk, double* db,
               int B, int T, int Cin, int F, int w, bool acc) {
  for (int jc = 0; jc < w * Cin; ++jc)
    detail::conv1d_dk_row(dy, x, dk, B, T, Cin, F, w, acc, jc);
  for (int f = 0; f < F; ++f)
    detail::conv1d_db_one(dy, db, B, T - w + 1, F, acc, f);
}

void relu(const double* x, double* y, std::size_t n) {
  detail::relu_range(x, y, 0, n);
}

void relu_dx(const double* x, const double* dy, double* dx, std::size_t n,
             bool acc) {
  detail::relu_dx_range(x, dy, dx, acc, 0, n);
}

void softmax_rows(const double* x, double* y, int B, int M) {
  for (int b = 0; b < B; ++b) detail::softmax_row(x, y, M, b);
}

void softmax_dx(const double* y, const double* dy, double* dx, int B, int M,
                bool acc) {
  for (int b = 0; b < B; ++b) detail::softmax_dx_row(y, dy, dx, M, acc, b);
}

void lstm_point(const double* a, const double* c_prev, double* act, double* c,
                double* h, int B, int H) {
  for (int b = 0; b < B; ++b)
    detail::lstm_point_row(a, c_prev, act, c, h, H, b);
}

void lstm_point_back(const double* act, const double* c_prev, const double* c,
                     const double* dh, const double* dc_in, double* da,
                     double* dc_prev, int B, int H) {
  for (int b = 0; b < B; ++b)
    detail::lstm_point_back_row(act, c_prev, c, dh, dc_in, da, dc_prev, H, b);
}

void fir_filter(const cplx* x, const cplx* taps, cplx* y, std::size_t n,
                std::size_t n_taps) {
  detail::fir_range(x, taps, y, n_taps, 0, n);
}

void awgn(const cplx* x, cplx* y, std::size_t n, double sigma2,
          const CounterRng& rng) {
  if (sigma2 <= 0.0) {
    std::memmove(y, x, n * sizeof(cplx));
    return;
  }
  detail::awgn_range(x, y, std::sqrt(sigma2 / 2.0), rng, 0, n);
}

}  // namespace ref

namespace par {

void matmul(const double* x, const double* w, double* y, int B, int I, int O,
            bool acc) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) detail::matmul_row(x, w, y, I, O, acc, b);
}

void add_bias_rows(double* y, const double* bias, int B, int O) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) detail::bias_row(y, bias, O, b);
}

void matmul_dx(const double* dy, const double* w, double* dx, int B, int I,
               int O, bool acc) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) detail::matmul_dx_row(dy, w, dx, I, O, acc, b);
}

void matmul_dw(const double* dy, const double* x, double* dw, int B, int I,
               int O, bool acc) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < I; ++i) detail::matmul_dw_row(dy, x, dw, B, I, O, acc, i);
}

void col_sums(const double* dy, double* db, int B, int O, bool acc) {
#pragma omp parallel for schedule(static)
  for (int o = 0; o < O; ++o) detail::col_sum_one(dy, db, B, O, acc, o);
}

void conv1d(const double* x, const double* k, const double* bias, double* y,
            int B, int T, int Cin, int F, int w) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) detail::conv1d_row(x, k, bias, y, T, Cin, F, w, b);
}

void conv1d_dx(const double* dy, const double* k, double* dx, int B, int T,
               int Cin, int F, int w, bool acc) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b)
    detail::conv1d_dx_row(dy, k, dx, T, Cin, F, w, acc, b);
}

void conv1d_dk(const double* dy, const double* x, double* dk, double* db,
               int B, int T, int Cin, int F, int w, bool acc) {
#pragma omp parallel for schedule(static)
  for (int jc = 0; jc < w * Cin; ++jc)
    detail::conv1d_dk_row(dy, x, dk, B, T, Cin, F, w, acc, jc);
#pragma omp parallel for schedule(static)
  for (int f = 0; f < F; ++f)
    detail::conv1d_db_one(dy, db, B, T - w + 1, F, acc, f);
}

void relu(const double* x, double* y, std::size_t n) {
  omp_ranges(n, [&](std::size_t lo, std::size_t hi) {
    detail::relu_range(x, y, lo, hi);
  });
}

void relu_dx(const double* x, const double* dy, double* dx, std::size_t n,
             bool acc) {
  omp_ranges(n, [&](std::size_t lo, std::size_t hi) {
    detail::relu_dx_range(x, dy, dx, acc, lo, hi);
  });
}

void softmax_rows(const double* x, double* y, int B, int M) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) detail::softmax_row(x, y, M, b);
}

void softmax_dx(const double* y, const double* dy, double* dx, int B, int M,
                bool acc) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) detail::softmax_dx_row(y, dy, dx, M, acc, b);
}

void lstm_point(const double* a, const double* c_prev, double* act, double* c,
                double* h, int B, int H) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b)
    detail::lstm_point_row(a, c_prev, act, c, h, H, b);
}

void lstm_point_back(const double* act, const double* c_prev, const double* c,
                     const double* dh, const double* dc_in, double* da,
                     double* dc_prev, int B, int H) {
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b)
    detail::lstm_point_back_row(act, c_prev, c, dh, dc_in, da, dc_prev, H, b);
}

void fir_filter(const cplx* x, const cplx* taps, cplx* y, std::size_t n,
                std::size_t n_taps) {
  omp_ranges(n, [&](std::size_t lo, std::size_t hi) {
    detail::fir_range(x, taps, y, n_taps, lo, hi);
  });
}

void awgn(const cplx* x, cplx* y, std::size_t n, double sigma2,
          const CounterRng& rng) {
  if (sigma2 <= 0.0) {
    std::memmove(y, x, n * sizeof(cplx));
    return;
  }
  const double sd = std::sqrt(sigma2 / 2.0);
  omp_ranges(n, [&](std::size_t lo, std::size_t hi) {
    detail::awgn_range(x, y, sd, rng, lo, hi);
  });
}

}  // namespace par

#define MAFENN_DISPATCH(fn, ...) \
  (parallel_enabled() ? par::fn(__VA_ARGS__) : ref::fn(__VA_ARGS__))

void matmul(const double* x, const double* w, double* y, int B, int I, int O,
            bool acc) {
  MAFENN_DISPATCH(matmul, x, w, y, B, I, O, acc);
}
void add_bias_rows(double* y, const double* bias, int B, int O) {
  MAFENN_DISPATCH(add_bias_rows, y, bias, B, O);
}
void matmul_dx(const double* dy, const double* w, double* dx, int B, int I,
               int O, bool acc) {
  MAFENN_DISPATCH(matmul_dx, dy, w, dx, B, I, O, acc);
}
void matmul_dw(const double* dy, const double* x, double* dw, int B, int I,
               int O, bool acc) {
  MAFENN_DISPATCH(matmul_dw, dy, x, dw, B, I, O, acc);
}
void col_sums(const double* dy, double* db, int B, int O, bool acc) {
  MAFENN_DISPATCH(col_sums, dy, db, B, O, acc);
}
void conv1d(const double* x, const double* k, const double* bias, double* y,
            int B, int T, int Cin, int F, int w) {
  MAFENN_DISPATCH(conv1d, x, k, bias, y, B, T, Cin, F, w);
}
void conv1d_dx(const double* dy, const double* k, double* dx, int B, int T,
               int Cin, int F, int w, bool acc) {
  MAFENN_DISPATCH(conv1d_dx, dy, k, dx, B, T, Cin, F, w, acc);
}
void conv1d_dk(const double* dy, const double* x, double* dk, double* db,
               int B, int T, int Cin, int F, int w, bool acc) {
  MAFENN_DISPATCH(conv1d_dk, dy, x, dk, db, B, T, Cin, F, w, acc);
}
void relu(const double* x, double* y, std::size_t n) {
  MAFENN_DISPATCH(relu, x, y, n);
}
void relu_dx(const double* x, const double* dy, double* dx, std::size_t n,
             bool acc) {
  MAFENN_DISPATCH(relu_dx, x, dy, dx, n, acc);
}
void softmax_rows(const double* x, double* y, int B, int M) {
  MAFENN_DISPATCH(softmax_rows, x, y, B, M);
}
void softmax_dx(const double* y, const double* dy, double* dx, int B, int M,
                bool acc) {
  MAFENN_DISPATCH(softmax_dx, y, dy, dx, B, M, acc);
}
void lstm_point(const double* a, const double* c_prev, double* act, double* c,
                double* h, int B, int H) {
  MAFENN_DISPATCH(lstm_point, a, c_prev, act, c, h, B, H);
}
void lstm_point_back(const double* act, const double* c_prev, const double* c,
                     const double* dh, const double* dc_in, double* da,
                     double* dc_prev, int B, int H) {
  MAFENN_DISPATCH(lstm_point_back, act, c_prev, c, dh, dc_in, da, dc_prev, B,
                  H);
}
void fir_filter(const cplx* x, const cplx* taps, cplx* y, std::size_t n,
                std::size_t n_taps) {
  MAFENN_DISPATCH(fir_filter, x, taps, y, n, n_taps);
}
void awgn(const cplx* x, cplx* y, std::size_t n, double sigma2,
          const CounterRng& rng) {
  MAFENN_DISPATCH(awgn, x, y, n, sigma2, rng);
}

#undef MAFENN_DISPATCH

}  // namespace mafenn::kernels
