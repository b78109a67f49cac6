#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>

#include "mafenn/rng.hpp"

// Hot numeric loops, written twice:
//
//   kernels::ref   straightforward serial loops, the reference semantics
//   kernels::par   OpenMP variants, parallel only across independent output
//                  elements; every reduction keeps the reference's serial
//                  summation order inside one thread
//
// The unqualified functions dispatch on a process-wide flag.  Because no
// parallel variant ever reorders a floating-point reduction, ref and par
// agree bitwise for any thread count — the unit tests and the benchmark
// target hold them to that.
//
// Conventions:
//   - linear weights are stored [in, out] so the forward inner loop is an
//     axpy over the contiguous output row
//   - conv1d is valid-mode cross-correlation over [batch, time, channels]
//     with kernels stored [width, channels, filters] so the inner loop is
//     again an axpy over the filter axis
//   - LSTM gate preactivations are packed [batch, 4*hidden] in gate order
//     input, forget, cell, output

namespace mafenn::kernels {

void set_parallel(bool on);
bool parallel_enabled();

using cplx = std::complex<double>;

namespace ref {

// y[b,o] (+)= sum_i x[b,i] * w[i,o]
void matmul(const double* x, const double* w, double* y, int B, int I, int O,
            bool acc);
// y[b,o] += bias[o]
void add_bias_rows(double* y, const double* bias, int B, int O);
// dx[b,i] (+)= sum_o dy[b,o] * w[i,o]
void matmul_dx(const double* dy, const double* w, double* dx, int B, int I,
               int O, bool acc);
// dw[i,o] (+)= sum_b x[b,i] * dy[b,o]   (serial over b: fixed order)
void matmul_dw(const double* dy, const double* x, double* dw, int B, int I,
               int O, bool acc);
// db[o] (+)= sum_b dy[b,o]
void col_sums(const double* dy, double* db, int B, int O, bool acc);

// y[b,t,f] = bias[f] + sum_{j,c} x[b,t+j,c] * k[j,c,f];  Tout = T - w + 1
void conv1d(const double* x, const double* k, const double* bias, double* y,
            int B, int T, int Cin, int F, int w);
// dx[b,t+j,c] (+)= sum_f dy[b,t,f] * k[j,c,f]
void conv1d_dx(const double* dy, const double* k, double* dx, int B, int T,
               int Cin, int F, int w, bool acc);
// dk[j,c,f] (+)= sum_{b,t} dy[b,t,f] * x[b,t+j,c];  db[f] (+)= sum dy
void conv1d_dk(const double* dy, const double* x, double* dk, double* db,
               int B, int T, int Cin, int F, int w, bool acc);

void relu(const double* x, double* y, std::size_t n);
// Subgradient 0 at x == 0.
void relu_dx(const double* x, const double* dy, double* dx, std::size_t n,
             bool acc);

// Row-wise softmax with max subtraction, x and y [B, M].
void softmax_rows(const double* x, double* y, int B, int M);
// dx[b,m] (+)= y[b,m] * (dy[b,m] - sum_j dy[b,j] y[b,j])
void softmax_dx(const double* y, const double* dy, double* dx, int B, int M,
                bool acc);

// Pointwise LSTM cell given packed gate preactivations a [B,4H] and c_prev
// [B,H].  Writes activated gates act [B,4H] (kept for backward), new cell
// state c [B,H] and hidden state h [B,H].
void lstm_point(const double* a, const double* c_prev, double* act, double* c,
                double* h, int B, int H);
// Backward of the pointwise part: dh, dc_in are gradients w.r.t. h and c;
// produces gate preactivation grads da [B,4H] and dc_prev [B,H].
void lstm_point_back(const double* act, const double* c_prev, const double* c,
                     const double* dh, const double* dc_in, double* da,
                     double* dc_prev, int B, int H);

// y[n] = sum_k taps[k] * x[n-k], x[<0] = 0.
void fir_filter(const cplx* x, const cplx* taps, cplx* y, std::size_t n,
                std::size_t n_taps);

// y[i] = x[i] + noise, noise ~ CN(0, sigma2) drawn from rng counters
// (2i, 2i+1) so the result is independent of evaluation order.
void awgn(const cplx* x, cplx* y, std::size_t n, double sigma2,
          const CounterRng& rng);

}  // namespace ref

namespace par {

void matmul(const double* x, const double* w, double* y, int B, int I, int O,
            bool acc);
void add_bias_rows(double* y, const double* bias, int B, int O);
void matmul_dx(const double* dy, const double* w, double* dx, int B, int I,
               int O, bool acc);
void matmul_dw(const double* dy, const double* x, double* dw, int B, int I,
               int O, bool acc);
void col_sums(const double* dy, double* db, int B, int O, bool acc);
void conv1d(const double* x, const double* k, const double* bias, double* y,
            int B, int T, int Cin, int F, int w);
void conv1d_dx(const double* dy, const double* k, double* dx, int B, int T,
               int Cin, int F, int w, bool acc);
void conv1d_dk(const double* dy, const double* x, double* dk, double* db,
               int B, int T, int Cin, int F, int w, bool acc);
void relu(const double* x, double* y, std::size_t n);
void relu_dx(const double* x, const double* dy, double* dx, std::size_t n,
             bool acc);
void softmax_rows(const double* x, double* y, int B, int M);
void softmax_dx(const double* y, const double* dy, double* dx, int B, int M,
                bool acc);
void lstm_point(const double* a, const double* c_prev, double* act, double* c,
                double* h, int B, int H);
void lstm_point_back(const double* act, const double* c_prev, const double* c,
                     const double* dh, const double* dc_in, double* da,
                     double* dc_prev, int B, int H);
void fir_filter(const cplx* x, const cplx* taps, cplx* y, std::size_t n,
                std::size_t n_taps);
void awgn(const cplx* x, cplx* y, std::size_t n, double sigma2,
          const CounterRng& rng);

}  // namespace par

// Dispatchers.
void matmul(const double* x, const double* w, double* y, int B, int I, int O,
            bool acc);
void add_bias_rows(double* y, const double* bias, int B, int O);
void matmul_dx(const double* dy, const double* w, double* dx, int B, int I,
               int O, bool acc);
void matmul_dw(const double* dy, const double* x, double* dw, int B, int I,
               int O, bool acc);
void col_sums(const double* dy, double* db, int B, int O, bool acc);
void conv1d(const double* x, const double* k, const double* bias, double* y,
            int B, int T, int Cin, int F, int w);
void conv1d_dx(const double* dy, const double* k, double* dx, int B, int T,
               int Cin, int F, int w, bool acc);
void conv1d_dk(const double* dy, const double* x, double* dk, double* db,
               int B, int T, int Cin, int F, int w, bool acc);
void relu(const double* x, double* y, std::size_t n);
void relu_dx(const double* x, const double* dy, double* dx, std::size_t n,
             bool acc);
void softmax_rows(const double* x, double* y, int B, int M);
void softmax_dx(const double* y, const double* dy, double* dx, int B, int M,
                bool acc);
void lstm_point(const double* a, const double* c_prev, double* act, double* c,
                double* h, int B, int H);
void lstm_point_back(const double* act, const double* c_prev, const double* c,
                     const double* dh, const double* dc_in, double* da,
                     double* dc_prev, int B, int H);
void fir_filter(const cplx* x, const cplx* taps, cplx* y, std::size_t n,
                std::size_t n_taps);
void awgn(const cplx* x, cplx* y, std::size_t n, double sigma2,
          const CounterRng& rng);

}  // namespace mafenn::kernels
