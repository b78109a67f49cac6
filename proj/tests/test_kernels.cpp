#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "mafenn/kernels.hpp"
#include "mafenn/rng.hpp"

using mafenn::CounterRng;
namespace kr = mafenn::kernels;
using cplx = std::complex<double>;

namespace {

std::vector<double> random_vec(std::size_t n, CounterRng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = 2.0 * rng.uniform() - 1.0;
  return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  return true;
}

}  // namespace

TEST_CASE("matmul matches a hand-written triple loop") {
  CounterRng rng{11};
  const int B = 5, I = 7, O = 4;
  auto x = random_vec(B * I, rng);
  auto w = random_vec(I * O, rng);
  std::vector<double> y(B * O, 0.0), expect(B * O, 0.0);
  // Oracle: accumulate in the o-outermost order, i.e. a different loop nest
  // than the kernel uses.
  for (int o = 0; o < O; ++o)
    for (int b = 0; b < B; ++b) {
      double s = 0.0;
      for (int i = 0; i < I; ++i) s += x[b * I + i] * w[i * O + o];
      expect[b * O + o] = s;
    }
  kr::ref::matmul(x.data(), w.data(), y.data(), B, I, O, false);
  for (int i = 0; i < B * O; ++i)
    CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-12));

  // acc=true adds on top of the existing contents.
  std::vector<double> y2(B * O, 1.0);
  kr::ref::matmul(x.data(), w.data(), y2.data(), B, I, O, true);
  for (int i = 0; i < B * O; ++i)
    CHECK(y2[i] == doctest::Approx(1.0 + expect[i]).epsilon(1e-12));
}

TEST_CASE("matmul backward agrees with central differences") {
  CounterRng rng{23};
  const int B = 3, I = 5, O = 4;
  auto x = random_vec(B * I, rng);
  auto w = random_vec(I * O, rng);
  auto gy = random_vec(B * O, rng);  // loss = sum gy .* y
  auto loss = [&](const std::vector<double>& xv,
                  const std::vector<double>& wv) {
    std::vector<double> y(B * O, 0.0);
    kr::ref::matmul(xv.data(), wv.data(), y.data(), B, I, O, false);
    double s = 0.0;
    for (int i = 0; i < B * O; ++i) s += gy[i] * y[i];
    return s;
  };
  std::vector<double> dx(B * I, 0.0), dw(I * O, 0.0), db(O, 0.0);
  kr::ref::matmul_dx(gy.data(), w.data(), dx.data(), B, I, O, false);
  kr::ref::matmul_dw(gy.data(), x.data(), dw.data(), B, I, O, false);
  kr::ref::col_sums(gy.data(), db.data(), B, O, false);
  const double eps = 1e-6;
  for (int i = 0; i < B * I; ++i) {
    auto xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    const double fd = (loss(xp, w) - loss(xm, w)) / (2 * eps);
    CHECK(dx[i] == doctest::Approx(fd).epsilon(1e-6));
  }
  for (int i = 0; i < I * O; ++i) {
    auto wp = w, wm = w;
    wp[i] += eps;
    wm[i] -= eps;
    const double fd = (loss(x, wp) - loss(x, wm)) / (2 * eps);
    CHECK(dw[i] == doctest::Approx(fd).epsilon(1e-6));
  }
  // Bias grad: column sums of gy.
  for (int o = 0; o < O; ++o) {
    double s = 0.0;
    for (int b = 0; b < B; ++b) s += gy[b * O + o];
    CHECK(db[o] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("conv1d matches the cross-correlation definition") {
  CounterRng rng{37};
  const int B = 3, T = 9, Cin = 2, F = 4, w = 3;
  const int Tout = T - w + 1;
  auto x = random_vec(B * T * Cin, rng);
  auto k = random_vec(w * Cin * F, rng);
  auto bias = random_vec(F, rng);
  std::vector<double> y(B * Tout * F, 0.0);
  kr::ref::conv1d(x.data(), k.data(), bias.data(), y.data(), B, T, Cin, F, w);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < Tout; ++t)
      for (int f = 0; f < F; ++f) {
        double s = bias[f];
        for (int j = 0; j < w; ++j)
          for (int c = 0; c < Cin; ++c)
            s += x[(b * T + t + j) * Cin + c] * k[(j * Cin + c) * F + f];
        CHECK(y[(b * Tout + t) * F + f] == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("conv1d backward agrees with central differences") {
  CounterRng rng{41};
  const int B = 2, T = 7, Cin = 3, F = 2, w = 3;
  const int Tout = T - w + 1;
  auto x = random_vec(B * T * Cin, rng);
  auto k = random_vec(w * Cin * F, rng);
  auto bias = random_vec(F, rng);
  auto gy = random_vec(B * Tout * F, rng);
  auto loss = [&](const std::vector<double>& xv, const std::vector<double>& kv,
                  const std::vector<double>& bv) {
    std::vector<double> y(B * Tout * F, 0.0);
    kr::ref::conv1d(xv.data(), kv.data(), bv.data(), y.data(), B, T, Cin, F,
                    w);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += gy[i] * y[i];
    return s;
  };
  std::vector<double> dx(B * T * Cin, 0.0), dk(w * Cin * F, 0.0), db(F, 0.0);
  kr::ref::conv1d_dx(gy.data(), k.data(), dx.data(), B, T, Cin, F, w, false);
  kr::ref::conv1d_dk(gy.data(), x.data(), dk.data(), db.data(), B, T, Cin, F,
                     w, false);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    CHECK(dx[i] ==
          doctest::Approx((loss(xp, k, bias) - loss(xm, k, bias)) / (2 * eps))
              .epsilon(1e-6));
  }
  for (std::size_t i = 0; i < k.size(); ++i) {
    auto kp = k, km = k;
    kp[i] += eps;
    km[i] -= eps;
    CHECK(dk[i] ==
          doctest::Approx((loss(x, kp, bias) - loss(x, km, bias)) / (2 * eps))
              .epsilon(1e-6));
  }
  for (std::size_t i = 0; i < bias.size(); ++i) {
    auto bp = bias, bm = bias;
    bp[i] += eps;
    bm[i] -= eps;
    CHECK(db[i] ==
          doctest::Approx((loss(x, k, bp) - loss(x, k, bm)) / (2 * eps))
              .epsilon(1e-6));
  }
}

TEST_CASE("softmax rows are normalized and match direct evaluation") {
  CounterRng rng{53};
  const int B = 4, M = 6;
  auto x = random_vec(B * M, rng);
  for (auto& v : x) v *= 50.0;  // exercise the max-subtraction path
  std::vector<double> y(B * M, 0.0);
  kr::ref::softmax_rows(x.data(), y.data(), B, M);
  for (int b = 0; b < B; ++b) {
    double mx = x[b * M];
    for (int m = 1; m < M; ++m) mx = std::max(mx, x[b * M + m]);
    double z = 0.0;
    for (int m = 0; m < M; ++m) z += std::exp(x[b * M + m] - mx);
    double rs = 0.0;
    for (int m = 0; m < M; ++m) {
      CHECK(y[b * M + m] ==
            doctest::Approx(std::exp(x[b * M + m] - mx) / z).epsilon(1e-12));
      rs += y[b * M + m];
    }
    CHECK(rs == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax backward agrees with central differences") {
  CounterRng rng{59};
  const int B = 2, M = 5;
  auto x = random_vec(B * M, rng);
  auto gy = random_vec(B * M, rng);
  auto loss = [&](const std::vector<double>& xv) {
    std::vector<double> y(B * M, 0.0);
    kr::ref::softmax_rows(xv.data(), y.data(), B, M);
    double s = 0.0;
    for (int i = 0; i < B * M; ++i) s += gy[i] * y[i];
    return s;
  };
  std::vector<double> y(B * M, 0.0), dx(B * M, 0.0);
  kr::ref::softmax_rows(x.data(), y.data(), B, M);
  kr::ref::softmax_dx(y.data(), gy.data(), dx.data(), B, M, false);
  const double eps = 1e-6;
  for (int i = 0; i < B * M; ++i) {
    auto xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    CHECK(dx[i] ==
          doctest::Approx((loss(xp) - loss(xm)) / (2 * eps)).epsilon(1e-6));
  }
}

TEST_CASE("lstm pointwise forward matches scalar gate arithmetic") {
  CounterRng rng{61};
  const int B = 3, H = 4;
  auto a = random_vec(B * 4 * H, rng);
  auto cp = random_vec(B * H, rng);
  std::vector<double> act(B * 4 * H, 0.0), c(B * H, 0.0), h(B * H, 0.0);
  kr::ref::lstm_point(a.data(), cp.data(), act.data(), c.data(), h.data(), B,
                      H);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < H; ++j) {
      const double gi = sig(a[b * 4 * H + j]);
      const double gf = sig(a[b * 4 * H + H + j]);
      const double gg = std::tanh(a[b * 4 * H + 2 * H + j]);
      const double go = sig(a[b * 4 * H + 3 * H + j]);
      const double cn = gf * cp[b * H + j] + gi * gg;
      CHECK(c[b * H + j] == doctest::Approx(cn).epsilon(1e-12));
      CHECK(h[b * H + j] == doctest::Approx(go * std::tanh(cn)).epsilon(1e-12));
      CHECK(act[b * 4 * H + 2 * H + j] == doctest::Approx(gg).epsilon(1e-12));
    }
}

TEST_CASE("lstm pointwise backward agrees with central differences") {
  CounterRng rng{67};
  const int B = 2, H = 3;
  auto a = random_vec(B * 4 * H, rng);
  auto cp = random_vec(B * H, rng);
  auto dh = random_vec(B * H, rng);
  auto dc = random_vec(B * H, rng);
  auto loss = [&](const std::vector<double>& av,
                  const std::vector<double>& cpv) {
    std::vector<double> act(B * 4 * H), c(B * H), h(B * H);
    kr::ref::lstm_point(av.data(), cpv.data(), act.data(), c.data(), h.data(),
                        B, H);
    double s = 0.0;
    for (int i = 0; i < B * H; ++i) s += dh[i] * h[i] + dc[i] * c[i];
    return s;
  };
  std::vector<double> act(B * 4 * H), c(B * H), h(B * H);
  kr::ref::lstm_point(a.data(), cp.data(), act.data(), c.data(), h.data(), B,
                      H);
  std::vector<double> da(B * 4 * H, 0.0), dcp(B * H, 0.0);
  kr::ref::lstm_point_back(act.data(), cp.data(), c.data(), dh.data(),
                           dc.data(), da.data(), dcp.data(), B, H);
  const double eps = 1e-6;
  for (int i = 0; i < B * 4 * H; ++i) {
    auto ap = a, am = a;
    ap[i] += eps;
    am[i] -= eps;
    CHECK(da[i] ==
          doctest::Approx((loss(ap, cp) - loss(am, cp)) / (2 * eps))
              .epsilon(1e-6));
  }
  for (int i = 0; i < B * H; ++i) {
    auto cpp = cp, cpm = cp;
    cpp[i] += eps;
    cpm[i] -= eps;
    CHECK(dcp[i] ==
          doctest::Approx((loss(a, cpp) - loss(a, cpm)) / (2 * eps))
              .epsilon(1e-6));
  }
}

TEST_CASE("relu forward and subgradient") {
  std::vector<double> x = {-2.0, -0.0, 0.0, 0.5, 3.0};
  std::vector<double> y(x.size()), dy(x.size(), 1.0), dx(x.size(), 0.0);
  kr::ref::relu(x.data(), y.data(), x.size());
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 0.0);
  CHECK(y[3] == 0.5);
  CHECK(y[4] == 3.0);
  kr::ref::relu_dx(x.data(), dy.data(), dx.data(), x.size(), false);
  CHECK(dx[0] == 0.0);
  CHECK(dx[1] == 0.0);  // subgradient 0 exactly at 0
  CHECK(dx[2] == 0.0);
  CHECK(dx[3] == 1.0);
  CHECK(dx[4] == 1.0);
}

TEST_CASE("fir filter matches the convolution sum") {
  CounterRng rng{71};
  const std::size_t n = 32, nt = 5;
  std::vector<cplx> x(n), taps(nt), y(n);
  for (auto& v : x) v = {2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0};
  for (auto& v : taps)
    v = {2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0};
  kr::ref::fir_filter(x.data(), taps.data(), y.data(), n, nt);
  for (std::size_t i = 0; i < n; ++i) {
    cplx s{0.0, 0.0};
    for (std::size_t k = 0; k < nt && k <= i; ++k) s += taps[k] * x[i - k];
    CHECK(std::abs(y[i] - s) < 1e-12);
  }
}

TEST_CASE("awgn statistics and sigma2=0 passthrough") {
  CounterRng rng{0xabcdef};
  const std::size_t n = 200000;
  std::vector<cplx> x(n, cplx{0.0, 0.0}), y(n);
  kr::ref::awgn(x.data(), y.data(), n, 2.0, rng);
  double mr = 0.0, p = 0.0;
  for (auto v : y) {
    mr += v.real() + v.imag();
    p += std::norm(v);
  }
  mr /= 2.0 * n;
  p /= n;
  CHECK(std::abs(mr) < 0.01);
  CHECK(p == doctest::Approx(2.0).epsilon(0.02));

  std::vector<cplx> x2(8, cplx{1.0, -1.0}), y2(8);
  kr::ref::awgn(x2.data(), y2.data(), 8, 0.0, rng);
  for (std::size_t i = 0; i < 8; ++i) CHECK(y2[i] == x2[i]);
}

TEST_CASE("awgn noise depends on the counter, not evaluation order") {
  CounterRng rng{99};
  const std::size_t n = 64;
  std::vector<cplx> x(n, cplx{0.5, 0.5}), full(n), tail(n);
  kr::ref::awgn(x.data(), full.data(), n, 1.0, rng);
  // Regenerating any prefix must reproduce the same samples.
  kr::ref::awgn(x.data(), tail.data(), n / 2, 1.0, rng);
  for (std::size_t i = 0; i < n / 2; ++i) CHECK(full[i] == tail[i]);
}

TEST_CASE("parallel kernels are bitwise identical to the serial reference") {
  CounterRng rng{0x5eed};
  // Odd sizes on purpose so static scheduling gets uneven chunks.
  const int B = 13, I = 17, O = 11, T = 23, Cin = 3, F = 7, w = 3, H = 9;
  const int Tout = T - w + 1;
  auto x = random_vec(B * I, rng);
  auto wgt = random_vec(I * O, rng);
  auto bias = random_vec(O, rng);
  auto gy = random_vec(B * O, rng);

  std::vector<double> a(B * O, 0.0), b(B * O, 0.0);
  kr::ref::matmul(x.data(), wgt.data(), a.data(), B, I, O, false);
  kr::par::matmul(x.data(), wgt.data(), b.data(), B, I, O, false);
  CHECK(bitwise_equal(a, b));
  kr::ref::add_bias_rows(a.data(), bias.data(), B, O);
  kr::par::add_bias_rows(b.data(), bias.data(), B, O);
  CHECK(bitwise_equal(a, b));

  std::vector<double> dxa(B * I, 0.5), dxb(B * I, 0.5);
  kr::ref::matmul_dx(gy.data(), wgt.data(), dxa.data(), B, I, O, true);
  kr::par::matmul_dx(gy.data(), wgt.data(), dxb.data(), B, I, O, true);
  CHECK(bitwise_equal(dxa, dxb));

  std::vector<double> dwa(I * O, 0.25), dwb(I * O, 0.25);
  kr::ref::matmul_dw(gy.data(), x.data(), dwa.data(), B, I, O, true);
  kr::par::matmul_dw(gy.data(), x.data(), dwb.data(), B, I, O, true);
  CHECK(bitwise_equal(dwa, dwb));

  std::vector<double> dba(O, 0.0), dbb(O, 0.0);
  kr::ref::col_sums(gy.data(), dba.data(), B, O, false);
  kr::par::col_sums(gy.data(), dbb.data(), B, O, false);
  CHECK(bitwise_equal(dba, dbb));

  auto cx = random_vec(B * T * Cin, rng);
  auto ck = random_vec(w * Cin * F, rng);
  auto cb = random_vec(F, rng);
  auto cgy = random_vec(B * Tout * F, rng);
  std::vector<double> ca(B * Tout * F, 0.0), cbv(B * Tout * F, 0.0);
  kr::ref::conv1d(cx.data(), ck.data(), cb.data(), ca.data(), B, T, Cin, F, w);
  kr::par::conv1d(cx.data(), ck.data(), cb.data(), cbv.data(), B, T, Cin, F,
                  w);
  CHECK(bitwise_equal(ca, cbv));

  std::vector<double> cdxa(B * T * Cin, 0.0), cdxb(B * T * Cin, 0.0);
  kr::ref::conv1d_dx(cgy.data(), ck.data(), cdxa.data(), B, T, Cin, F, w,
                     false);
  kr::par::conv1d_dx(cgy.data(), ck.data(), cdxb.data(), B, T, Cin, F, w,
                     false);
  CHECK(bitwise_equal(cdxa, cdxb));

  std::vector<double> cdka(w * Cin * F, 0.0), cdkb(w * Cin * F, 0.0);
  std::vector<double> cdba(F, 0.0), cdbb(F, 0.0);
  kr::ref::conv1d_dk(cgy.data(), cx.data(), cdka.data(), cdba.data(), B, T,
                     Cin, F, w, false);
  kr::par::conv1d_dk(cgy.data(), cx.data(), cdkb.data(), cdbb.data(), B, T,
                     Cin, F, w, false);
  CHECK(bitwise_equal(cdka, cdkb));
  CHECK(bitwise_equal(cdba, cdbb));

  auto sx = random_vec(B * O, rng);
  std::vector<double> sa(B * O, 0.0), sb(B * O, 0.0);
  kr::ref::softmax_rows(sx.data(), sa.data(), B, O);
  kr::par::softmax_rows(sx.data(), sb.data(), B, O);
  CHECK(bitwise_equal(sa, sb));
  std::vector<double> sdxa(B * O, 0.0), sdxb(B * O, 0.0);
  kr::ref::softmax_dx(sa.data(), gy.data(), sdxa.data(), B, O, false);
  kr::par::softmax_dx(sb.data(), gy.data(), sdxb.data(), B, O, false);
  CHECK(bitwise_equal(sdxa, sdxb));

  auto la = random_vec(B * 4 * H, rng);
  auto lcp = random_vec(B * H, rng);
  auto ldh = random_vec(B * H, rng);
  auto ldc = random_vec(B * H, rng);
  std::vector<double> acta(B * 4 * H), actb(B * 4 * H), c1(B * H), c2(B * H),
      h1(B * H), h2(B * H);
  kr::ref::lstm_point(la.data(), lcp.data(), acta.data(), c1.data(), h1.data(),
                      B, H);
  kr::par::lstm_point(la.data(), lcp.data(), actb.data(), c2.data(), h2.data(),
                      B, H);
  CHECK(bitwise_equal(acta, actb));
  CHECK(bitwise_equal(c1, c2));
  CHECK(bitwise_equal(h1, h2));
  std::vector<double> da1(B * 4 * H, 0.0), da2(B * 4 * H, 0.0), dcp1(B * H),
      dcp2(B * H);
  kr::ref::lstm_point_back(acta.data(), lcp.data(), c1.data(), ldh.data(),
                           ldc.data(), da1.data(), dcp1.data(), B, H);
  kr::par::lstm_point_back(actb.data(), lcp.data(), c2.data(), ldh.data(),
                           ldc.data(), da2.data(), dcp2.data(), B, H);
  CHECK(bitwise_equal(da1, da2));
  CHECK(bitwise_equal(dcp1, dcp2));

  std::vector<double> ra(B * I), rb(B * I);
  kr::ref::relu(x.data(), ra.data(), B * I);
  kr::par::relu(x.data(), rb.data(), B * I);
  CHECK(bitwise_equal(ra, rb));

  const std::size_t n = 257;
  std::vector<cplx> fx(n), taps(7), fya(n), fyb(n);
  for (auto& v : fx) v = {rng.normal(), rng.normal()};
  for (auto& v : taps) v = {rng.normal(), rng.normal()};
  kr::ref::fir_filter(fx.data(), taps.data(), fya.data(), n, taps.size());
  kr::par::fir_filter(fx.data(), taps.data(), fyb.data(), n, taps.size());
  for (std::size_t i = 0; i < n; ++i) CHECK(fya[i] == fyb[i]);

  CounterRng nrng{77};
  std::vector<cplx> nya(n), nyb(n);
  kr::ref::awgn(fx.data(), nya.data(), n, 0.7, nrng);
  kr::par::awgn(fx.data(), nyb.data(), n, 0.7, nrng);
  for (std::size_t i = 0; i < n; ++i) CHECK(nya[i] == nyb[i]);
}

TEST_CASE("dispatcher honors the parallel flag") {
  CHECK(kr::parallel_enabled());
  kr::set_parallel(false);
  CHECK_FALSE(kr::parallel_enabled());
  kr::set_parallel(true);
  CHECK(kr::parallel_enabled());
}
