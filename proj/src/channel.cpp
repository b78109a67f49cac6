#include "mafenn/channel.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "mafenn/kernels.hpp"

namespace mafenn {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr char kDatasetMagic[4] = {'M', 'A', 'F', 'D'};

// Gray decode of the bit pair (g1, g0) to the class index.
inline int gray_class(int g1, int g0) { return (g1 << 1) | (g1 ^ g0); }

}  // namespace

const IQ* qpsk_constellation() {
  static const IQ points[kNumClasses] = {
      {M_SQRT1_2, M_SQRT1_2},    // class 0, bits 00
      {M_SQRT1_2, -M_SQRT1_2},   // class 1, bits 01
      {-M_SQRT1_2, -M_SQRT1_2},  // class 2, bits 11
      {-M_SQRT1_2, M_SQRT1_2},   // class 3, bits 10
  };
  return points;
}

IQ qpsk_point(int cls) { return qpsk_constellation()[cls]; }

std::vector<IQ> qpsk_modulate(const std::vector<int>& bits) {
  if (bits.size() % 2 != 0)
    throw std::invalid_argument("qpsk_modulate: odd bit count");
  std::vector<IQ> out;
  out.reserve(bits.size() / 2);
  for (std::size_t i = 0; i < bits.size(); i += 2) {
    out.push_back(qpsk_point(gray_class(bits[i] & 1, bits[i + 1] & 1)));
  }
  return out;
}

int qpsk_class(IQ s) {
  const IQ* pts = qpsk_constellation();
  int best = 0;
  double best_d = std::norm(s - pts[0]);
  for (int c = 1; c < kNumClasses; ++c) {
    const double d = std::norm(s - pts[c]);
    if (d < best_d) {  // strict: ties keep the smaller index
      best_d = d;
      best = c;
    }
  }
  return best;
}

ChannelTaps ChannelTaps::identity() { return {{IQ{1.0, 0.0}}}; }

ChannelTaps ChannelTaps::multipath10() {
  return {{
      {0.0410, 0.0109},
      {0.0495, 0.0123},
      {0.0672, 0.0170},
      {0.0919, 0.0235},
      {0.7920, 0.1281},
      {0.3960, 0.0871},
      {0.2715, 0.0498},
      {0.2291, 0.0414},
      {0.1287, 0.0154},
      {0.1032, 0.0119},
  }};
}

int ChannelTaps::main_tap() const {
  int best = 0;
  double best_m = std::norm(taps[0]);
  for (std::size_t k = 1; k < taps.size(); ++k) {
    if (std::norm(taps[k]) > best_m) {
      best_m = std::norm(taps[k]);
      best = static_cast<int>(k);
    }
  }
  return best;
}

std::vector<IQ> fir_filter(const std::vector<IQ>& in, const ChannelTaps& taps) {
  if (taps.taps.empty()) throw std::invalid_argument("fir_filter: empty taps");
  std::vector<IQ> out(in.size());
  kernels::fir_filter(in.data(), taps.taps.data(), out.data(), in.size(),
                      taps.taps.size());
  return out;
}

IQ nonlinear_distort(IQ v) {
  const double m = std::abs(v);
  double g = m + 0.2 * m * m - 0.1 * m * m * m + 0.5 * std::cos(M_PI * m);
  if (g < 0.0) g = -g;
  if (m == 0.0) return {g, 0.0};
  return v * (g / m);
}

std::vector<IQ> nonlinear_distort(const std::vector<IQ>& in,
                                  std::uint64_t* clamp_count) {
  std::vector<IQ> out(in.size());
  std::uint64_t clamps = 0;
#pragma omp parallel for schedule(static) reduction(+ : clamps)
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double m = std::abs(in[i]);
    double g = m + 0.2 * m * m - 0.1 * m * m * m + 0.5 * std::cos(M_PI * m);
    if (g < 0.0) {
      g = -g;
      ++clamps;
    }
    out[i] = m == 0.0 ? IQ{g, 0.0} : in[i] * (g / m);
  }
  if (clamp_count) *clamp_count += clamps;
  return out;
}

std::vector<IQ> awgn(const std::vector<IQ>& in, double snr_db,
                     const CounterRng& rng, double* sigma2_out) {
  std::vector<IQ> out(in.size());
  if (std::isinf(snr_db) && snr_db > 0.0) {
    if (sigma2_out) *sigma2_out = 0.0;
    std::copy(in.begin(), in.end(), out.begin());
    return out;
  }
  double p_sig = 0.0;
  for (const IQ& v : in) p_sig += std::norm(v);
  p_sig /= static_cast<double>(in.size());
  const double sigma2 = p_sig / std::pow(10.0, snr_db / 10.0);
  if (sigma2_out) *sigma2_out = sigma2;
  kernels::awgn(in.data(), out.data(), in.size(), sigma2, rng);
  return out;
}

TransmissionRecord transmit(const ChannelConfig& config, std::uint64_t length) {
  const int delay = config.resolved_delay();
  const std::uint64_t total = length + static_cast<std::uint64_t>(delay);

  // Two independent counter streams so bit and noise draws never collide.
  CounterRng bit_rng{derive_seed(config.seed, "bits")};
  CounterRng noise_rng{derive_seed(config.seed, "noise")};

  TransmissionRecord rec;
  rec.decision_delay = delay;
  rec.clean.resize(total);
  rec.labels.resize(total);
  for (std::uint64_t i = 0; i < total; ++i) {
    // One i.i.d. bit per counter, two counters per symbol.
    const int g1 = static_cast<int>(bit_rng.at(2 * i) >> 63);
    const int g0 = static_cast<int>(bit_rng.at(2 * i + 1) >> 63);
    const int cls = gray_class(g1, g0);
    rec.labels[i] = static_cast<std::uint8_t>(cls);
    rec.clean[i] = qpsk_point(cls);
  }

  std::vector<IQ> y = fir_filter(rec.clean, config.taps);
  if (config.nonlinear && config.noise_before_nonlinearity) {
    y = awgn(y, config.snr_db, noise_rng, &rec.sigma2);
    y = nonlinear_distort(y, &rec.clamp_count);
  } else if (config.nonlinear) {
    y = nonlinear_distort(y, &rec.clamp_count);
    y = awgn(y, config.snr_db, noise_rng, &rec.sigma2);
  } else {
    y = awgn(y, config.snr_db, noise_rng, &rec.sigma2);
  }

  // Decision-delay shift: received[i] is the channel output at i + delay,
  // where the strongest tap carries clean[i].
  rec.received.assign(y.begin() + delay, y.end());
  rec.clean.resize(length);
  rec.labels.resize(length);
  return rec;
}

std::vector<WindowedExample> make_windows(const TransmissionRecord& record,
                                          int N, int K) {
  if (N < 1) throw std::invalid_argument("make_windows: N must be >= 1");
  if (K < 0) throw std::invalid_argument("make_windows: K must be >= 0");
  const std::size_t L = record.size();
  std::vector<WindowedExample> out(L);
  for (std::size_t i = 0; i < L; ++i) {
    WindowedExample& ex = out[i];
    ex.raw_window = Tensor({N, 2});
    for (int r = 0; r < N; ++r) {
      const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) - r;
      if (j >= 0) {
        ex.raw_window(r, 0) = record.received[j].real();
        ex.raw_window(r, 1) = record.received[j].imag();
      }
    }
    ex.feed_window = Tensor({K + 1, 2});
    ex.feed_window(0, 0) = record.received[i].real();
    ex.feed_window(0, 1) = record.received[i].imag();
    ex.label = record.labels[i];
    ex.clean = record.clean[i];
  }
  return out;
}

namespace {

template <typename T>
void put(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const TransmissionRecord& record) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_dataset: cannot open " + path);
  f.write(kDatasetMagic, 4);
  put(f, kDatasetVersion);
  put(f, static_cast<std::uint64_t>(record.size()));
  for (std::size_t i = 0; i < record.size(); ++i) {
    put(f, record.clean[i].real());
    put(f, record.clean[i].imag());
    put(f, record.received[i].real());
    put(f, record.received[i].imag());
    put(f, record.labels[i]);
  }
  if (!f) throw std::runtime_error("save_dataset: write failed: " + path);
}

TransmissionRecord load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_dataset: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw std::runtime_error("load_dataset: bad magic in " + path);
  const auto version = get<std::uint32_t>(f);
  if (version != kDatasetVersion)
    throw std::runtime_error("load_dataset: unsupported version");
  const auto L = get<std::uint64_t>(f);
  TransmissionRecord rec;
  rec.clean.resize(L);
  rec.received.resize(L);
  rec.labels.resize(L);
  for (std::uint64_t i = 0; i < L; ++i) {
    const double ci = get<double>(f);
    const double cq = get<double>(f);
    const double ri = get<double>(f);
    const double rq = get<double>(f);
    rec.clean[i] = {ci, cq};
    rec.received[i] = {ri, rq};
    rec.labels[i] = get<std::uint8_t>(f);
  }
  if (!f) throw std::runtime_error("load_dataset: truncated file " + path);
  return rec;
}

}  // namespace mafenn
