#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "mafenn/rng.hpp"
#include "mafenn/tensor.hpp"

namespace mafenn {

using IQ = std::complex<double>;

// Gray-mapped unit-energy QPSK.  Class indices follow the Gray code value
// of the bit pair: 00 -> 0, 01 -> 1, 11 -> 2, 10 -> 3, so neighboring
// constellation points differ in one bit.
inline constexpr int kNumClasses = 4;
const IQ* qpsk_constellation();  // [kNumClasses]

std::vector<IQ> qpsk_modulate(const std::vector<int>& bits);
IQ qpsk_point(int cls);
int qpsk_class(IQ s);  // nearest point, ties -> smallest class index

struct ChannelTaps {
  std::vector<IQ> taps;

  // Identity channel: a single unit tap.
  static ChannelTaps identity();
  // The 10-tap mixed-phase multipath response used by the equalization
  // experiments.  Its dominant tap sits at index 4, so the channel has
  // both precursor and postcursor ISI.
  static ChannelTaps multipath10();

  // Index of the strongest tap; the natural decision delay.
  int main_tap() const;
};

struct ChannelConfig {
  ChannelTaps taps = ChannelTaps::identity();
  bool nonlinear = false;
  // Total complex noise variance is P_sig / 10^(snr_db/10), with P_sig the
  // empirical mean power of the signal right before noise injection.
  // +infinity means noiseless.
  double snr_db = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  // Which transmitted symbol received[n] is decided as: received[n] is the
  // channel output at time n + decision_delay, so the strongest tap lines
  // up with the symbol of interest.  -1 selects the main tap
  // automatically; 0 disables the shift.
  int decision_delay = -1;
  // The experiments apply taps -> nonlinearity -> AWGN; this flag swaps
  // the last two stages.
  bool noise_before_nonlinearity = false;

  int resolved_delay() const {
    return decision_delay >= 0 ? decision_delay : taps.main_tap();
  }
};

struct TransmissionRecord {
  std::vector<IQ> clean;            // transmitted symbols x_bar
  std::vector<std::uint8_t> labels; // class index per symbol
  std::vector<IQ> received;         // channel output, delay-compensated
  // Diagnostics of the run that produced this record.
  std::uint64_t clamp_count = 0;  // negative |g(v)| occurrences (clamped)
  double sigma2 = 0.0;            // injected complex noise variance
  int decision_delay = 0;

  std::size_t size() const { return clean.size(); }
};

// Causal FIR with zero prehistory: out[n] = sum_k taps[k] * in[n-k].
std::vector<IQ> fir_filter(const std::vector<IQ>& in, const ChannelTaps& taps);

// AM/AM distortion |g(v)| = |v| + 0.2|v|^2 - 0.1|v|^3 + 0.5 cos(pi |v|),
// phase preserved; |v| = 0 maps to (|g(0)|, 0).  Negative magnitudes are
// clamped to their absolute value.
IQ nonlinear_distort(IQ v);
// Bulk variant that counts how often the clamp fired.
std::vector<IQ> nonlinear_distort(const std::vector<IQ>& in,
                                  std::uint64_t* clamp_count);

// Adds circularly symmetric complex Gaussian noise at the given SNR
// relative to the empirical mean power of `in`.  +inf passes through.
// Returns the variance actually injected via *sigma2_out if non-null.
std::vector<IQ> awgn(const std::vector<IQ>& in, double snr_db,
                     const CounterRng& rng, double* sigma2_out = nullptr);

// End-to-end generation: i.i.d. bits -> QPSK -> taps -> optional
// nonlinearity -> AWGN (order per config), then the decision-delay shift.
TransmissionRecord transmit(const ChannelConfig& config, std::uint64_t length);

struct WindowedExample {
  Tensor raw_window;   // N x 2, row 0 = current sample, rows below older
  Tensor feed_window;  // (K+1) x 2, slot 0 = current raw sample, 1..K zero
  std::uint8_t label = 0;
  IQ clean{0.0, 0.0};
};

// One example per time slot, zero-padded history per Algorithm-style
// windowing: raw_window holds [x(i), x(i-1), ..., x(i-N+1)].
std::vector<WindowedExample> make_windows(const TransmissionRecord& record,
                                          int N, int K);

// Binary dataset persistence (magic "MAFD", little-endian).
void save_dataset(const std::string& path, const TransmissionRecord& record);
TransmissionRecord load_dataset(const std::string& path);

}  // namespace mafenn
