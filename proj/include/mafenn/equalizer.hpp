#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mafenn/channel.hpp"
#include "mafenn/tape.hpp"
#include "mafenn/tensor.hpp"

namespace mafenn {

// How the feedback window is combined with the raw window before the
// encoder: kConcat stacks both (rows = K+1+N), kReplace substitutes the
// feedback values for the first K+1 raw rows (rows = N, needs K+1 <= N).
enum class CombineMode { kConcat, kReplace };

// What fills the feedback history slots during training and streaming
// evaluation: the feedbacker's recovered value, or the hard decision
// mapped back to its constellation point (the simple-loop variant).
enum class FeedbackSource { kFeedbacker, kHardDecision };

// kStackelberg is the two-phase schedule described at train_step below;
// kJoint collapses it to one update of every parameter on l1 at a single
// rate (lambda3), the no-game baseline.
enum class TrainingMode { kStackelberg, kJoint };

enum class OptimizerKind { kSgd, kAdam };

struct EqualizerConfig {
  int raw_window = 12;  // N: received samples per example, row 0 newest
  int feed_window = 6;  // K: past recovered values kept as history
  int cycles = 5;       // C: encoder/feedbacker refinements per slot
  int latent_dim = 128;
  double beta = 1.0;  // leader loss l1 = l2 + beta * l3
  CombineMode combine = CombineMode::kConcat;
  FeedbackSource feedback = FeedbackSource::kFeedbacker;

  // Per-player step sizes; the follower must adapt fastest.
  double lambda1 = 0.01;
  double lambda2 = 0.02;
  double lambda3 = 0.04;

  std::vector<int> conv_filters{16, 32, 64};
  std::vector<int> conv_widths{3, 3, 3};
  int lstm_hidden = 64;
  int feedbacker_hidden = 64;
  int processor_hidden = 64;
  int mlp_hidden = 64;  // width of the three MLP baseline hidden layers

  int batch = 32;
  int epochs = 1;           // passes over the training stream
  int pretrain_epochs = 1;  // reconstruction-only warmup passes
  bool teacher_forcing = false;  // clean symbols as training history
  bool full_unroll = false;      // tape every cycle, not just the last
  TrainingMode training = TrainingMode::kStackelberg;
  OptimizerKind optimizer = OptimizerKind::kSgd;

  // Rows of the encoder input matrix under `combine`.
  int encoder_rows() const {
    return combine == CombineMode::kConcat ? raw_window + feed_window + 1
                                           : raw_window;
  }
  // Time steps surviving the valid convolution stack.
  int conv_out_rows() const;
  // Throws std::invalid_argument on any violated constraint.
  void validate() const;
};

// Small architecture that trains in seconds on one core; same topology,
// reduced widths.  Used by the fast experiments and the acceptance runs.
EqualizerConfig desk_config();
// The pure feedforward variant: no cycles, no history.
EqualizerConfig feedforward_config(EqualizerConfig base);
// The simple-loop variant: no refinement cycles, history holds the
// stream's own past hard decisions instead of feedbacker output.
EqualizerConfig simple_loop_config(EqualizerConfig base);

// Serialization of the config as kv text (exact round trip).
std::string format_config(const EqualizerConfig& cfg);
EqualizerConfig parse_config(const std::string& text);

// One training batch: `window` is the combined encoder input per example
// with row 0 holding the feedback slot (initialized to the raw current
// sample), `clean` the transmitted symbols, `labels` their classes.
struct Batch {
  Tensor window;  // [B, encoder_rows, 2]
  Tensor clean;   // [B, 2]
  std::vector<int> labels;
};

// First and second moment estimates for the adaptive optimizer; empty
// until the first step under OptimizerKind::kAdam.
struct AdamState {
  std::vector<Tensor> m, v;
  long t = 0;
};

// The three-agent equalizer.  Parameters live in one ParamSet per agent;
// all forward passes run through the autodiff tape so training and
// inference share one implementation.
class MafennModel {
 public:
  MafennModel(const EqualizerConfig& cfg, std::uint64_t seed);

  const EqualizerConfig& config() const { return cfg_; }
  ParamSet& encoder() { return encoder_; }
  ParamSet& feedbacker() { return feedbacker_; }
  ParamSet& processor() { return processor_; }
  const ParamSet& encoder() const { return encoder_; }
  const ParamSet& feedbacker() const { return feedbacker_; }
  const ParamSet& processor() const { return processor_; }

  // Node ids of the staged parameter leafs on one tape.
  struct Staged {
    std::vector<int> enc, feed, proc;
  };
  // Leafs every parameter tensor onto `tape`; the *_grads flags decide
  // which players receive gradients from a later backward().
  Staged stage(Tape& tape, bool encoder_grads, bool feedbacker_grads,
               bool processor_grads) const;

  // Forward pass node ids for one batch.  l2/xhat are -1 when cycles == 0
  // (the feedbacker never runs); l1 = l2 + beta * l3.
  struct BatchForward {
    int xhat = -1;  // [B,2] recovered value after the last cycle
    int probs = -1; // [B,4]
    int l2 = -1, l3 = -1, l1 = -1;
  };
  // Runs the refinement cycles and the decision pass on `tape`.  Earlier
  // cycles are evaluated to values only (no gradient path) unless
  // full_unroll is set; the last cycle and the decision pass are always
  // differentiable.  Labels may be null to skip the losses.
  BatchForward build_forward(Tape& tape, const Staged& staged,
                             const Batch& batch,
                             const std::vector<int>* labels) const;

  // One slot of streaming inference.  `history` holds the most recent
  // recovered values, newest first; missing entries count as zero.
  struct SlotResult {
    std::array<double, kNumClasses> probs{};
    int decision = 0;
    IQ recovered{0.0, 0.0};  // feedback value after the last cycle
  };
  SlotResult infer(const WindowedExample& ex,
                   const std::vector<IQ>& history) const;

  struct StepOutput {
    double l1 = 0.0, l2 = 0.0, l3 = 0.0;  // losses before the updates
    Tensor xhat;   // [B,2] recovered values from the pre-update forward
    Tensor probs;  // [B,4] likewise
  };
  // One training step on `batch`.  Stackelberg mode runs two phases:
  // first the followers step on their own losses at the pre-step
  // parameters (processor on l3 at lambda3, feedbacker on l2 at lambda2),
  // then the encoder steps on l1 = l2 + beta*l3 at lambda1 against the
  // updated followers, whose parameters it treats as constants.  Joint
  // mode updates everything on l1 at lambda3 in a single phase.
  // `after_update(player)` fires right after player's tensors change
  // (2 = processor, 1 = feedbacker, 0 = encoder).  Throws std::runtime_error
  // naming `batch_id` if a loss turns non-finite.
  StepOutput train_step(const Batch& batch, long batch_id = -1,
                        const std::function<void(int)>& after_update = {});

  // Reconstruction-only step: encoder and feedbacker descend l2 jointly
  // at lambda2, the processor is untouched.  Returns l2 with the batch's
  // recovered values; requires cycles >= 1.
  StepOutput pretrain_step(const Batch& batch, long batch_id = -1);

  // Builds the combined encoder input for one example: row 0 = raw
  // current sample (the feedback slot), then history, then raw rows.
  Tensor build_window(const WindowedExample& ex, const std::vector<IQ>& history)
      const;

  // Forward invocations of the feedbacker since construction; lets tests
  // pin that cycles == 0 never touches it.
  long feedbacker_calls() const { return feedbacker_calls_; }

 private:
  int encoder_pass(Tape& tape, const Staged& s, int input) const;
  int feedbacker_pass(Tape& tape, const Staged& s, int latent) const;
  int processor_pass(Tape& tape, const Staged& s, int latent) const;
  // Replaces window row 0 with the node `row` by rebuilding the time
  // stack on the tape, so gradients flow into the feedback value.
  int splice_feedback(Tape& tape, int row, const Tensor& window) const;
  void apply_grads(ParamSet& params, const std::vector<Tensor>& grads,
                   double rate, AdamState& opt);

  EqualizerConfig cfg_;
  ParamSet encoder_, feedbacker_, processor_;
  AdamState adam_enc_, adam_feed_, adam_proc_;
  mutable long feedbacker_calls_ = 0;
};

// Training report: per-batch losses of the main schedule plus per-epoch
// mean reconstruction loss of the pretraining passes.
struct FitReport {
  std::vector<double> l1, l2, l3;
  std::vector<double> pretrain_l2;
};

// Streams `rec` through the model in batches, keeping a per-slot recovery
// store so history slots hold the model's own recovered values (or clean
// symbols under teacher forcing).  Slots not yet refreshed by the current
// pass fall back to the raw received sample.
FitReport fit_mafenn(MafennModel& model, const TransmissionRecord& rec);
// Reconstruction-only warmup: encoder and feedbacker step jointly on l2
// at lambda2; the processor is untouched.  No-op when cycles == 0.
std::vector<double> pretrain_mafenn(MafennModel& model,
                                    const TransmissionRecord& rec, int epochs);

// Causal streaming evaluation: decisions use only past samples and the
// model's own past recovered values.  Optionally records every slot.
double evaluate_ser(const MafennModel& model, const TransmissionRecord& rec,
                    std::vector<MafennModel::SlotResult>* trace = nullptr);

// Fraction of mismatches; the trivial counting core of evaluate_ser.
double ser_from_decisions(const std::vector<int>& decisions,
                          const std::vector<std::uint8_t>& labels);

// Three hidden ReLU layers on the flattened raw window, then softmax.
// Trained on cross-entropy at lambda3 (single-loss baseline).
class MlpModel {
 public:
  MlpModel(const EqualizerConfig& cfg, std::uint64_t seed);

  const EqualizerConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Class probabilities for a batch of flattened windows [B, 2N].
  Tensor forward(const Tensor& flat) const;
  double train_step(const Tensor& flat, const std::vector<int>& labels,
                    long batch_id = -1);

 private:
  int stage_forward(Tape& tape, std::vector<int>& ids, int input,
                    bool grads) const;

  EqualizerConfig cfg_;
  ParamSet params_;
  AdamState adam_;
};

FitReport fit_mlp(MlpModel& model, const TransmissionRecord& rec);
double evaluate_ser(const MlpModel& model, const TransmissionRecord& rec);

// Exponentially weighted recursive least squares over the received
// window, complex taps.  The inverse correlation matrix is kept Hermitian
// by explicit symmetrization each update; if its diagonal goes negative
// or non-finite the filter re-initializes and counts the event.
struct RlsConfig {
  int n_taps = 16;
  double forget = 0.999;  // exponential weighting factor in (0, 1]
  double delta = 100.0;   // regularizer: P starts at I / delta
  int preamble = 2000;    // training symbols before the taps freeze
};

class RlsEqualizer {
 public:
  explicit RlsEqualizer(const RlsConfig& cfg);

  const RlsConfig& config() const { return cfg_; }
  const std::vector<IQ>& weights() const { return w_; }
  // Row-major n_taps x n_taps inverse correlation matrix.
  const std::vector<IQ>& inverse_correlation() const { return p_; }
  int reinit_count() const { return reinits_; }

  // One recursion toward `desired` on the window [x(i), ..., x(i-n+1)].
  void update(const std::vector<IQ>& window, IQ desired);
  IQ filter(const std::vector<IQ>& window) const;
  int decide(const std::vector<IQ>& window) const;

  // Window of the last n_taps received samples ending at index i.
  static std::vector<IQ> window_at(const std::vector<IQ>& received,
                                   std::size_t i, int n_taps);

 private:
  void reset();

  RlsConfig cfg_;
  std::vector<IQ> w_;  // [n]
  std::vector<IQ> p_;  // [n*n]
  int reinits_ = 0;
};

// Runs the training preamble (ground-truth desired symbols), then leaves
// the taps frozen.
void fit_rls(RlsEqualizer& rls, const TransmissionRecord& rec);
double evaluate_ser(const RlsEqualizer& rls, const TransmissionRecord& rec);

// Model persistence: weights go to `path` in the MAFW format, the config
// to "path.cfg" as kv text with a `kind` tag.
void save_model(const MafennModel& model, const std::string& path);
void save_model(const MlpModel& model, const std::string& path);
MafennModel load_mafenn(const std::string& path);
MlpModel load_mlp(const std::string& path);
// The `kind` value stored next to a checkpoint ("mafenn" or "mlp").
std::string checkpoint_kind(const std::string& path);

}  // namespace mafenn
