#pragma once

#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "avasr/model.hpp"

namespace avasr {

struct TrainConfig {
  real gamma = real(0.5);            // subword weight in the mixed loss
  real label_smoothing = real(0.1);
  real base_lr = real(1e-3);
  long warmup_steps = 8000;
  int max_epochs = 200;
  int patience = 10;  // epochs without a new best dev loss before stopping
  uint64_t seed = 1;
  long batch_frames = 6000;
  real clip_norm = real(5.0);  // global-norm gradient clip; 0 disables
  enum class Schedule { kWarmupInvSqrt, kConstant };
  Schedule schedule = Schedule::kWarmupInvSqrt;
  std::string checkpoint_dir;  // empty: keep checkpoints off disk
  bool record_step_losses = false;

  void validate() const;
};

// Cross-entropy against the label-smoothed target distribution, averaged
// over unmasked tokens. logits [b, T, V] (or [N, V]), targets/mask flat.
Tensor label_smoothed_ce(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& mask, real eps);

// gamma * subword + (1 - gamma) * character
Tensor multiresolution_loss(const Tensor& char_loss, const Tensor& sub_loss,
                            real gamma);

// Linear warmup to base_lr at step == warmup, then inverse-sqrt decay.
real lr_schedule(long step, real base_lr, long warmup,
                 TrainConfig::Schedule schedule =
                     TrainConfig::Schedule::kWarmupInvSqrt);

struct AdamState {
  real beta1 = real(0.9);
  real beta2 = real(0.98);
  real eps = real(1e-9);
  long step = 0;
  long skipped = 0;  // steps dropped for non-finite gradients
  std::vector<std::vector<real>> m, v;

  void init(const NamedParams& params);
  bool initialized() const { return !m.empty(); }
};

// One bias-corrected update over all params. Returns false (and counts a
// skip) when any gradient is non-finite; parameters stay untouched then.
bool adam_step(const NamedParams& params, AdamState& state, real lr,
               real clip_norm);

struct LossBreakdown {
  Tensor total;      // gamma-weighted
  Tensor char_loss;  // per-token mean
  Tensor sub_loss;
};

LossBreakdown model_loss(const AVASRModel& model, const Batch& batch,
                         real gamma, real label_smoothing, bool train,
                         Rng* rng);

// Token-weighted means over the dev batches, dropout off, graph-free.
struct DevLoss {
  double mixed = 0, char_loss = 0, sub_loss = 0;
};
DevLoss evaluate_dev_loss(const AVASRModel& model,
                          const std::vector<Batch>& dev_batches, real gamma,
                          real label_smoothing);

// Optimizer and early-stop bookkeeping carried across checkpoint resume.
struct TrainState {
  AdamState adam;
  long step = 0;       // batches processed
  int next_epoch = 0;
  int best_epoch = -1;
  double best_dev = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;
};

struct EpochMetrics {
  int epoch = 0;
  long step = 0;
  double lr = 0;
  double train_loss = 0;
  double dev_loss = 0, dev_char = 0, dev_sub = 0;
  int best_epoch = 0;
};

struct TrainResult {
  int best_epoch = -1;
  double best_dev = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  long steps = 0;
  double wall_seconds = 0;
  std::vector<EpochMetrics> history;
  std::vector<double> step_losses;  // only with record_step_losses
  std::string best_checkpoint, last_checkpoint;
  TrainState final_state;  // continue training exactly where this run ended
};

// Epoch loop with per-epoch dev evaluation, best-checkpoint retention, and
// early stopping. `metrics_out` gets one deterministic line per epoch (no
// wall-clock content); timing goes to `console`. `state` may carry a resumed
// optimizer; `config_echo` is embedded in checkpoints.
TrainResult train_loop(AVASRModel& model,
                       const std::vector<PreppedUtterance>& train_utts,
                       const std::vector<PreppedUtterance>& dev_utts,
                       const TrainConfig& cfg, TrainState state = {},
                       std::ostream* metrics_out = nullptr,
                       std::ostream* console = nullptr,
                       const std::string& config_echo = "");

}  // namespace avasr
