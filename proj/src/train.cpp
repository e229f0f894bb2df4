#include "avasr/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "avasr/checkpoint.hpp"

namespace avasr {

void TrainConfig::validate() const {
  if (gamma < real(0) || gamma > real(1))
    throw ConfigError("gamma must be in [0, 1]");
  if (label_smoothing < real(0) || label_smoothing >= real(1))
    throw ConfigError("label_smoothing must be in [0, 1)");
  if (base_lr <= real(0)) throw ConfigError("base_lr must be positive");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 0) throw ConfigError("patience must be >= 0");
  if (batch_frames < 1) throw ConfigError("batch_frames must be >= 1");
  if (clip_norm < real(0)) throw ConfigError("clip_norm must be >= 0");
}

Tensor label_smoothed_ce(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& mask, real eps) {
  if (eps < real(0) || eps >= real(1))
    throw ConfigError("label smoothing must be in [0, 1)");
  int V = logits.dim(-1);
  std::size_t n = logits.numel() / static_cast<std::size_t>(V);
  if (targets.size() != n || mask.size() != n)
    throw DimError("label_smoothed_ce: " + std::to_string(n) +
                   " logit rows vs " + std::to_string(targets.size()) +
                   " targets, " + std::to_string(mask.size()) + " mask flags");
  std::size_t live = 0;
  for (uint8_t m : mask) live += m ? 1 : 0;
  if (live == 0) throw ContractError("label_smoothed_ce: all tokens masked");

  const real* pl = logits.data().data();
  auto probs = std::make_shared<std::vector<real>>(logits.numel());
  double total = 0;
  real off = V > 1 ? eps / static_cast<real>(V - 1) : real(0);
  real on = real(1) - eps;
  for (std::size_t i = 0; i < n; ++i) {
    const real* row = pl + i * V;
    real* prow = probs->data() + i * V;
    if (targets[i] < 0 || targets[i] >= V)
      throw ContractError("target id " + std::to_string(targets[i]) +
                          " outside [0, " + std::to_string(V) + ")");
    real mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    real denom = 0;
    for (int j = 0; j < V; ++j) {
      prow[j] = std::exp(row[j] - mx);
      denom += prow[j];
    }
    real lse = mx + std::log(denom);
    for (int j = 0; j < V; ++j) prow[j] /= denom;
    if (!mask[i]) continue;
    double row_loss = 0;
    for (int j = 0; j < V; ++j) {
      real q = j == targets[i] ? on : off;
      row_loss -= static_cast<double>(q) * (row[j] - lse);
    }
    total += row_loss;
  }
  real value = static_cast<real>(total / static_cast<double>(live));

  auto tg = std::make_shared<std::vector<int>>(targets);
  auto mk = std::make_shared<std::vector<uint8_t>>(mask);
  return Tensor::make({1}, {value}, {logits},
                      [probs, tg, mk, V, n, on, off, live](TensorNode& o) {
    Tensor logits = o.parents[0];
    if (!logits.requires_grad()) return;
    real g = o.grad[0] / static_cast<real>(live);
    real* dl = logits.grad().data();
    for (std::size_t i = 0; i < n; ++i) {
      if (!(*mk)[i]) continue;
      const real* prow = probs->data() + i * V;
      real* drow = dl + i * V;
      int t = (*tg)[i];
      for (int j = 0; j < V; ++j) {
        real q = j == t ? on : off;
        drow[j] += g * (prow[j] - q);
      }
    }
  });
}

Tensor multiresolution_loss(const Tensor& char_loss, const Tensor& sub_loss,
                            real gamma) {
  if (gamma < real(0) || gamma > real(1))
    throw ConfigError("gamma must be in [0, 1]");
  return add(scale(sub_loss, gamma), scale(char_loss, real(1) - gamma));
}

real lr_schedule(long step, real base_lr, long warmup,
                 TrainConfig::Schedule schedule) {
  if (step < 1) throw ContractError("lr_schedule: step must be >= 1");
  if (schedule == TrainConfig::Schedule::kConstant) return base_lr;
  double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return base_lr * static_cast<real>(std::min(s / w, std::sqrt(w / s)));
}

void AdamState::init(const NamedParams& params) {
  m.clear();
  v.clear();
  for (const auto& [name, t] : params) {
    m.emplace_back(t.numel(), real(0));
    v.emplace_back(t.numel(), real(0));
  }
}

bool adam_step(const NamedParams& params, AdamState& state, real lr,
               real clip_norm) {
  if (!state.initialized()) state.init(params);
  if (state.m.size() != params.size())
    throw ContractError("optimizer state does not match parameter list");

  double sq = 0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad())
      throw ContractError("parameter '" + name + "' has no gradient");
    for (real g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        ++state.skipped;
        return false;
      }
      sq += static_cast<double>(g) * g;
    }
  }
  real clip_factor = real(1);
  if (clip_norm > real(0)) {
    double norm = std::sqrt(sq);
    if (norm > static_cast<double>(clip_norm))
      clip_factor = static_cast<real>(static_cast<double>(clip_norm) / norm);
  }

  ++state.step;
  real bc1 = real(1) - static_cast<real>(
      std::pow(static_cast<double>(state.beta1), state.step));
  real bc2 = real(1) - static_cast<real>(
      std::pow(static_cast<double>(state.beta2), state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    std::vector<real>& data = const_cast<Tensor&>(t).data();
    const std::vector<real>& grad = t.grad();
    std::vector<real>& mp = state.m[p];
    std::vector<real>& vp = state.v[p];
    if (mp.size() != data.size())
      throw ContractError("optimizer buffer shape mismatch at '" +
                          params[p].first + "'");
    for (std::size_t i = 0; i < data.size(); ++i) {
      real g = grad[i] * clip_factor;
      mp[i] = state.beta1 * mp[i] + (real(1) - state.beta1) * g;
      vp[i] = state.beta2 * vp[i] + (real(1) - state.beta2) * g * g;
      real mhat = mp[i] / bc1;
      real vhat = vp[i] / bc2;
      data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
  return true;
}

LossBreakdown model_loss(const AVASRModel& model, const Batch& batch,
                         real gamma, real label_smoothing, bool train,
                         Rng* rng) {
  auto out = model.forward(batch, train, rng);
  LossBreakdown b;
  b.char_loss =
      label_smoothed_ce(out.char_logits, batch.char_out, batch.char_mask,
                        label_smoothing);
  b.sub_loss = label_smoothed_ce(out.sub_logits, batch.sub_out,
                                 batch.sub_mask, label_smoothing);
  b.total = multiresolution_loss(b.char_loss, b.sub_loss, gamma);
  return b;
}

DevLoss evaluate_dev_loss(const AVASRModel& model,
                          const std::vector<Batch>& dev_batches, real gamma,
                          real label_smoothing) {
  NoGradGuard guard;
  double char_sum = 0, sub_sum = 0;
  std::size_t char_tokens = 0, sub_tokens = 0;
  for (const Batch& batch : dev_batches) {
    LossBreakdown b =
        model_loss(model, batch, gamma, label_smoothing, false, nullptr);
    std::size_t ct = 0, st = 0;
    for (uint8_t m : batch.char_mask) ct += m ? 1 : 0;
    for (uint8_t m : batch.sub_mask) st += m ? 1 : 0;
    char_sum += static_cast<double>(b.char_loss.item()) * ct;
    sub_sum += static_cast<double>(b.sub_loss.item()) * st;
    char_tokens += ct;
    sub_tokens += st;
  }
  DevLoss d;
  if (char_tokens) d.char_loss = char_sum / char_tokens;
  if (sub_tokens) d.sub_loss = sub_sum / sub_tokens;
  d.mixed = static_cast<double>(gamma) * d.sub_loss +
            (1.0 - static_cast<double>(gamma)) * d.char_loss;
  return d;
}

TrainResult train_loop(AVASRModel& model,
                       const std::vector<PreppedUtterance>& train_utts,
                       const std::vector<PreppedUtterance>& dev_utts,
                       const TrainConfig& cfg, TrainState state,
                       std::ostream* metrics_out, std::ostream* console,
                       const std::string& config_echo) {
  cfg.validate();
  if (train_utts.empty()) throw ContractError("no training utterances");
  auto t_start = std::chrono::steady_clock::now();

  BatchOptions dev_opts;
  dev_opts.frame_budget = cfg.batch_frames;
  dev_opts.shuffle = false;
  std::vector<Batch> dev_batches =
      dev_utts.empty() ? std::vector<Batch>{} : make_batches(dev_utts, dev_opts);

  NamedParams params = model.named_parameters();
  if (!state.adam.initialized()) state.adam.init(params);

  TrainResult result;
  result.best_epoch = state.best_epoch;
  result.best_dev = state.best_dev;

  if (metrics_out && state.next_epoch == 0)
    *metrics_out << "epoch\tstep\tlr\ttrain_loss\tdev_loss\tdev_char\t"
                    "dev_sub\tbest_epoch\n";

  char line[256];
  for (int epoch = state.next_epoch; epoch < cfg.max_epochs; ++epoch) {
    Rng epoch_rng = Rng::for_epoch(cfg.seed, static_cast<uint64_t>(epoch));
    BatchOptions train_opts;
    train_opts.frame_budget = cfg.batch_frames;
    train_opts.shuffle = true;
    train_opts.shuffle_seed =
        cfg.seed * 1000003ull + static_cast<uint64_t>(epoch);
    std::vector<Batch> batches = make_batches(train_utts, train_opts);

    double train_sum = 0;
    long train_count = 0;
    real lr = 0;
    for (const Batch& batch : batches) {
      LossBreakdown loss = model_loss(model, batch, cfg.gamma,
                                      cfg.label_smoothing, true, &epoch_rng);
      model.zero_grads();
      loss.total.backward();
      lr = lr_schedule(state.step + 1, cfg.base_lr, cfg.warmup_steps,
                       cfg.schedule);
      adam_step(params, state.adam, lr, cfg.clip_norm);
      ++state.step;
      double value = static_cast<double>(loss.total.item());
      train_sum += value;
      ++train_count;
      if (cfg.record_step_losses) result.step_losses.push_back(value);
    }

    DevLoss dev = dev_batches.empty()
                      ? DevLoss{train_sum / std::max(1l, train_count), 0, 0}
                      : evaluate_dev_loss(model, dev_batches, cfg.gamma,
                                          cfg.label_smoothing);

    bool improved = dev.mixed < state.best_dev;
    if (improved) {
      state.best_dev = dev.mixed;
      state.best_epoch = epoch;
      state.epochs_since_best = 0;
    } else {
      ++state.epochs_since_best;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.step = state.step;
    em.lr = static_cast<double>(lr);
    em.train_loss = train_count ? train_sum / train_count : 0;
    em.dev_loss = dev.mixed;
    em.dev_char = dev.char_loss;
    em.dev_sub = dev.sub_loss;
    em.best_epoch = state.best_epoch;
    result.history.push_back(em);
    if (metrics_out) {
      std::snprintf(line, sizeof line,
                    "%d\t%ld\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%d\n", em.epoch,
                    em.step, em.lr, em.train_loss, em.dev_loss, em.dev_char,
                    em.dev_sub, em.best_epoch);
      *metrics_out << line;
    }

    state.next_epoch = epoch + 1;
    if (!cfg.checkpoint_dir.empty()) {
      std::string last = cfg.checkpoint_dir + "/last.ckpt";
      save_checkpoint(last, model, state, cfg.seed, config_echo);
      result.last_checkpoint = last;
      if (improved) {
        std::string best = cfg.checkpoint_dir + "/best.ckpt";
        save_checkpoint(best, model, state, cfg.seed, config_echo);
        result.best_checkpoint = best;
      }
    }
    if (console) {
      auto secs = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t_start)
                      .count();
      *console << "epoch " << epoch << " dev " << dev.mixed << " best "
               << state.best_dev << " (epoch " << state.best_epoch << ") "
               << secs << "s\n";
    }

    if (state.epochs_since_best >= cfg.patience && cfg.patience > 0) break;
  }

  result.best_epoch = state.best_epoch;
  result.best_dev = state.best_dev;
  result.epochs_run = static_cast<int>(result.history.size());
  result.steps = state.step;
  result.final_state = std::move(state);
  result.wall_seconds = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t_start)
                            .count();
  return result;
}

}  // namespace avasr
