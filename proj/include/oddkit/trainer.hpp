#pragma once
// The optimization loop: shuffled epochs, online augmentation, Adam updates,
// periodic validation and checkpointing. Batches come from an endless stream
// indexed by the step counter alone, so a resumed run replays exactly the
// batches an uninterrupted one would have seen.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "common.hpp"
#include "models.hpp"
#include "optimizer.hpp"
#include "patches.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace oddkit {

struct TrainConfig {
  std::int64_t steps = 5000;
  std::int64_t batch_size = 32;
  double learning_rate = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  std::int64_t validate_every = 50;
  std::int64_t checkpoint_every = 1000;
  bool deterministic = false;     // serial execution, wall time logged as 0
  std::string checkpoint_dir;     // empty: no checkpoints written

  void validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch normalization)");
    if (validate_every < 1) throw ConfigError("validate_every must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    AdamConfig{learning_rate, adam_beta1, adam_beta2, adam_epsilon}.validate();
  }

  AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_epsilon}; }
};

struct MetricRecord {
  std::int64_t step = 0;
  double train_loss = 0;
  double val_loss = 0;
  double wall_time_s = 0;
  double train_recon = 0;  // pure reconstruction term of the train batch
  double val_recon = 0;    // pure reconstruction term over the validation set
};

struct MetricLog {
  std::vector<MetricRecord> records;
};

inline void write_metrics_csv(const std::string& path, const MetricLog& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "step,train_loss,val_loss,wall_time_s,train_recon,val_recon\n";
  char row[192];
  for (const MetricRecord& r : log.records) {
    std::snprintf(row, sizeof row, "%lld,%.9g,%.9g,%.3f,%.9g,%.9g\n",
                  static_cast<long long>(r.step), r.train_loss, r.val_loss, r.wall_time_s,
                  r.train_recon, r.val_recon);
    os << row;
  }
  if (!os) throw IoError("failed writing " + path);
}

struct TrainResult {
  MetricLog metrics;
  std::int64_t steps_done = 0;
  bool halted = false;        // stopped early on a non-finite loss or gradient
  std::string halt_reason;
};

/// Mean total loss and mean reconstruction term over a patch list, computed
/// in inference mode (batch statistics frozen, no augmentation, no sampling).
template <typename T>
std::pair<double, double> evaluate_loss(Model<T>& model, const std::vector<ObjectPatch>& patches,
                                        std::int64_t batch_size) {
  if (patches.empty()) throw ValidationError("evaluate_loss: no patches");
  NoGradGuard ng;
  DenormalGuard ftz;
  double total = 0, recon = 0;
  for (std::size_t at = 0; at < patches.size(); at += static_cast<std::size_t>(batch_size)) {
    std::vector<const ObjectPatch*> ptrs;
    for (std::size_t j = at; j < patches.size() && j < at + static_cast<std::size_t>(batch_size); ++j)
      ptrs.push_back(&patches[j]);
    Tensor<T> x = to_batch(ptrs).template cast<T>();
    auto fwd = forward_loss(model, x, false);
    for (std::size_t j = 0; j < ptrs.size(); ++j) {
      const auto i = static_cast<std::int64_t>(j);
      double sample = fwd.recon_rows[i];
      recon += sample;
      if (fwd.kl_rows.size() > 0) sample += fwd.kl_rows[i];
      if (fwd.entropy_rows.size() > 0) sample += model.desc.entropy_alpha * fwd.entropy_rows[i];
      total += sample;
    }
  }
  const double n = static_cast<double>(patches.size());
  return {total / n, recon / n};
}

namespace detail {

template <typename T>
void save_checkpoint(const Model<T>& model, const AdamState<T>& opt, const std::string& dir,
                     const std::string& label) {
  std::filesystem::create_directories(dir);
  save_model(model, dir + "/" + label + ".model");
  save_adam_state(opt, dir + "/" + label + ".adam");
}

}  // namespace detail

/// Runs optimizer updates until the step counter in `opt` reaches
/// cfg.steps. Start from AdamState::zeros_like for a fresh run, or from a
/// loaded sidecar to resume: the batch stream is a pure function of
/// (seed, step), so the continuation is exact.
///
/// Each step t draws batch_size consecutive samples from the stream
/// s = (t-1)*batch_size + j; epoch e = s / n reshuffles the order and feeds
/// every patch through a fresh augmentation draw keyed by (patch, e).
template <typename T>
TrainResult train(Model<T>& model, const DatasetSplit& split, const AugmentationPolicy& policy,
                  const TrainConfig& cfg, AdamState<T>& opt) {
  cfg.validate();
  policy.validate();
  if (split.train.empty()) throw ValidationError("train: empty training set");
  DenormalGuard ftz;
  const std::vector<ObjectPatch>& val_set =
      split.validation.empty() ? split.train : split.validation;

  const std::int64_t n = static_cast<std::int64_t>(split.train.size());
  const AdamConfig adam_cfg = cfg.adam();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (cfg.deterministic) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  // the two epochs a batch can straddle
  std::map<std::int64_t, std::vector<std::int64_t>> perms;
  auto perm_for = [&](std::int64_t epoch) -> const std::vector<std::int64_t>& {
    auto it = perms.find(epoch);
    if (it == perms.end()) {
      std::vector<std::int64_t> order(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      Rng rng = keyed_rng(cfg.seed, "epoch", static_cast<std::uint64_t>(epoch));
      rng.shuffle(order);
      it = perms.emplace(epoch, std::move(order)).first;
      while (perms.size() > 2) perms.erase(perms.begin());
    }
    return it->second;
  };

  TrainResult result;
  const std::int64_t first = opt.t + 1;
  double val_loss = 0, val_recon = 0;
  for (std::int64_t t = first; t <= cfg.steps; ++t) {
    std::vector<ObjectPatch> staged;
    staged.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (std::int64_t j = 0; j < cfg.batch_size; ++j) {
      const std::int64_t s = (t - 1) * cfg.batch_size + j;
      const std::int64_t epoch = s / n;
      const std::int64_t item = perm_for(epoch)[static_cast<std::size_t>(s % n)];
      staged.push_back(augment(split.train[static_cast<std::size_t>(item)], policy,
                               static_cast<std::uint64_t>(epoch)));
    }
    std::vector<const ObjectPatch*> ptrs;
    for (const ObjectPatch& p : staged) ptrs.push_back(&p);
    Tensor<T> x = to_batch(ptrs).template cast<T>();

    Tensor<T> noise;
    const Tensor<T>* noise_ptr = nullptr;
    if (model.desc.kind == ModelKind::cvae) {
      noise = Tensor<T>({cfg.batch_size, model.desc.latent_dim});
      Rng rng = keyed_rng(cfg.seed, "noise", static_cast<std::uint64_t>(t));
      for (std::int64_t i = 0; i < noise.size(); ++i) noise[i] = static_cast<T>(rng.next_normal());
      noise_ptr = &noise;
    }

    auto fwd = forward_loss(model, x, true, noise_ptr);
    const double train_loss = static_cast<double>(fwd.loss.value()[0]);
    if (!std::isfinite(train_loss)) {
      result.halted = true;
      result.halt_reason = "non-finite loss at step " + std::to_string(t);
      break;  // parameters were not touched this step
    }
    backward(fwd.loss, model.params);
    try {
      adam_step(model.params, opt, adam_cfg);
    } catch (const NumericError& e) {
      result.halted = true;
      result.halt_reason = e.what() + std::string(" at step ") + std::to_string(t);
      break;  // adam_step validates before updating, so parameters are intact
    }

    if (t == first || t % cfg.validate_every == 0 || t == cfg.steps)
      std::tie(val_loss, val_recon) = evaluate_loss(model, val_set, cfg.batch_size);

    result.metrics.records.push_back({t, train_loss, val_loss, elapsed(),
                                      static_cast<double>(fwd.recon_loss), val_recon});

    if (!cfg.checkpoint_dir.empty() && t % cfg.checkpoint_every == 0)
      detail::save_checkpoint(model, opt, cfg.checkpoint_dir, "step_" + std::to_string(t));
  }

  result.steps_done = opt.t;
  if (!cfg.checkpoint_dir.empty()) detail::save_checkpoint(model, opt, cfg.checkpoint_dir, "final");
  if (result.halted) log_msg(LogLevel::error, "training halted: " + result.halt_reason);
  return result;
}

/// Fresh-run convenience: new optimizer state, train to cfg.steps.
template <typename T>
TrainResult train(Model<T>& model, const DatasetSplit& split, const AugmentationPolicy& policy,
                  const TrainConfig& cfg) {
  AdamState<T> opt = AdamState<T>::zeros_like(model.params);
  return train(model, split, policy, cfg, opt);
}

}  // namespace oddkit
