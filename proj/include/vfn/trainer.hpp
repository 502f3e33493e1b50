#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "vfn/autograd.hpp"
#include "vfn/backbone.hpp"
#include "vfn/synthetic.hpp"
#include "vfn/train.hpp"

namespace vfn {

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean training loss over the epoch
  double acc = 0.0;       // top-1 on the held-out set after the epoch
  double lr = 0.0;        // learning rate of the epoch's last step

  /// `epoch <n> loss <f> acc <f> lr <f>`
  std::string line() const {
    char buf[128];
    std::snprintf(buf, sizeof buf, "epoch %zu loss %.6f acc %.6f lr %.8f", epoch, loss, acc, lr);
    return buf;
  }
};

template <class T>
struct TrainResult {
  NetworkParams<T> params;
  std::vector<EpochMetrics> history;

  double final_accuracy() const { return history.empty() ? 0.0 : history.back().acc; }
};

struct TrainHooks {
  /// Class of a horizontally mirrored clip; identity when unset.
  std::function<int(int)> flip_label;
  /// Receives each metrics line as soon as the epoch ends.
  std::ostream* log = nullptr;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Highest-scoring class per row; ties go to the lowest index.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& scores) {
  const std::size_t B = scores.dim(0), K = scores.dim(1);
  auto d = scores.data();
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (d[b * K + k] > d[b * K + best]) best = k;
    out[b] = static_cast<int>(best);
  }
  return out;
}

template <class T>
std::vector<int> predict(const NetworkParams<T>& p, const Dataset<T>& data, std::size_t batch = 32) {
  NoGradGuard guard;
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    auto pred = argmax_rows(network_forward(data.gather(idx), p));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

/// Top-1 accuracy in eval mode.
template <class T>
double evaluate(const NetworkParams<T>& p, const Dataset<T>& data, std::size_t batch = 32) {
  if (data.size() == 0) throw UsageError("evaluate: empty dataset");
  const auto pred = predict(p, data, batch);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

/// Builds one augmented training batch: flips and jitter per clip, label
/// smoothing, then mixup/cutmix.
template <class T>
Batch<T> make_train_batch(const Dataset<T>& data, std::span<const std::size_t> indices, std::size_t num_classes,
                          const TrainConfig& cfg, const std::function<int(int)>& flip_label, Rng& rng) {
  Tensor<T> clips = data.gather(indices);
  std::vector<int> labels = data.gather_labels(indices);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (rng.bernoulli(cfg.flip_prob)) {
      hflip_clip(clips, i);
      if (flip_label) labels[i] = flip_label(labels[i]);
    }
    if (cfg.color_jitter_prob > 0.0 && rng.bernoulli(cfg.color_jitter_prob)) color_jitter_clip(clips, i, rng);
  }
  Batch<T> batch{clips, smoothed_targets<T>(labels, num_classes, static_cast<T>(cfg.label_smoothing))};
  return mixup_cutmix(std::move(batch), cfg, rng);
}

/// Seeded training run. Initialization, data order/augmentation and drop
/// path draw from separate streams derived from cfg.seed.
template <class T>
TrainResult<T> train(const NetworkConfig& net, const TrainConfig& cfg, const Dataset<T>& train_set,
                     const Dataset<T>& eval_set, const TrainHooks& hooks = {}) {
  net.validate();
  cfg.validate();
  if (train_set.size() == 0) throw UsageError("train: empty training set");
  Rng init_rng(cfg.seed), data_rng(cfg.seed + 1), drop_rng(cfg.seed + 2);
  TrainResult<T> result{init_network<T>(net, init_rng), {}};
  NetworkParams<T>& p = result.params;
  std::vector<Tensor<T>> params = p.tensors();
  SgdState<T> state;
  std::vector<std::vector<T>> grads(params.size());

  const std::size_t steps_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const LrSchedule schedule = make_schedule(cfg, steps_per_epoch);
  const ForwardOptions opt{true, &drop_rng};
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = data_rng.permutation(train_set.size());
    double loss_sum = 0.0, lr = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::size_t lo = s * cfg.batch_size, hi = std::min(train_set.size(), lo + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Batch<T> batch = make_train_batch(train_set, idx, net.num_classes, cfg, hooks.flip_label, data_rng);
      Tensor<T> loss = softmax_cross_entropy(network_forward(batch.clips, p, opt), batch.targets);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                           ")");
      }
      loss_sum += value * static_cast<double>(hi - lo);
      for (std::size_t i = 0; i < params.size(); ++i) grads[i].assign(params[i].numel(), T(0));
      backward_into(loss, std::span<const Tensor<T>>(params), std::span<std::vector<T>>(grads));
      if (cfg.clip_grad_norm > 0.0) clip_grad_norm(std::span<std::vector<T>>(grads), cfg.clip_grad_norm);
      lr = schedule.at(step);
      sgd_step(std::span<Tensor<T>>(params), std::span<const std::vector<T>>(grads), lr, cfg.momentum, state);
    }
    EpochMetrics m{epoch, loss_sum / static_cast<double>(train_set.size()), evaluate(p, eval_set), lr};
    if (hooks.log) *hooks.log << m.line() << '\n' << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(m);
    result.history.push_back(m);
  }
  return result;
}

}  // namespace vfn
