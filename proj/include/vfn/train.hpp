#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "vfn/ops.hpp"
#include "vfn/random.hpp"

namespace vfn {

/// Optimizer, schedule and augmentation settings.
struct TrainConfig {
  double base_lr = 0.01;
  std::size_t reference_batch = 512;  // peak lr = base_lr * batch_size / reference_batch
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::size_t warmup_epochs = 2;
  double momentum = 0.9;
  double label_smoothing = 0.1;
  double mixup_alpha = 0.8;
  double mixup_prob = 0.5;
  double cutmix_prob = 0.5;
  double flip_prob = 0.5;
  double color_jitter_prob = 0.0;
  double clip_grad_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;

  double peak_lr() const {
    return base_lr * static_cast<double>(batch_size) / static_cast<double>(reference_batch);
  }

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (batch_size == 0 || reference_batch == 0) throw ConfigError("train: batch sizes must be positive");
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (warmup_epochs >= epochs) throw ConfigError("train: warmup_epochs must be smaller than epochs");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("train: label_smoothing must be in [0,1)");
    for (double p : {mixup_prob, cutmix_prob, flip_prob, color_jitter_prob}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("train: probabilities must be in [0,1]");
    }
    if (!(mixup_alpha > 0.0)) throw ConfigError("train: mixup_alpha must be positive");
    if (!(base_lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: bad lr or momentum");
    if (!(clip_grad_norm >= 0.0)) throw ConfigError("train: clip_grad_norm must be non-negative");
  }
};

/// Linear warmup from 0 to peak over warmup_steps, then a half cosine that
/// reaches 0 at the final step (total_steps - 1).
struct LrSchedule {
  double peak = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  double at(std::size_t step) const {
    if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const std::size_t last = total_steps > 0 ? total_steps - 1 : 0;
    if (last <= warmup_steps) return peak;
    const double progress =
        std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(last - warmup_steps));
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

inline LrSchedule make_schedule(const TrainConfig& cfg, std::size_t steps_per_epoch) {
  return {cfg.peak_lr(), cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch};
}

inline double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t steps_per_epoch) {
  return make_schedule(cfg, steps_per_epoch).at(step);
}

template <class T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

/// SGD with momentum: v <- mu v + g; p <- p - lr v.
template <class T>
void sgd_step(std::span<Tensor<T>> params, std::span<const std::vector<T>> grads, double lr, double momentum,
              SgdState<T>& state) {
  if (params.size() != grads.size()) throw Error(ErrorKind::internal, "sgd_step: parameter/gradient count mismatch");
  if (state.velocity.empty()) {
    for (const Tensor<T>& p : params) state.velocity.emplace_back(p.numel(), T(0));
  }
  const T mu = static_cast<T>(momentum), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    const std::vector<T>& g = grads[i];
    std::vector<T>& v = state.velocity[i];
    if (g.size() != p.size() || v.size() != p.size()) {
      throw Error(ErrorKind::internal, "sgd_step: shape mismatch at parameter " + std::to_string(i));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = mu * v[j] + g[j];
      p[j] -= step * v[j];
    }
  }
}

/// Scales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before scaling. max_norm = 0 only measures.
template <class T>
double clip_grad_norm(std::span<std::vector<T>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (T& v : g) v *= f;
  }
  return norm;
}

/// Clips with their (soft) targets. clips: [B,...]; targets: [B,K].
template <class T>
struct Batch {
  Tensor<T> clips;
  Tensor<T> targets;
};

/// x_i <- lambda x_i + (1-lambda) x_perm(i), same for targets.
template <class T>
Batch<T> mixup(const Batch<T>& in, double lambda, const std::vector<std::size_t>& perm) {
  const std::size_t B = in.clips.dim(0);
  auto blend = [&](const Tensor<T>& t) {
    const std::size_t row = t.numel() / B;
    std::vector<T> out(t.numel());
    auto src = t.data();
    const T a = static_cast<T>(lambda), b = static_cast<T>(1.0 - lambda);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < row; ++j) out[i * row + j] = a * src[i * row + j] + b * src[perm[i] * row + j];
    return Tensor<T>(t.shape(), std::move(out));
  };
  return {blend(in.clips), blend(in.targets)};
}

/// Axis-aligned box [y0,y1) x [x0,x1) in frame coordinates.
struct CutBox {
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  std::size_t area() const { return (y1 - y0) * (x1 - x0); }
};

/// Box covering about (1-lambda) of an HxW frame, centred uniformly at
/// random and clipped to the frame.
inline CutBox sample_cut_box(std::size_t H, std::size_t W, double lambda, Rng& rng) {
  const double ratio = std::sqrt(1.0 - lambda);
  const double ch = static_cast<double>(H) * ratio, cw = static_cast<double>(W) * ratio;
  const double cy = rng.uniform(0.0, static_cast<double>(H)), cx = rng.uniform(0.0, static_cast<double>(W));
  auto clip = [](double v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp(std::round(v), 0.0, static_cast<double>(hi)));
  };
  return {clip(cy - ch / 2, H), clip(cy + ch / 2, H), clip(cx - cw / 2, W), clip(cx + cw / 2, W)};
}

/// Pastes the box from clip perm(i) into clip i on every frame. clips are
/// [B,T,H,W,C]. Target weights follow the retained area fraction, which is
/// returned.
template <class T>
double cutmix(Batch<T>& batch, const CutBox& box, const std::vector<std::size_t>& perm) {
  const Shape& s = batch.clips.shape();
  const std::size_t B = s[0], Tn = s[1], H = s[2], W = s[3], C = s[4];
  const Tensor<T> source = batch.clips.detach();
  auto src = source.data();
  auto dst = batch.clips.mutable_data();
  const std::size_t clip_size = Tn * H * W * C;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t t = 0; t < Tn; ++t)
      for (std::size_t y = box.y0; y < box.y1; ++y)
        for (std::size_t x = box.x0; x < box.x1; ++x) {
          const std::size_t off = ((t * H + y) * W + x) * C;
          for (std::size_t c = 0; c < C; ++c) dst[i * clip_size + off + c] = src[perm[i] * clip_size + off + c];
        }
  const double kept = 1.0 - static_cast<double>(box.area()) / static_cast<double>(H * W);
  const std::size_t K = batch.targets.dim(1);
  const Tensor<T> targets = batch.targets.detach();
  auto tin = targets.data();
  auto tout = batch.targets.mutable_data();
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < K; ++k)
      tout[i * K + k] = static_cast<T>(kept) * tin[i * K + k] + static_cast<T>(1.0 - kept) * tin[perm[i] * K + k];
  return kept;
}

/// Mixup (lambda ~ Beta(alpha, alpha)) and CutMix, each applied
/// independently with its configured probability. Batches of one are
/// returned unchanged with a warning.
template <class T>
Batch<T> mixup_cutmix(Batch<T> batch, const TrainConfig& cfg, Rng& rng) {
  const std::size_t B = batch.clips.dim(0);
  const bool do_mixup = rng.bernoulli(cfg.mixup_prob);
  const bool do_cutmix = rng.bernoulli(cfg.cutmix_prob);
  if (!do_mixup && !do_cutmix) return batch;
  if (B < 2) {
    warn("mixup/cutmix skipped: batch of one");
    return batch;
  }
  batch.clips = batch.clips.detach();
  batch.targets = batch.targets.detach();
  if (do_mixup) batch = mixup(batch, rng.beta(cfg.mixup_alpha, cfg.mixup_alpha), rng.permutation(B));
  if (do_cutmix) {
    const double lambda = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha);
    const CutBox box = sample_cut_box(batch.clips.dim(2), batch.clips.dim(3), lambda, rng);
    cutmix(batch, box, rng.permutation(B));
  }
  return batch;
}

/// Mirrors clip i of [B,T,H,W,C] along W in place.
template <class T>
void hflip_clip(Tensor<T>& clips, std::size_t i) {
  const Shape& s = clips.shape();
  const std::size_t Tn = s[1], H = s[2], W = s[3], C = s[4];
  auto d = clips.mutable_data();
  const std::size_t base = i * Tn * H * W * C;
  for (std::size_t t = 0; t < Tn; ++t)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W / 2; ++x)
        for (std::size_t c = 0; c < C; ++c)
          std::swap(d[base + ((t * H + y) * W + x) * C + c], d[base + ((t * H + y) * W + (W - 1 - x)) * C + c]);
}

/// Brightness/contrast jitter of clip i by factors drawn in [0.6, 1.4].
template <class T>
void color_jitter_clip(Tensor<T>& clips, std::size_t i, Rng& rng) {
  const std::size_t size = clips.numel() / clips.dim(0);
  auto d = clips.mutable_data().subspan(i * size, size);
  const T brightness = static_cast<T>(rng.uniform(0.6, 1.4));
  const T contrast = static_cast<T>(rng.uniform(0.6, 1.4));
  T mean = 0;
  for (T v : d) mean += v;
  mean /= static_cast<T>(size);
  for (T& v : d) v = (mean + contrast * (v - mean)) * brightness;
}

}  // namespace vfn
