#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vfn/focal.hpp"

namespace vfn {

enum class Embedding { patch_1, tubelet_2 };

inline const char* to_string(Embedding e) { return e == Embedding::patch_1 ? "patch_1" : "tubelet_2"; }

inline Embedding parse_embedding(const std::string& s) {
  if (s == "patch_1") return Embedding::patch_1;
  if (s == "tubelet_2") return Embedding::tubelet_2;
  throw ConfigError("unknown embedding '" + s + "' (patch_1 | tubelet_2)");
}

struct NetworkConfig {
  std::size_t embed_dim = 96;
  std::array<std::size_t, 4> blocks_per_stage{2, 2, 6, 2};
  FocalModulationConfig focal;  // channels are set per stage
  Embedding embedding = Embedding::patch_1;
  double mlp_ratio = 4.0;
  double drop_path_rate = 0.1;
  std::size_t num_classes = 400;
  std::size_t in_channels = 3;
  std::size_t frames = 8;
  std::size_t height = 224;
  std::size_t width = 224;

  /// Named size presets: T (C=96, 2-2-6-2), S (C=96, 2-2-18-2),
  /// B (C=128, 2-2-18-2).
  static NetworkConfig preset(std::string_view name) {
    NetworkConfig c;
    if (name == "T") {
      c.embed_dim = 96;
      c.blocks_per_stage = {2, 2, 6, 2};
    } else if (name == "S") {
      c.embed_dim = 96;
      c.blocks_per_stage = {2, 2, 18, 2};
    } else if (name == "B") {
      c.embed_dim = 128;
      c.blocks_per_stage = {2, 2, 18, 2};
    } else {
      throw ConfigError("unknown network preset '" + std::string(name) + "' (T | S | B)");
    }
    return c;
  }

  std::size_t total_blocks() const {
    return blocks_per_stage[0] + blocks_per_stage[1] + blocks_per_stage[2] + blocks_per_stage[3];
  }
  std::size_t stage_width(std::size_t stage) const { return embed_dim << stage; }
  std::size_t mlp_hidden(std::size_t stage) const {
    return static_cast<std::size_t>(mlp_ratio * static_cast<double>(stage_width(stage)) + 0.5);
  }
  std::size_t temporal_patch() const { return embedding == Embedding::tubelet_2 ? 2 : 1; }
  std::size_t token_frames() const { return frames / temporal_patch(); }

  /// Keep probability of block `index`, decaying linearly from 1 at the
  /// first block to 1 - drop_path_rate at the last.
  double keep_prob(std::size_t index) const {
    const std::size_t n = total_blocks();
    if (n <= 1) return 1.0;
    return 1.0 - drop_path_rate * static_cast<double>(index) / static_cast<double>(n - 1);
  }

  bool operator==(const NetworkConfig&) const = default;

  void validate() const {
    focal.validate();
    if (embed_dim == 0) throw ConfigError("network: embed_dim must be positive");
    if (total_blocks() == 0) throw ConfigError("network: needs at least one block");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) throw ConfigError("network: drop_path_rate must be in [0,1)");
    if (!(mlp_ratio > 0.0)) throw ConfigError("network: mlp_ratio must be positive");
    if (num_classes == 0 || in_channels == 0 || frames == 0) throw ConfigError("network: sizes must be positive");
    if (height % 32 || width % 32 || height == 0 || width == 0) {
      throw ConfigError("network: input height and width must be multiples of 32, got " + std::to_string(height) +
                        "x" + std::to_string(width));
    }
    if (frames % temporal_patch()) throw ConfigError("network: tubelet_2 embedding needs an even frame count");
  }
};

template <class T>
struct BlockParams {
  std::string name;
  LayerNorm<T> norm1, norm2;
  FocalLayerParams<T> focal;
  Linear<T> fc1, fc2;
  double keep_prob = 1.0;

  void collect(NamedTensors<T>& out) const {
    norm1.collect(name + ".norm1", out);
    focal.collect(out);
    norm2.collect(name + ".norm2", out);
    fc1.collect(name + ".mlp.fc1", out);
    fc2.collect(name + ".mlp.fc2", out);
  }
};

template <class T>
struct StageParams {
  std::vector<BlockParams<T>> blocks;
  std::optional<Linear<T>> downsample;  // 2x2 stride-2 merge after the stage
};

template <class T>
struct NetworkParams {
  NetworkConfig config;
  Linear<T> patch_embed;
  std::array<StageParams<T>, 4> stages;
  LayerNorm<T> head_norm;
  Linear<T> head;

  /// Every parameter tensor with its hierarchical name, in a fixed order.
  NamedTensors<T> named() const {
    NamedTensors<T> out;
    patch_embed.collect("patch_embed", out);
    for (std::size_t s = 0; s < 4; ++s) {
      for (const auto& b : stages[s].blocks) b.collect(out);
      if (stages[s].downsample) stages[s].downsample->collect("stage" + std::to_string(s) + ".downsample", out);
    }
    head_norm.collect("head.norm", out);
    head.collect("head.fc", out);
    return out;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t.numel();
    return n;
  }
};

template <class T>
NetworkParams<T> init_network(const NetworkConfig& cfg, Rng& rng) {
  cfg.validate();
  NetworkParams<T> p;
  p.config = cfg;
  const std::size_t patch_in = cfg.temporal_patch() * 16 * cfg.in_channels;
  p.patch_embed = Linear<T>::init(patch_in, cfg.embed_dim, true, rng);
  std::size_t index = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t C = cfg.stage_width(s);
    FocalModulationConfig fc = cfg.focal;
    fc.channels = C;
    for (std::size_t b = 0; b < cfg.blocks_per_stage[s]; ++b, ++index) {
      BlockParams<T> bp;
      bp.name = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      bp.norm1 = LayerNorm<T>::init(C);
      bp.focal = init_focal_layer<T>(fc, mixer_for_block(cfg.focal.variant, index, cfg.total_blocks()),
                                     bp.name + ".focal", rng);
      bp.norm2 = LayerNorm<T>::init(C);
      bp.fc1 = Linear<T>::init(C, cfg.mlp_hidden(s), true, rng);
      bp.fc2 = Linear<T>::init(cfg.mlp_hidden(s), C, true, rng);
      bp.keep_prob = cfg.keep_prob(index);
      p.stages[s].blocks.push_back(std::move(bp));
    }
    if (s < 3) p.stages[s].downsample = Linear<T>::init(4 * C, 2 * C, true, rng);
  }
  p.head_norm = LayerNorm<T>::init(cfg.stage_width(3));
  p.head = Linear<T>::init(cfg.stage_width(3), cfg.num_classes, true, rng);
  return p;
}

/// Where to capture modulators during a forward pass.
template <class T>
struct ModulatorProbe {
  std::size_t stage = 0;
  std::size_t block = 0;
  ModulatorPair<T> pair;
};

struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;  // drop-path draws; required when training with drop path
};

/// Non-overlapping 4x4 (patch_1) or 2x4x4 (tubelet_2) projection of
/// video [B,T,H,W,Cin] to tokens [B,T',H/4,W/4,C].
template <class T>
Tensor<T> patch_embed(const Tensor<T>& video, const Linear<T>& proj, Embedding mode) {
  detail::require_rank(video, 5, "patch_embed");
  const std::size_t pt = mode == Embedding::tubelet_2 ? 2 : 1;
  if (video.dim(2) % 4 || video.dim(3) % 4) {
    throw ConfigError("patch_embed: H and W must be divisible by 4, got " + shape_str(video.shape()));
  }
  if (video.dim(1) % pt) throw ConfigError("patch_embed: tubelet_2 needs an even frame count");
  return proj(patchify(video, pt, 4, 4));
}

/// 2x2 stride-2 patch merge: [B,T,H,W,C] -> [B,T,H/2,W/2,2C].
template <class T>
Tensor<T> downsample(const Tensor<T>& x, const Linear<T>& proj) {
  detail::require_rank(x, 5, "downsample");
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    throw ConfigError("downsample: H and W must be even, got " + shape_str(x.shape()));
  }
  return proj(patchify(x, 1, 2, 2));
}

namespace detail {

template <class T>
Tensor<T> drop_path(const Tensor<T>& branch, double keep_prob, const ForwardOptions& opt) {
  if (!opt.train || keep_prob >= 1.0) return branch;
  if (!opt.rng) throw UsageError("drop path in train mode needs an rng");
  const std::size_t B = branch.dim(0);
  Shape mask_shape(branch.rank(), 1);
  mask_shape[0] = B;
  std::vector<T> mask(B);
  for (T& m : mask) m = opt.rng->bernoulli(keep_prob) ? static_cast<T>(1.0 / keep_prob) : T(0);
  return mul(branch, Tensor<T>(mask_shape, std::move(mask)));
}

}  // namespace detail

/// Pre-norm residual block: x + DropPath(Mod(Norm(x))), then
/// x + DropPath(MLP(Norm(x))).
template <class T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p, const ForwardOptions& opt,
                        ModulatorPair<T>* capture = nullptr) {
  Tensor<T> h;
  {
    CountScope scope(p.name + ".norm1");
    h = p.norm1(x);
  }
  {
    CountScope scope(p.name + ".focal");
    h = focal_modulation(h, p.focal, capture);
  }
  Tensor<T> y;
  {
    CountScope scope(p.name + ".residual");
    y = add(x, detail::drop_path(h, p.keep_prob, opt));
  }
  {
    CountScope scope(p.name + ".norm2");
    h = p.norm2(y);
  }
  {
    CountScope scope(p.name + ".mlp");
    h = p.fc2(gelu(p.fc1(h)));
  }
  CountScope scope(p.name + ".residual");
  return add(y, detail::drop_path(h, p.keep_prob, opt));
}

/// Backbone tokens after the last stage: [B,T',H/32,W/32,8C].
template <class T>
Tensor<T> network_features(const Tensor<T>& video, const NetworkParams<T>& p, const ForwardOptions& opt = {},
                           ModulatorProbe<T>* probe = nullptr) {
  const NetworkConfig& cfg = p.config;
  detail::require_rank(video, 5, "network_forward");
  if (video.dim(1) != cfg.frames || video.dim(2) != cfg.height || video.dim(3) != cfg.width ||
      video.dim(4) != cfg.in_channels) {
    throw DimensionError("network_forward: video " + shape_str(video.shape()) + " does not match configured input [B," +
                         std::to_string(cfg.frames) + "," + std::to_string(cfg.height) + "," +
                         std::to_string(cfg.width) + "," + std::to_string(cfg.in_channels) + "]");
  }
  Tensor<T> x;
  {
    CountScope scope("patch_embed");
    x = patch_embed(video, p.patch_embed, cfg.embedding);
  }
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& stage = p.stages[s];
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
      const bool probe_here = probe && probe->stage == s && probe->block == b;
      x = block_forward(x, stage.blocks[b], opt, probe_here ? &probe->pair : nullptr);
    }
    if (stage.downsample) {
      CountScope scope("stage" + std::to_string(s) + ".downsample");
      x = downsample(x, *stage.downsample);
    }
  }
  return x;
}

/// Logits [B, num_classes]: embed, four stages, final norm, mean over all
/// T'*H*W tokens, linear head.
template <class T>
Tensor<T> network_forward(const Tensor<T>& video, const NetworkParams<T>& p, const ForwardOptions& opt = {},
                          ModulatorProbe<T>* probe = nullptr) {
  Tensor<T> x = network_features(video, p, opt, probe);
  const std::size_t B = x.dim(0), C = x.dim(4);
  {
    CountScope scope("head.norm");
    x = p.head_norm(x);
  }
  {
    CountScope scope("head.pool");
    x = reshape(mean(x, {1, 2, 3}), {B, C});
  }
  CountScope scope("head.fc");
  return p.head(x);
}

/// Forward for the design variant the parameters were built with; the
/// variant is fixed at initialization and checked here.
template <class T>
Tensor<T> design_variant_forward(const Tensor<T>& video, const NetworkParams<T>& p, DesignVariant variant,
                                 const ForwardOptions& opt = {}) {
  if (p.config.focal.variant != variant) {
    throw ConfigError(std::string("parameters were built for variant ") + to_string(p.config.focal.variant) +
                      ", not " + to_string(variant));
  }
  return network_forward(video, p, opt);
}

/// Class probabilities averaged over views (softmax per view, arithmetic
/// mean in view order).
template <class T>
Tensor<T> multi_view_inference(const std::vector<Tensor<T>>& views, const NetworkParams<T>& p) {
  if (views.empty()) throw UsageError("multi_view_inference: no views");
  NoGradGuard guard;
  Tensor<T> acc;
  for (const Tensor<T>& v : views) {
    Tensor<T> probs = softmax(network_forward(v, p));
    acc = acc.defined() ? add(acc, probs) : probs;
  }
  return scale(acc, T(1) / static_cast<T>(views.size()));
}

template <class T>
void save_network(const std::filesystem::path& path, const NetworkParams<T>& p) {
  save_checkpoint(path, p.named());
}

/// Builds the network for `cfg` and fills it from a checkpoint; names and
/// shapes must match exactly.
template <class T>
NetworkParams<T> load_network(const std::filesystem::path& path, const NetworkConfig& cfg) {
  Rng rng(0);
  NetworkParams<T> p = init_network<T>(cfg, rng);
  auto stored = load_checkpoint<T>(path);
  std::unordered_map<std::string, Tensor<T>> by_name;
  for (auto& [name, t] : stored) by_name.emplace(name, t);
  auto named = p.named();
  if (stored.size() != named.size()) {
    throw ConfigError("checkpoint " + path.string() + " has " + std::to_string(stored.size()) +
                      " tensors, network expects " + std::to_string(named.size()));
  }
  for (auto& [name, t] : named) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint " + path.string() + " lacks parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw ConfigError("checkpoint parameter " + name + " has shape " + shape_str(it->second.shape()) +
                        ", network expects " + shape_str(t.shape()));
    }
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
  return p;
}

}  // namespace vfn
