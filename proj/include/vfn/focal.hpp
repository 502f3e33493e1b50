#pragma once

// Spatio-temporal focal modulation.
//
// A layer projects its input into a query and, per branch, a context map
// plus L+1 gates. The spatial branch contextualizes every frame with L
// depthwise 2-D convolutions of growing kernel size followed by a global
// spatial average; the temporal branch does the same along time with
// depthwise 1-D convolutions over the spatially averaged clip, so its
// modulator is shared by every position of a frame. Gated aggregation
// blends the levels, a pointwise projection mixes channels, and the
// modulators interact with the query by element-wise product.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vfn/params.hpp"

namespace vfn {

enum class Fusion { multiply, average, learned_projection };

/// The five spatio-temporal arrangements compared in the design study.
enum class DesignVariant { a_spatial_avg, b_factorized_conv, c_factorized_encoder, d_alternating, e_parallel };

/// What one modulation layer mixes.
enum class MixerKind { spatial, factorized, temporal, spatio_temporal };

inline const char* to_string(Fusion f) {
  switch (f) {
    case Fusion::multiply: return "multiply";
    case Fusion::average: return "average";
    case Fusion::learned_projection: return "learned_projection";
  }
  return "?";
}

inline const char* to_string(DesignVariant v) {
  switch (v) {
    case DesignVariant::a_spatial_avg: return "a_spatial_avg";
    case DesignVariant::b_factorized_conv: return "b_factorized_conv";
    case DesignVariant::c_factorized_encoder: return "c_factorized_encoder";
    case DesignVariant::d_alternating: return "d_alternating";
    case DesignVariant::e_parallel: return "e_parallel";
  }
  return "?";
}

inline const char* to_string(MixerKind k) {
  switch (k) {
    case MixerKind::spatial: return "spatial";
    case MixerKind::factorized: return "factorized";
    case MixerKind::temporal: return "temporal";
    case MixerKind::spatio_temporal: return "spatio_temporal";
  }
  return "?";
}

inline Fusion parse_fusion(const std::string& s) {
  for (Fusion f : {Fusion::multiply, Fusion::average, Fusion::learned_projection})
    if (s == to_string(f)) return f;
  throw ConfigError("unknown fusion method '" + s + "' (multiply | average | learned_projection)");
}

inline DesignVariant parse_variant(const std::string& s) {
  for (DesignVariant v : {DesignVariant::a_spatial_avg, DesignVariant::b_factorized_conv,
                          DesignVariant::c_factorized_encoder, DesignVariant::d_alternating, DesignVariant::e_parallel}) {
    if (s == to_string(v) || (s.size() == 1 && s[0] == to_string(v)[0])) return v;
  }
  throw ConfigError("unknown design variant '" + s + "' (a_spatial_avg | b_factorized_conv | c_factorized_encoder | "
                    "d_alternating | e_parallel)");
}

struct FocalModulationConfig {
  std::size_t channels = 96;
  std::size_t focal_levels = 2;
  std::size_t base_kernel = 3;
  std::size_t kernel_step = 2;
  Fusion fusion = Fusion::multiply;
  DesignVariant variant = DesignVariant::e_parallel;

  /// Kernel size at focal level `level` (1-based): base + (level-1)*step.
  std::size_t kernel_size(std::size_t level) const { return base_kernel + (level - 1) * kernel_step; }

  bool operator==(const FocalModulationConfig&) const = default;

  void validate() const {
    if (channels == 0) throw ConfigError("focal: channels must be positive");
    if (focal_levels == 0) throw ConfigError("focal: focal_levels must be >= 1");
    if (base_kernel % 2 == 0) throw ConfigError("focal: base_kernel must be odd");
    if (kernel_step == 0 || kernel_step % 2 != 0) throw ConfigError("focal: kernel_step must be positive and even");
  }
};

/// Layer kind for block `index` of `total` under a design variant. The
/// factorized encoder runs the first ceil(total/2) blocks spatially.
inline MixerKind mixer_for_block(DesignVariant v, std::size_t index, std::size_t total) {
  switch (v) {
    case DesignVariant::a_spatial_avg: return MixerKind::spatial;
    case DesignVariant::b_factorized_conv: return MixerKind::factorized;
    case DesignVariant::c_factorized_encoder: return index < (total + 1) / 2 ? MixerKind::spatial : MixerKind::temporal;
    case DesignVariant::d_alternating: return index % 2 == 0 ? MixerKind::spatial : MixerKind::temporal;
    case DesignVariant::e_parallel: return MixerKind::spatio_temporal;
  }
  throw ConfigError("unknown design variant");
}

template <class T>
struct SpatialBranch {
  Linear<T> in_proj;                    // C -> C + (L+1): context map and gates
  std::vector<Tensor<T>> kernels;       // L depthwise [k,k,C]
  std::vector<Tensor<T>> time_kernels;  // factorized kind only: L depthwise [k,C] along time
  Tensor<T> ctx_proj;                   // pointwise [C,C]
};

template <class T>
struct TemporalBranch {
  Linear<T> in_proj;               // C -> C + (L+1)
  std::vector<Tensor<T>> kernels;  // L depthwise [k,C]
  Tensor<T> ctx_proj;              // pointwise [C,C]
};

template <class T>
struct FocalLayerParams {
  std::string name;
  MixerKind kind = MixerKind::spatio_temporal;
  Fusion fusion = Fusion::multiply;
  std::size_t channels = 0;
  std::size_t levels = 0;
  Linear<T> q_proj;
  std::optional<SpatialBranch<T>> spatial;
  std::optional<TemporalBranch<T>> temporal;
  Linear<T> fuse_proj;  // learned_projection fusion only: [2C, C]
  Linear<T> out_proj;

  void collect(NamedTensors<T>& out) const {
    q_proj.collect(name + ".q", out);
    if (spatial) {
      spatial->in_proj.collect(name + ".spatial.in", out);
      for (std::size_t l = 0; l < spatial->kernels.size(); ++l)
        out.emplace_back(name + ".spatial.hc" + std::to_string(l) + ".kernel", spatial->kernels[l]);
      for (std::size_t l = 0; l < spatial->time_kernels.size(); ++l)
        out.emplace_back(name + ".spatial.time" + std::to_string(l) + ".kernel", spatial->time_kernels[l]);
      out.emplace_back(name + ".spatial.ctx.weight", spatial->ctx_proj);
    }
    if (temporal) {
      temporal->in_proj.collect(name + ".temporal.in", out);
      for (std::size_t l = 0; l < temporal->kernels.size(); ++l)
        out.emplace_back(name + ".temporal.hc" + std::to_string(l) + ".kernel", temporal->kernels[l]);
      out.emplace_back(name + ".temporal.ctx.weight", temporal->ctx_proj);
    }
    if (fuse_proj.weight.defined()) fuse_proj.collect(name + ".fuse", out);
    out_proj.collect(name + ".out", out);
  }
};

inline bool has_spatial(MixerKind k) { return k != MixerKind::temporal; }
inline bool has_temporal(MixerKind k) { return k == MixerKind::temporal || k == MixerKind::spatio_temporal; }

template <class T>
FocalLayerParams<T> init_focal_layer(const FocalModulationConfig& cfg, MixerKind kind, std::string name, Rng& rng) {
  cfg.validate();
  const std::size_t C = cfg.channels, L = cfg.focal_levels;
  FocalLayerParams<T> p;
  p.name = std::move(name);
  p.kind = kind;
  p.fusion = cfg.fusion;
  p.channels = C;
  p.levels = L;
  p.q_proj = Linear<T>::init(C, C, true, rng);
  if (has_spatial(kind)) {
    SpatialBranch<T> s;
    s.in_proj = Linear<T>::init(C, C + L + 1, true, rng);
    for (std::size_t l = 1; l <= L; ++l) {
      const std::size_t k = cfg.kernel_size(l);
      s.kernels.push_back(uniform_param<T>({k, k, C}, variance_preserving_bound(k * k), rng));
      if (kind == MixerKind::factorized)
        s.time_kernels.push_back(uniform_param<T>({k, C}, variance_preserving_bound(k), rng));
    }
    s.ctx_proj = uniform_param<T>({C, C}, variance_preserving_bound(C), rng);
    p.spatial = std::move(s);
  }
  if (has_temporal(kind)) {
    TemporalBranch<T> t;
    t.in_proj = Linear<T>::init(C, C + L + 1, true, rng);
    for (std::size_t l = 1; l <= L; ++l) {
      const std::size_t k = cfg.kernel_size(l);
      t.kernels.push_back(uniform_param<T>({k, C}, variance_preserving_bound(k), rng));
    }
    t.ctx_proj = uniform_param<T>({C, C}, variance_preserving_bound(C), rng);
    p.temporal = std::move(t);
  }
  if (kind == MixerKind::spatio_temporal && cfg.fusion == Fusion::learned_projection)
    p.fuse_proj = Linear<T>::init(2 * C, C, true, rng);
  p.out_proj = Linear<T>::init(C, C, true, rng);
  return p;
}

/// Spatial hierarchical contextualization of z0: [N,H,W,C]. Returns L+1
/// maps: GeLU(DWConv(previous)) per level, then GeLU of the spatial mean of
/// the last level broadcast back to HxW. With `time_kernels` (factorized
/// 3-D variant) each level also convolves along time, treating N as
/// `frames`-long clips.
template <class T>
std::vector<Tensor<T>> hierarchical_contextualize_spatial(const Tensor<T>& z0, std::span<const Tensor<T>> kernels,
                                                          std::span<const Tensor<T>> time_kernels = {},
                                                          std::size_t frames = 1) {
  detail::require_rank(z0, 4, "hierarchical_contextualize_spatial");
  const std::size_t N = z0.dim(0), H = z0.dim(1), W = z0.dim(2), C = z0.dim(3);
  if (!time_kernels.empty() && (time_kernels.size() != kernels.size() || N % frames != 0)) {
    throw DimensionError("hierarchical_contextualize_spatial: time kernels/frames do not match input");
  }
  std::vector<Tensor<T>> levels;
  levels.reserve(kernels.size() + 1);
  Tensor<T> z = z0;
  for (std::size_t l = 0; l < kernels.size(); ++l) {
    const std::size_t k = kernels[l].dim(0);
    if (k > 2 * std::min(H, W) + 1) {
      warn_once("spatial focal kernel " + std::to_string(k) + " exceeds 2*min(H,W)+1 for a " + std::to_string(H) + "x" +
           std::to_string(W) + " map; zero padding absorbs the excess");
    }
    Tensor<T> c = depthwise_conv2d(z, kernels[l]);
    if (!time_kernels.empty()) {
      c = depthwise_conv1d(reshape(c, {N / frames, frames, H, W, C}), time_kernels[l]);
      c = reshape(c, {N, H, W, C});
    }
    z = gelu(c);
    levels.push_back(z);
  }
  levels.push_back(expand(gelu(mean(z, {1, 2})), z.shape()));
  return levels;
}

/// Temporal hierarchical contextualization of z0: [N,T,C] with depthwise
/// 1-D convolutions; the last level is GeLU of the temporal mean.
template <class T>
std::vector<Tensor<T>> hierarchical_contextualize_temporal(const Tensor<T>& z0, std::span<const Tensor<T>> kernels) {
  detail::require_rank(z0, 3, "hierarchical_contextualize_temporal");
  std::vector<Tensor<T>> levels;
  levels.reserve(kernels.size() + 1);
  Tensor<T> z = z0;
  for (const Tensor<T>& k : kernels) {
    z = gelu(depthwise_conv1d(z, k));
    levels.push_back(z);
  }
  levels.push_back(expand(gelu(mean(z, {1})), z.shape()));
  return levels;
}

/// Both modulators of a layer, each [B,T,H,W,C]. The temporal modulator is
/// broadcast over H and W. Either is undefined when its branch is absent.
template <class T>
struct ModulatorPair {
  Tensor<T> spatial;
  Tensor<T> temporal;
};

namespace detail {

template <class T>
void require_finite(const Tensor<T>& t, const std::string& layer, const char* what) {
  if (!all_finite<T>(t.data())) throw NumericError("focal layer " + layer + ": non-finite " + what + " modulator");
}

}  // namespace detail

/// One focal modulation layer on x: [B,T,H,W,C], dispatching on the
/// layer kind. Optionally captures the modulators (detached).
template <class T>
Tensor<T> focal_modulation(const Tensor<T>& x, const FocalLayerParams<T>& p, ModulatorPair<T>* capture = nullptr) {
  detail::require_rank(x, 5, "focal_modulation");
  const std::size_t B = x.dim(0), Tn = x.dim(1), H = x.dim(2), W = x.dim(3), C = x.dim(4), L = p.levels;
  if (C != p.channels) {
    throw DimensionError("focal layer " + p.name + ": expects " + std::to_string(p.channels) +
                         " channels, input " + shape_str(x.shape()));
  }
  const Tensor<T> q = p.q_proj(x);

  Tensor<T> spatial_mod, temporal_mod;
  if (p.spatial) {
    const SpatialBranch<T>& s = *p.spatial;
    Tensor<T> proj = s.in_proj(reshape(x, {B * Tn, H, W, C}));
    Tensor<T> z = slice_last(proj, 0, C);
    Tensor<T> gates = slice_last(proj, C, C + L + 1);
    auto levels = hierarchical_contextualize_spatial<T>(z, s.kernels, s.time_kernels, Tn);
    Tensor<T> agg = gated_aggregate(levels, gates);
    spatial_mod = reshape(pointwise_conv(agg, s.ctx_proj), {B, Tn, H, W, C});
    detail::require_finite(spatial_mod, p.name, "spatial");
  }
  if (p.temporal) {
    const TemporalBranch<T>& t = *p.temporal;
    Tensor<T> pooled = reshape(mean(x, {2, 3}), {B, Tn, C});
    Tensor<T> proj = t.in_proj(pooled);
    Tensor<T> z = slice_last(proj, 0, C);
    Tensor<T> gates = slice_last(proj, C, C + L + 1);
    auto levels = hierarchical_contextualize_temporal<T>(z, t.kernels);
    Tensor<T> agg = gated_aggregate(levels, gates);
    temporal_mod = reshape(pointwise_conv(agg, t.ctx_proj), {B, Tn, 1, 1, C});
    detail::require_finite(temporal_mod, p.name, "temporal");
  }

  Tensor<T> mixed;
  if (spatial_mod.defined() && temporal_mod.defined()) {
    switch (p.fusion) {
      case Fusion::multiply:
        mixed = mul(mul(q, spatial_mod), temporal_mod);
        break;
      case Fusion::average:
        mixed = mul(q, scale(add(spatial_mod, temporal_mod), T(0.5)));
        break;
      case Fusion::learned_projection:
        mixed = mul(q, p.fuse_proj(concat_last(spatial_mod, expand(temporal_mod, x.shape()))));
        break;
    }
  } else {
    mixed = mul(q, spatial_mod.defined() ? spatial_mod : temporal_mod);
  }

  if (capture) {
    capture->spatial = spatial_mod.defined() ? spatial_mod.detach() : Tensor<T>{};
    if (temporal_mod.defined()) {
      NoGradGuard guard;
      capture->temporal = expand(temporal_mod.detach(), x.shape());
    } else {
      capture->temporal = Tensor<T>{};
    }
  }
  return p.out_proj(mixed);
}

/// The parallel two-stream layer: y = out(q(x) * h_s(M_s) * h_t(M_t)) with
/// the configured fusion.
template <class T>
Tensor<T> spatio_temporal_focal_modulation(const Tensor<T>& x, const FocalLayerParams<T>& p,
                                           ModulatorPair<T>* capture = nullptr) {
  if (p.kind != MixerKind::spatio_temporal) {
    throw ConfigError("focal layer " + p.name + " is " + to_string(p.kind) + ", not spatio_temporal");
  }
  return focal_modulation(x, p, capture);
}

}  // namespace vfn
