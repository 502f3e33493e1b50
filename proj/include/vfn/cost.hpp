#pragma once

// Closed-form parameter and FLOP counts. A FLOP is one multiply or one add
// (a multiply-accumulate is 2); bias adds, activations and normalization
// are charged per element: GeLU 1, layer norm 5, mean 1 per input element,
// gated aggregation 2 per level per output element. Reshapes, slices,
// concatenation and broadcasting are free. The op kernels count with the
// same convention at run time, which is what the tests compare against.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "vfn/backbone.hpp"

namespace vfn {

struct CostEntry {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  Shape input;  // [B,T,H,W,C]; empty for parameter-only reports
  std::vector<CostEntry> entries;

  std::uint64_t total_params() const {
    std::uint64_t n = 0;
    for (const auto& e : entries) n += e.params;
    return n;
  }
  std::uint64_t total_flops() const {
    std::uint64_t n = 0;
    for (const auto& e : entries) n += e.flops;
    return n;
  }
  const CostEntry* find(const std::string& layer) const {
    for (const auto& e : entries)
      if (e.layer == layer) return &e;
    return nullptr;
  }

  /// `layer,params,flops` rows, then a `total` row.
  void write_csv(std::ostream& os) const {
    os << "layer,params,flops\n";
    for (const auto& e : entries) os << e.layer << ',' << e.params << ',' << e.flops << '\n';
    os << "total," << total_params() << ',' << total_flops() << '\n';
  }
};

namespace cost {

using u64 = std::uint64_t;

inline u64 linear_params(u64 in, u64 out, bool bias = true) { return in * out + (bias ? out : 0); }
inline u64 linear_flops(u64 rows, u64 in, u64 out, bool bias = true) { return 2 * rows * in * out + (bias ? rows * out : 0); }

inline u64 focal_params(const FocalModulationConfig& cfg, MixerKind kind) {
  const u64 C = cfg.channels, L = cfg.focal_levels;
  u64 n = linear_params(C, C) + linear_params(C, C);  // q, out
  if (has_spatial(kind)) {
    n += linear_params(C, C + L + 1) + C * C;
    for (u64 l = 1; l <= L; ++l) {
      const u64 k = cfg.kernel_size(l);
      n += k * k * C + (kind == MixerKind::factorized ? k * C : 0);
    }
  }
  if (has_temporal(kind)) {
    n += linear_params(C, C + L + 1) + C * C;
    for (u64 l = 1; l <= L; ++l) n += cfg.kernel_size(l) * C;
  }
  if (kind == MixerKind::spatio_temporal && cfg.fusion == Fusion::learned_projection) n += linear_params(2 * C, C);
  return n;
}

/// One modulation layer on a [B,T,H,W,C] input.
inline u64 focal_flops(const FocalModulationConfig& cfg, MixerKind kind, u64 B, u64 T, u64 H, u64 W) {
  const u64 C = cfg.channels, L = cfg.focal_levels;
  const u64 P = B * T * H * W, PC = P * C;
  u64 f = 2 * linear_flops(P, C, C);  // q, out
  if (has_spatial(kind)) {
    f += linear_flops(P, C, C + L + 1);
    for (u64 l = 1; l <= L; ++l) {
      const u64 k = cfg.kernel_size(l);
      f += 2 * PC * k * k + PC;  // conv, GeLU
      if (kind == MixerKind::factorized) f += 2 * PC * k;
    }
    f += PC + B * T * C;           // spatial mean, GeLU of the pooled level
    f += 2 * (L + 1) * PC;         // gated aggregation
    f += linear_flops(P, C, C, false);
  }
  if (has_temporal(kind)) {
    const u64 R = B * T, RC = R * C;
    f += PC;  // spatial pooling of the input
    f += linear_flops(R, C, C + L + 1);
    for (u64 l = 1; l <= L; ++l) f += 2 * RC * cfg.kernel_size(l) + RC;
    f += RC + B * C;
    f += 2 * (L + 1) * RC;
    f += linear_flops(R, C, C, false);
  }
  if (kind == MixerKind::spatio_temporal) {
    switch (cfg.fusion) {
      case Fusion::multiply: f += 2 * PC; break;
      case Fusion::average: f += 3 * PC; break;
      case Fusion::learned_projection: f += linear_flops(P, 2 * C, C) + PC; break;
    }
  } else {
    f += PC;
  }
  return f;
}

}  // namespace cost

/// Per-layer costs of the network for `input` [B,T,H,W,Cin]. Pass an empty
/// shape to get parameters only.
inline CostReport cost_report(const NetworkConfig& cfg, const Shape& input) {
  cfg.validate();
  using cost::u64;
  const bool with_flops = !input.empty();
  if (with_flops) {
    if (input.size() != 5) throw DimensionError("cost_report: input must be [B,T,H,W,C], got " + shape_str(input));
    if (input[4] != cfg.in_channels || input[2] % 32 || input[3] % 32 || input[1] % cfg.temporal_patch()) {
      throw ConfigError("cost_report: input " + shape_str(input) + " does not fit the network configuration");
    }
  }
  CostReport r;
  r.input = input;
  const u64 B = with_flops ? input[0] : 0;
  const u64 Tt = with_flops ? input[1] / cfg.temporal_patch() : 0;
  u64 H = with_flops ? input[2] / 4 : 0, W = with_flops ? input[3] / 4 : 0;
  auto flops = [&](u64 v) { return with_flops ? v : 0; };

  const u64 C0 = cfg.embed_dim, patch_in = cfg.temporal_patch() * 16 * cfg.in_channels;
  r.entries.push_back({"patch_embed", cost::linear_params(patch_in, C0), flops(cost::linear_flops(B * Tt * H * W, patch_in, C0))});
  std::size_t index = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    const u64 C = cfg.stage_width(s), Hd = cfg.mlp_hidden(s);
    const u64 P = B * Tt * H * W;
    FocalModulationConfig fc = cfg.focal;
    fc.channels = C;
    for (std::size_t b = 0; b < cfg.blocks_per_stage[s]; ++b, ++index) {
      const std::string name = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      const MixerKind kind = mixer_for_block(cfg.focal.variant, index, cfg.total_blocks());
      r.entries.push_back({name + ".norm1", 2 * C, flops(5 * P * C)});
      r.entries.push_back({name + ".focal", cost::focal_params(fc, kind), flops(cost::focal_flops(fc, kind, B, Tt, H, W))});
      r.entries.push_back({name + ".residual", 0, flops(2 * P * C)});
      r.entries.push_back({name + ".norm2", 2 * C, flops(5 * P * C)});
      r.entries.push_back({name + ".mlp", cost::linear_params(C, Hd) + cost::linear_params(Hd, C),
                           flops(cost::linear_flops(P, C, Hd) + P * Hd + cost::linear_flops(P, Hd, C))});
    }
    if (s < 3) {
      H /= 2;
      W /= 2;
      r.entries.push_back({"stage" + std::to_string(s) + ".downsample", cost::linear_params(4 * C, 2 * C),
                           flops(cost::linear_flops(B * Tt * H * W, 4 * C, 2 * C))});
    }
  }
  const u64 C4 = cfg.stage_width(3), P4 = B * Tt * H * W, K = cfg.num_classes;
  r.entries.push_back({"head.norm", 2 * C4, flops(5 * P4 * C4)});
  r.entries.push_back({"head.pool", 0, flops(P4 * C4)});
  r.entries.push_back({"head.fc", cost::linear_params(C4, K), flops(cost::linear_flops(B, C4, K))});
  return r;
}

inline CostReport count_params(const NetworkConfig& cfg) { return cost_report(cfg, {}); }

inline CostReport count_flops(const NetworkConfig& cfg, const Shape& input) { return cost_report(cfg, input); }

/// Single-head self-attention over N tokens of width C: q,k,v and output
/// projections (4NC^2) plus scores and weighted sum (4N^2C).
inline std::uint64_t self_attention_flops(std::uint64_t N, std::uint64_t C) {
  if (N == 0 || C == 0) throw ConfigError("self_attention_flops: N and C must be positive");
  return 4 * N * C * C + 4 * N * N * C;
}

/// A parallel spatio-temporal modulation layer over N tokens laid out as a
/// single frame row [1,1,1,N,C].
inline std::uint64_t modulation_flops(std::uint64_t N, const FocalModulationConfig& cfg) {
  return cost::focal_flops(cfg, MixerKind::spatio_temporal, 1, 1, 1, N);
}

/// Smallest N from which self-attention costs more than modulation for
/// every larger token count. The difference is a quadratic in N with a
/// positive leading term, so once positive past its vertex it stays so.
inline std::uint64_t attention_crossover(const FocalModulationConfig& cfg) {
  std::uint64_t N = 1;
  while (true) {
    const auto a = static_cast<double>(self_attention_flops(N, cfg.channels));
    const auto m = static_cast<double>(modulation_flops(N, cfg));
    const auto a1 = static_cast<double>(self_attention_flops(N + 1, cfg.channels));
    const auto m1 = static_cast<double>(modulation_flops(N + 1, cfg));
    if (a > m && a1 - m1 > a - m) return N;
    ++N;
  }
}

}  // namespace vfn
