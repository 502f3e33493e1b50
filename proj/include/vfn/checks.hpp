#pragma once

// Finite-difference checks of every differentiable op and of the focal
// modulation layer, shared by the gradcheck command and the test suites.

#include <string>
#include <vector>

#include "vfn/focal.hpp"
#include "vfn/gradcheck.hpp"

namespace vfn {

struct NamedReport {
  std::string name;
  GradCheckReport report;
};

struct GradCheckSuite {
  std::vector<NamedReport> checks;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.report.passed()) return false;
    return true;
  }
  double max_error() const {
    double e = 0.0;
    for (const auto& c : checks) e = std::max(e, c.report.max_error());
    return e;
  }
  void write(std::ostream& os) const {
    for (const auto& c : checks) {
      os << (c.report.passed() ? "PASS " : "FAIL ") << c.name << " max_rel_err " << c.report.max_error() << '\n';
      if (!c.report.passed()) c.report.write(os);
    }
  }
};

namespace detail {

inline Tensor<double> leaf(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(s));
  for (double& x : v) x = rng.uniform(lo, hi);
  Tensor<double> t(s, std::move(v));
  t.set_requires_grad();
  return t;
}

}  // namespace detail

/// Every primitive op on inputs shaped around x = [B,T,H,W,C].
inline GradCheckSuite op_gradchecks(const Shape& x_shape, const FocalModulationConfig& focal,
                                    const GradCheckOptions& opt = {}) {
  if (x_shape.size() != 5) throw DimensionError("op_gradchecks: shape must be [B,T,H,W,C]");
  const std::size_t B = x_shape[0], T = x_shape[1], H = x_shape[2], W = x_shape[3], C = x_shape[4];
  const std::size_t L = focal.focal_levels;
  Rng rng(opt.seed + 101);
  GradCheckSuite s;
  auto check = [&](const std::string& name, const std::function<Tensor<double>()>& f, const NamedTensors<double>& g) {
    s.checks.push_back({name, gradcheck(f, g, opt)});
  };
  using detail::leaf;
  auto x = leaf(x_shape, rng);
  auto w = leaf({C, C}, rng), b = leaf({C}, rng);
  check("linear", [&] { return linear(x, w, b); }, {{"x", x}, {"weight", w}, {"bias", b}});
  check("pointwise_conv", [&] { return pointwise_conv(x, w); }, {{"x", x}, {"weight", w}});
  auto frames = reshape(x.detach(), {B * T, H, W, C});
  frames.set_requires_grad();
  for (std::size_t l = 1; l <= L; ++l) {
    const std::size_t k = focal.kernel_size(l);
    auto k2 = leaf({k, k, C}, rng), k1 = leaf({k, C}, rng);
    check("depthwise_conv2d k" + std::to_string(k), [&] { return depthwise_conv2d(frames, k2); },
          {{"x", frames}, {"kernel", k2}});
    check("depthwise_conv1d k" + std::to_string(k), [&] { return depthwise_conv1d(x, k1); }, {{"x", x}, {"kernel", k1}});
  }
  check("gelu", [&] { return gelu(x); }, {{"x", x}});
  auto y = leaf(x_shape, rng), row = leaf({1, 1, 1, 1, C}, rng);
  check("add", [&] { return add(x, row); }, {{"x", x}, {"row", row}});
  check("sub", [&] { return sub(x, y); }, {{"x", x}, {"y", y}});
  check("mul", [&] { return mul(x, y); }, {{"x", x}, {"y", y}});
  check("scale", [&] { return scale(x, 0.7); }, {{"x", x}});
  check("mean", [&] { return mean(x, {2, 3}); }, {{"x", x}});
  auto pooled = leaf({B, T, 1, 1, C}, rng);
  check("expand", [&] { return expand(pooled, x_shape); }, {{"x", pooled}});
  auto gamma = leaf({C}, rng, 0.5, 1.5), beta = leaf({C}, rng);
  check("layer_norm", [&] { return layer_norm(x, gamma, beta); }, {{"x", x}, {"gamma", gamma}, {"beta", beta}});
  check("reshape", [&] { return reshape(x, {B * T * H, W * C}); }, {{"x", x}});
  check("permute", [&] { return permute(x, {0, 2, 3, 1, 4}); }, {{"x", x}});
  check("slice_last", [&] { return slice_last(x, 1, C); }, {{"x", x}});
  check("concat_last", [&] { return concat_last(x, y); }, {{"x", x}, {"y", y}});
  std::vector<Tensor<double>> levels;
  NamedTensors<double> level_groups;
  for (std::size_t l = 0; l <= L; ++l) {
    levels.push_back(leaf(x_shape, rng));
    level_groups.emplace_back("level" + std::to_string(l), levels.back());
  }
  Shape gs = x_shape;
  gs.back() = L + 1;
  auto gates = leaf(gs, rng);
  level_groups.emplace_back("gates", gates);
  check("gated_aggregate", [&] { return gated_aggregate(levels, gates); }, level_groups);
  if (T % 2 == 0 && H % 2 == 0 && W % 2 == 0) {
    check("patchify", [&] { return patchify(x, 2, 2, 2); }, {{"x", x}});
  }
  check("sum", [&] { return sum(x); }, {{"x", x}});
  auto logits = leaf({B * T, C}, rng, -2.0, 2.0);
  std::vector<int> labels(B * T);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % C);
  auto targets = smoothed_targets<double>(labels, C, 0.1);
  check("softmax_cross_entropy", [&] { return softmax_cross_entropy(logits, targets); }, {{"logits", logits}});
  return s;
}

/// The focal layer for every mixer kind and, for the two-stream kind, every
/// fusion. Parameters are initialized from opt.seed.
inline GradCheckSuite layer_gradchecks(const Shape& x_shape, FocalModulationConfig focal,
                                       const GradCheckOptions& opt = {}) {
  if (x_shape.size() != 5) throw DimensionError("layer_gradchecks: shape must be [B,T,H,W,C]");
  focal.channels = x_shape[4];
  Rng rng(opt.seed + 202);
  GradCheckSuite s;
  auto x = detail::leaf(x_shape, rng);
  auto run = [&](const std::string& name, MixerKind kind) {
    auto p = init_focal_layer<double>(focal, kind, name, rng);
    NamedTensors<double> groups{{"input", x}};
    p.collect(groups);
    s.checks.push_back({name, gradcheck([&] { return focal_modulation(x, p); }, groups, opt)});
  };
  for (auto f : {Fusion::multiply, Fusion::average, Fusion::learned_projection}) {
    focal.fusion = f;
    run(std::string("spatio_temporal/") + to_string(f), MixerKind::spatio_temporal);
  }
  focal.fusion = Fusion::multiply;
  run("spatial", MixerKind::spatial);
  run("factorized", MixerKind::factorized);
  run("temporal", MixerKind::temporal);
  return s;
}

}  // namespace vfn
