#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "vfn/autograd.hpp"
#include "vfn/io.hpp"
#include "vfn/ops.hpp"
#include "vfn/random.hpp"

namespace vfn {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t samples = 64;  // coordinates per group; all of them when the group is smaller
  double floor = 1e-6;       // denominator floor of the relative error
  std::uint64_t seed = 0;
};

struct GradCheckGroup {
  std::string name;
  std::size_t checked = 0;
  double max_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
  bool finite = true;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;

  bool passed() const {
    for (const auto& g : groups)
      if (!g.passed) return false;
    return true;
  }

  double max_error() const {
    double e = 0.0;
    for (const auto& g : groups) e = std::max(e, g.finite ? g.max_error : INFINITY);
    return e;
  }

  void write(std::ostream& os) const {
    for (const auto& g : groups) {
      os << (g.passed ? "ok   " : "FAIL ") << g.name << " checked " << g.checked << " max_rel_err " << g.max_error
         << " at " << g.worst_index << " (analytic " << g.analytic << ", numeric " << g.numeric << ")";
      if (!g.finite) os << " non-finite difference";
      os << '\n';
    }
  }
};

/// Compares reverse-mode gradients of sum(f() * R), R a fixed random
/// projection, with central differences for each named tensor. `f`
/// recomputes the output from the current tensor values, which are
/// perturbed in place and restored.
inline GradCheckReport gradcheck(const std::function<Tensor<double>()>& f, const NamedTensors<double>& groups,
                                 const GradCheckOptions& opt = {}) {
  Rng rng(opt.seed);
  Tensor<double> probe;
  {
    NoGradGuard guard;
    probe = f();
  }
  std::vector<double> r(probe.numel());
  for (double& v : r) v = rng.uniform(-1.0, 1.0);
  const Tensor<double> R(probe.shape(), std::move(r));
  auto objective = [&] { return sum(mul(f(), R)); };

  std::vector<Tensor<double>> tensors;
  for (const auto& [name, t] : groups) {
    if (!t.requires_grad()) throw UsageError("gradcheck: " + name + " does not require grad");
    tensors.push_back(t);
  }
  const std::vector<Tensor<double>> analytic = backward(objective(), std::span<const Tensor<double>>(tensors));

  GradCheckReport report;
  for (std::size_t g = 0; g < tensors.size(); ++g) {
    Tensor<double> t = tensors[g];
    GradCheckGroup res;
    res.name = groups[g].first;
    std::vector<std::size_t> coords = rng.permutation(t.numel());
    if (coords.size() > opt.samples) coords.resize(opt.samples);
    for (std::size_t i : coords) {
      auto d = t.mutable_data();
      const double saved = d[i];
      double plus, minus;
      {
        NoGradGuard guard;
        d[i] = saved + opt.step;
        plus = objective().item();
        d[i] = saved - opt.step;
        minus = objective().item();
        d[i] = saved;
      }
      const double numeric = (plus - minus) / (2.0 * opt.step);
      const double a = analytic[g].data()[i];
      ++res.checked;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        res.finite = false;
        res.passed = false;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
        break;
      }
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
      if (err > res.max_error || res.checked == 1) {
        res.max_error = err;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
    if (res.finite) res.passed = res.max_error <= opt.tolerance;
    report.groups.push_back(res);
  }
  return report;
}

}  // namespace vfn
