#pragma once

#include <cmath>
#include <string>

#include "vfn/io.hpp"
#include "vfn/ops.hpp"
#include "vfn/random.hpp"

namespace vfn {

template <class T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<T> data(numel_of(shape));
  for (T& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> t(std::move(shape), std::move(data));
  t.set_requires_grad();
  return t;
}

/// Uniform bound giving unit-variance outputs for unit-variance inputs.
inline double variance_preserving_bound(std::size_t fan_in) { return std::sqrt(3.0 / static_cast<double>(fan_in)); }

template <class T>
Tensor<T> constant_param(Shape shape, T value) {
  Tensor<T> t = Tensor<T>::full(std::move(shape), value);
  t.set_requires_grad();
  return t;
}

/// Dense projection over the last axis; weight is [in, out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when bias-free

  /// Uniform(+-sqrt(3/in)) weights, zero bias.
  static Linear init(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    Linear l;
    l.weight = uniform_param<T>({in, out}, variance_preserving_bound(in), rng);
    if (with_bias) l.bias = constant_param<T>({out}, T(0));
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNorm init(std::size_t channels) {
    return {constant_param<T>({channels}, T(1)), constant_param<T>({channels}, T(0))};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

}  // namespace vfn
