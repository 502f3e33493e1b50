#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vfn/error.hpp"

namespace vfn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor;

/// Gradient buffers handed to a backward rule, one per recorded input.
/// An empty span means the input does not need a gradient.
template <class T>
class GradRefs {
 public:
  explicit GradRefs(std::vector<std::span<T>> refs) : refs_(std::move(refs)) {}
  bool wants(std::size_t i) const { return !refs_[i].empty(); }
  std::span<T> operator[](std::size_t i) const { return refs_[i]; }

 private:
  std::vector<std::span<T>> refs_;
};

template <class T>
using BackwardFn = std::function<void(std::span<const T> grad_out, const GradRefs<T>& grad_in)>;

/// One recorded forward operation. Sequence numbers increase monotonically,
/// so sorting by sequence gives a topological order of the graph.
template <class T>
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<Tensor<T>> inputs;
  BackwardFn<T> backward;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;
};

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Operations producing tensors record a graph node whenever
/// grad mode is on and some input tracks gradients.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : Tensor(shape, std::vector<T>(numel_of(shape), T(0))) {}

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<TensorImpl<T>>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimension sizes must be >= 1, got " + shape_str(shape));
    }
    if (numel_of(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value) {
    std::vector<T> data(numel_of(shape), value);
    return Tensor(std::move(shape), std::move(data));
  }
  static Tensor of(Shape shape, std::initializer_list<T> values) {
    return Tensor(std::move(shape), std::vector<T>(values));
  }
  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// In-place access. Mutating a tensor that a live graph saved for backward
  /// invalidates that graph; optimizers only touch leaves after backward.
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  T operator[](std::size_t flat) const { return impl_->data[flat]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  /// True for leaves that require grad and for any recorded result.
  bool tracks_grad() const { return impl_ && (impl_->requires_grad || impl_->node); }
  const std::shared_ptr<Node<T>>& node() const { return impl_->node; }

  Tensor detach() const {
    Tensor out;
    out.impl_ = std::make_shared<TensorImpl<T>>();
    out.impl_->shape = impl_->shape;
    out.impl_->data = impl_->data;
    return out;
  }
  Tensor clone() const {
    Tensor out = detach();
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    std::transform(impl_->data.begin(), impl_->data.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out));
  }

  const TensorImpl<T>* impl() const { return impl_.get(); }
  TensorImpl<T>* impl() { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <class T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

namespace detail {

template <class T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t && t->defined() && t->tracks_grad()) return true;
  }
  return false;
}

/// Attaches a backward rule to `out`. Inputs that are undefined are kept as
/// placeholders and never receive gradients.
template <class T>
void attach(Tensor<T>& out, const char* op, std::vector<Tensor<T>> inputs, BackwardFn<T> fn) {
#ifndef NDEBUG
  bool finite_in = std::all_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return !t.defined() || all_finite<T>(t.data()); });
  if (finite_in && !all_finite<T>(out.data())) {
    throw NumericError(std::string("op ") + op + " produced non-finite output from finite inputs");
  }
#endif
  auto node = std::make_shared<Node<T>>();
  node->seq = node_counter().fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(fn);
  out.impl()->node = std::move(node);
}

}  // namespace detail

}  // namespace vfn
