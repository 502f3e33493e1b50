#pragma once

#include <algorithm>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "vfn/tensor.hpp"

namespace vfn {

namespace detail {

template <class T>
std::vector<TensorImpl<T>*> reachable_nodes(const Tensor<T>& root) {
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<const TensorImpl<T>*> seen;
  std::vector<const Tensor<T>*> stack{&root};
  while (!stack.empty()) {
    const Tensor<T>* t = stack.back();
    stack.pop_back();
    if (!t->defined() || !t->node() || !seen.insert(t->impl()).second) continue;
    order.push_back(const_cast<TensorImpl<T>*>(t->impl()));
    for (const Tensor<T>& in : t->node()->inputs) stack.push_back(&in);
  }
  std::sort(order.begin(), order.end(),
            [](const TensorImpl<T>* a, const TensorImpl<T>* b) { return a->node->seq > b->node->seq; });
  return order;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients for `params` are added
/// into `accum` (one buffer per parameter, sized to match). Parameters the
/// loss does not reach receive nothing. Shared graph state is only read, so
/// independent losses may be differentiated concurrently.
template <class T>
void backward_into(const Tensor<T>& loss, std::span<const Tensor<T>> params, std::span<std::vector<T>> accum) {
  if (loss.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (params.size() != accum.size()) throw UsageError("backward: parameter/accumulator count mismatch");

  std::unordered_set<const TensorImpl<T>*> wanted;
  for (const Tensor<T>& p : params) wanted.insert(p.impl());

  std::unordered_map<const TensorImpl<T>*, std::vector<T>> grads;
  grads[loss.impl()] = std::vector<T>{T(1)};

  for (TensorImpl<T>* impl : detail::reachable_nodes(loss)) {
    auto it = grads.find(impl);
    if (it == grads.end()) continue;
    std::vector<T> grad_out = wanted.count(impl) ? it->second : std::move(it->second);
    if (!wanted.count(impl)) grads.erase(it);

    const Node<T>& node = *impl->node;
    std::vector<std::span<T>> refs;
    refs.reserve(node.inputs.size());
    for (const Tensor<T>& in : node.inputs) {
      if (!in.defined() || !in.tracks_grad()) {
        refs.emplace_back();
        continue;
      }
      std::vector<T>& g = grads[in.impl()];
      if (g.empty()) g.assign(in.numel(), T(0));
      refs.emplace_back(g);
    }
    node.backward(std::span<const T>(grad_out), GradRefs<T>(std::move(refs)));
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (accum[i].size() != params[i].numel()) throw UsageError("backward: accumulator size mismatch");
    auto it = grads.find(params[i].impl());
    if (it == grads.end()) continue;
    for (std::size_t j = 0; j < accum[i].size(); ++j) accum[i][j] += it->second[j];
  }
}

/// Gradients of a scalar loss with respect to each parameter, zero where
/// the parameter is unreachable from the loss.
template <class T>
std::vector<Tensor<T>> backward(const Tensor<T>& loss, std::span<const Tensor<T>> params) {
  std::vector<std::vector<T>> accum;
  accum.reserve(params.size());
  for (const Tensor<T>& p : params) accum.emplace_back(p.numel(), T(0));
  backward_into(loss, params, std::span<std::vector<T>>(accum));
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) out.emplace_back(params[i].shape(), std::move(accum[i]));
  return out;
}

template <class T>
std::vector<Tensor<T>> backward(const Tensor<T>& loss, std::initializer_list<Tensor<T>> params) {
  std::vector<Tensor<T>> list(params);
  return backward(loss, std::span<const Tensor<T>>(list));
}

}  // namespace vfn
