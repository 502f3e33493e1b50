#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vfn {

/// Tallies the arithmetic cost of every executed op, attributed to the
/// innermost active CountScope. Install with CountingSession.
struct OpCounter {
  std::map<std::string, std::uint64_t> flops;
  std::vector<std::string> scopes;

  std::uint64_t total() const {
    std::uint64_t sum = 0;
    for (const auto& [name, f] : flops) sum += f;
    return sum;
  }
};

namespace detail {
inline OpCounter*& active_counter() {
  thread_local OpCounter* counter = nullptr;
  return counter;
}
}  // namespace detail

inline void count_flops(std::uint64_t n) {
  OpCounter* c = detail::active_counter();
  if (!c) return;
  c->flops[c->scopes.empty() ? std::string("<unscoped>") : c->scopes.back()] += n;
}

class CountingSession {
 public:
  explicit CountingSession(OpCounter& counter) : previous_(detail::active_counter()) {
    detail::active_counter() = &counter;
  }
  ~CountingSession() { detail::active_counter() = previous_; }
  CountingSession(const CountingSession&) = delete;
  CountingSession& operator=(const CountingSession&) = delete;

 private:
  OpCounter* previous_;
};

class CountScope {
 public:
  explicit CountScope(const std::string& name) : counter_(detail::active_counter()) {
    if (counter_) counter_->scopes.push_back(name);
  }
  ~CountScope() {
    if (counter_) counter_->scopes.pop_back();
  }
  CountScope(const CountScope&) = delete;
  CountScope& operator=(const CountScope&) = delete;

 private:
  OpCounter* counter_;
};

}  // namespace vfn
