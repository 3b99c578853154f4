#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace medix {

using Index = Eigen::Index;

/// Error category; the CLI maps these to exit codes.
enum class ErrorKind { config, data, shape, numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

  static const char* kind_name(ErrorKind k) {
    switch (k) {
      case ErrorKind::config: return "config";
      case ErrorKind::data: return "data";
      case ErrorKind::shape: return "shape";
      case ErrorKind::numeric: return "numeric";
    }
    return "unknown";
  }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Global worker-thread budget for batch-parallel kernels. Parallel sections
/// only split work whose results are independent per sample, so outputs are
/// identical for any thread count; 1 is the guaranteed-serial path.
inline int& num_threads() {
  static int n = 1;
  return n;
}

inline void set_num_threads(int n) { num_threads() = n < 1 ? 1 : n; }

/// Runs fn(i) for i in [0, n). Work items must be independent (disjoint
/// outputs, no shared mutable state); results do not depend on thread count.
template <typename Fn>
void parallel_for(Index n, Fn&& fn) {
  const int workers = std::min<Index>(num_threads(), n) > 1 ? std::min<int>(num_threads(), static_cast<int>(n)) : 1;
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<Index> next{0};
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (Index i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace medix
