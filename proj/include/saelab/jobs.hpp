#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace saelab {

/// Runs fn(0..n-1) on up to `workers` threads. Results (and per-job error
/// messages) are stored by job index, so output order never depends on
/// scheduling.
template <class T>
struct JobResult {
  std::optional<T> value;
  std::string error;
  std::exception_ptr exception;
};

template <class T, class Fn>
std::vector<JobResult<T>> run_jobs(std::size_t n, int workers, Fn&& fn) {
  std::vector<JobResult<T>> results(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        results[i].value = fn(i);
      } catch (const std::exception& e) {
        results[i].error = e.what();
        results[i].exception = std::current_exception();
      }
    }
  };
  const auto count = static_cast<std::size_t>(std::max(1, workers));
  if (count == 1 || n <= 1) {
    worker();
    return results;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(count, n); ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return results;
}

/// run_jobs variant that rethrows the first failure (by index).
template <class T, class Fn>
std::vector<T> run_jobs_or_throw(std::size_t n, int workers, Fn&& fn) {
  auto results = run_jobs<T>(n, workers, std::forward<Fn>(fn));
  std::vector<T> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!results[i].value) std::rethrow_exception(results[i].exception);
    out.push_back(std::move(*results[i].value));
  }
  return out;
}

}  // namespace saelab
