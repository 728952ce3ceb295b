// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mixspeech {

// Error taxonomy. The CLI maps Validation/InvalidArgument to exit code 2
// and everything else to exit code 3.
enum class Errc {
  ShapeMismatch,
  InvalidArgument,
  Validation,
  BadMagic,
  BadVersion,
  Truncated,
  Io,
  NonFiniteLoss,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

inline void expect(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

// Worker-thread cap: MIXSPEECH_THREADS if set, else hardware parallelism.
// Results never depend on this value; it only bounds concurrency.
inline unsigned worker_threads() {
  if (const char* env = std::getenv("MIXSPEECH_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs fn(i) for i in [0, n). Work items must be independent; any shared
// accumulation has to happen after the call, in index order.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
  const unsigned threads = std::min<size_t>(worker_threads(), n);
  if (threads <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::exception_ptr first_error;
  std::mutex err_mu;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace mixspeech
