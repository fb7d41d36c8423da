#pragma once

// Persistent worker pool with a static partition of index ranges. Work is
// split into contiguous chunks; callers keep per-index results so the output
// never depends on which thread ran which chunk.

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace msmv {

class Executor {
 public:
  explicit Executor(unsigned threads = 1) : threads_(std::max(1u, threads)) {
    for (unsigned w = 1; w < threads_; ++w) workers_.emplace_back([this, w] { worker_loop(w); });
  }

  Executor(const Executor&) = delete;
  Executor& operator=(const Executor&) = delete;

  ~Executor() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    start_cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  unsigned threads() const { return threads_; }

  // Calls body(begin, end) on disjoint chunks covering [0, n).
  void for_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    const unsigned used = static_cast<unsigned>(std::min<std::size_t>(threads_, n));
    if (used == 1) {
      body(0, n);
      return;
    }
    {
      std::lock_guard lock(mutex_);
      body_ = &body;
      n_ = n;
      used_ = used;
      pending_ = used - 1;
      errors_.assign(used, nullptr);
      ++generation_;
    }
    start_cv_.notify_all();
    run_chunk(0);
    std::unique_lock lock(mutex_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    body_ = nullptr;
    for (auto& e : errors_)
      if (e) std::rethrow_exception(e);
  }

  template <class F>
  void for_each(std::size_t n, F&& f) {
    for_chunks(n, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) f(i);
    });
  }

 private:
  void run_chunk(unsigned w) {
    const std::size_t b = n_ * w / used_;
    const std::size_t e = n_ * (w + 1) / used_;
    try {
      if (b < e) (*body_)(b, e);
    } catch (...) {
      errors_[w] = std::current_exception();
    }
  }

  void worker_loop(unsigned w) {
    std::size_t seen = 0;
    for (;;) {
      std::unique_lock lock(mutex_);
      start_cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      if (w >= used_) continue;
      lock.unlock();
      run_chunk(w);
      lock.lock();
      if (--pending_ == 0) done_cv_.notify_one();
    }
  }

  unsigned threads_;
  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::condition_variable start_cv_, done_cv_;
  const std::function<void(std::size_t, std::size_t)>* body_ = nullptr;
  std::size_t n_ = 0;
  unsigned used_ = 1;
  unsigned pending_ = 0;
  std::size_t generation_ = 0;
  std::vector<std::exception_ptr> errors_;
  bool stop_ = false;
};

}  // namespace msmv
