#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace dmc {

// Persistent worker pool for data-parallel loops. Work is split into blocks
// whose boundaries depend only on (n, grain), never on the worker count, so
// any per-block output is identical no matter how many threads run. Callers
// that reduce must fold per-block partials serially afterwards.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  static void set_threads(int n) { requested_threads() = n; }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  // Runs fn(block) for block in [0, n_blocks), each exactly once.
  void run_blocks(size_t n_blocks, const std::function<void(size_t)>& fn) {
    if (n_blocks == 0) return;
    if (workers_.empty() || n_blocks == 1) {
      for (size_t b = 0; b < n_blocks; ++b) fn(b);
      return;
    }
    std::unique_lock lock(mutex_);
    job_ = &fn;
    next_block_.store(0, std::memory_order_relaxed);
    end_block_ = n_blocks;
    pending_ = static_cast<int>(workers_.size());
    ++generation_;
    lock.unlock();
    cv_start_.notify_all();
    work();  // caller participates
    lock.lock();
    cv_done_.wait(lock, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
      ++generation_;
    }
    cv_start_.notify_all();
    for (auto& t : workers_) t.join();
  }

 private:
  static int& requested_threads() {
    static int n = 0;  // 0: use hardware_concurrency
    return n;
  }

  ThreadPool() {
    int n = requested_threads();
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    for (int i = 1; i < n; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock lock(mutex_);
      cv_start_.wait(lock, [&] { return generation_ != seen; });
      seen = generation_;
      if (stop_) return;
      lock.unlock();
      work();
      lock.lock();
      if (--pending_ == 0) cv_done_.notify_one();
    }
  }

  void work() {
    const auto& fn = *job_;
    for (;;) {
      const size_t b = next_block_.fetch_add(1, std::memory_order_relaxed);
      if (b >= end_block_) return;
      fn(b);
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::condition_variable cv_start_;
  std::condition_variable cv_done_;
  const std::function<void(size_t)>* job_ = nullptr;
  std::atomic<size_t> next_block_{0};
  size_t end_block_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

// Splits [0, n) into blocks of size grain and runs fn(begin, end) per block.
// Block boundaries are a function of (n, grain) only.
inline void parallel_for(size_t n, size_t grain,
                         const std::function<void(size_t, size_t)>& fn) {
  if (n == 0) return;
  if (grain < 1) grain = 1;
  const size_t n_blocks = (n + grain - 1) / grain;
  if (n_blocks == 1) {
    fn(0, n);
    return;
  }
  ThreadPool::instance().run_blocks(n_blocks, [&](size_t b) {
    const size_t begin = b * grain;
    const size_t end = std::min(n, begin + grain);
    fn(begin, end);
  });
}

}  // namespace dmc
