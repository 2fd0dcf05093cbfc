#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace surf2ct {

// Fixed-size worker pool. parallel_for splits [0, n) into contiguous chunks, one per
// worker, so the work assignment depends only on n and the thread count.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t threads) { resize(threads); }
  ~ThreadPool() { stop(); }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  std::size_t size() const noexcept { return workers_.size() + 1; }

  void resize(std::size_t threads) {
    stop();
    threads = std::max<std::size_t>(threads, 1);
    {
      std::lock_guard lock(mutex_);
      quit_ = false;
      generation_ = 0;
    }
    for (std::size_t i = 1; i < threads; ++i) {
      workers_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  // Runs fn(begin, end) over disjoint chunks; the caller thread takes chunk 0.
  void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    const std::size_t workers = std::min(size(), n);
    if (workers == 1 || in_parallel_) {
      fn(0, n);
      return;
    }
    {
      std::lock_guard lock(mutex_);
      task_ = &fn;
      task_n_ = n;
      task_chunks_ = workers;
      pending_ = workers - 1;
      error_ = nullptr;
      ++generation_;
    }
    wake_.notify_all();
    in_parallel_ = true;
    try {
      run_chunk(0);
    } catch (...) {
      std::lock_guard lock(mutex_);
      if (!error_) error_ = std::current_exception();
    }
    in_parallel_ = false;
    std::unique_lock lock(mutex_);
    done_.wait(lock, [this] { return pending_ == 0; });
    task_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void run_chunk(std::size_t chunk) {
    const std::size_t begin = task_n_ * chunk / task_chunks_;
    const std::size_t end = task_n_ * (chunk + 1) / task_chunks_;
    if (begin < end) (*task_)(begin, end);
  }

  void worker_loop(std::size_t index) {
    std::size_t seen = 0;
    for (;;) {
      std::unique_lock lock(mutex_);
      wake_.wait(lock, [&] { return quit_ || generation_ != seen; });
      if (quit_) return;
      seen = generation_;
      if (index >= task_chunks_) continue;
      lock.unlock();
      in_parallel_ = true;
      try {
        run_chunk(index);
      } catch (...) {
        std::lock_guard guard(mutex_);
        if (!error_) error_ = std::current_exception();
      }
      in_parallel_ = false;
      lock.lock();
      if (--pending_ == 0) done_.notify_one();
    }
  }

  void stop() {
    {
      std::lock_guard lock(mutex_);
      quit_ = true;
    }
    wake_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t, std::size_t)>* task_ = nullptr;
  std::size_t task_n_ = 0;
  std::size_t task_chunks_ = 1;
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  bool quit_ = false;
  std::exception_ptr error_;
  static inline thread_local bool in_parallel_ = false;
};

inline std::size_t default_thread_count() {
  if (const char* env = std::getenv("SURF2CT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline ThreadPool& global_pool() {
  static ThreadPool pool(default_thread_count());
  return pool;
}

inline void set_thread_count(std::size_t threads) { global_pool().resize(threads); }
inline std::size_t thread_count() { return global_pool().size(); }

inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
  global_pool().parallel_for(n, fn);
}

}  // namespace surf2ct
