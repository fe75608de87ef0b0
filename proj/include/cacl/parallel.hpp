#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cacl {

// Minimal fork-join pool for kernel-internal parallelism. Work is split into
// one contiguous block per worker, so every output element is written by
// exactly one thread and per-element accumulation order is fixed; results are
// identical for any thread count.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void set_threads(int n) {
    std::unique_lock<std::mutex> lk(mu_);
    if (n < 1) n = 1;
    want_threads_ = n;
    resize_locked();
  }

  int threads() {
    std::unique_lock<std::mutex> lk(mu_);
    return want_threads_;
  }

  // f(begin, end) over [0, n) split into contiguous blocks.
  void run_blocks(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& f) {
    if (n <= 0) return;
    std::unique_lock<std::mutex> lk(mu_);
    int t = want_threads_;
    if (t <= 1 || n == 1) {
      lk.unlock();
      f(0, n);
      return;
    }
    if (static_cast<std::int64_t>(t) > n) t = static_cast<int>(n);
    job_ = &f;
    job_n_ = n;
    job_threads_ = t;
    next_block_ = 1;  // block 0 runs on the caller
    pending_ = t - 1;
    ++generation_;
    cv_.notify_all();
    lk.unlock();

    run_block(0, t, n, f);

    std::unique_lock<std::mutex> lk2(mu_);
    done_cv_.wait(lk2, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
      cv_.notify_all();
    }
    for (auto& th : workers_) th.join();
  }

 private:
  ThreadPool() = default;

  static void run_block(int block, int t, std::int64_t n,
                        const std::function<void(std::int64_t, std::int64_t)>& f) {
    std::int64_t chunk = (n + t - 1) / t;
    std::int64_t b = block * chunk;
    std::int64_t e = std::min<std::int64_t>(n, b + chunk);
    if (b < e) f(b, e);
  }

  void resize_locked() {
    while (static_cast<int>(workers_.size()) < want_threads_ - 1) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    while (true) {
      const std::function<void(std::int64_t, std::int64_t)>* f = nullptr;
      std::int64_t n = 0;
      int block = -1, t = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || (job_ && generation_ != seen && next_block_ < job_threads_); });
        if (stop_) return;
        seen = generation_;
        block = next_block_++;
        f = job_;
        n = job_n_;
        t = job_threads_;
      }
      run_block(block, t, n, *f);
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  int want_threads_ = 1;
  bool stop_ = false;
  const std::function<void(std::int64_t, std::int64_t)>* job_ = nullptr;
  std::int64_t job_n_ = 0;
  int job_threads_ = 0;
  int next_block_ = 0;
  int pending_ = 0;
  std::uint64_t generation_ = 0;
};

inline void set_thread_count(int n) { ThreadPool::instance().set_threads(n); }
inline int thread_count() { return ThreadPool::instance().threads(); }

template <class F>
void parallel_for(std::int64_t n, F&& f) {
  std::function<void(std::int64_t, std::int64_t)> fn =
      [&f](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) f(i);
      };
  ThreadPool::instance().run_blocks(n, fn);
}

}  // namespace cacl
