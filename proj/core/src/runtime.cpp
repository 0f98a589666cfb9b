#include "lesionaware/runtime.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <thread>

namespace lesionaware {

int thread_cap() {
  static const int cap = [] {
    const char* env = std::getenv("LESIONAWARE_THREADS");
    if (!env) return 1;
    const int v = std::atoi(env);
    return v >= 1 ? v : 1;
  }();
  return cap;
}

void run_tasks(const std::vector<std::function<void()>>& tasks, int max_threads) {
  if (max_threads <= 1 || tasks.size() <= 1) {
    for (const auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  const int workers = std::min<int>(max_threads, static_cast<int>(tasks.size()));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= tasks.size()) return;
        tasks[i]();
      }
    });
  }
  for (auto& t : pool) t.join();
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace lesionaware
