#pragma once

#include <functional>
#include <string>
#include <vector>

namespace lesionaware {

// Parallelism cap from LESIONAWARE_THREADS; defaults to 1 (fully sequential).
int thread_cap();

// Runs tasks with at most `max_threads` live worker threads. Tasks are
// independent; completion order does not affect results.
void run_tasks(const std::vector<std::function<void()>>& tasks, int max_threads);

// Compact float formatting shared by all CSV writers.
std::string format_number(double v);

}  // namespace lesionaware
