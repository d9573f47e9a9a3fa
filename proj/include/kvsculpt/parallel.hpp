#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace kvsculpt {

/// Worker count: KVSCULPT_THREADS if set and positive, else the hardware count.
[[nodiscard]] inline std::size_t worker_count()
{
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("KVSCULPT_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) { return static_cast<std::size_t>(v); }
        } catch (const std::exception&) {
        }
    }
    return hw;
}

/// Runs fn(i) for i in [0, n). Tasks must not share mutable state; the first
/// exception thrown by any task is rethrown after all workers join.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t threads = 0)
{
    if (threads == 0) { threads = worker_count(); }
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) { fn(i); }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock{failure_mutex};
                    if (!failure) { failure = std::current_exception(); }
                }
            }
        });
    }
    for (auto& th : pool) { th.join(); }
    if (failure) { std::rethrow_exception(failure); }
}

} // namespace kvsculpt
