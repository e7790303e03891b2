#pragma once

#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace deidbench {

/// Runs fn(i) for i in [0, n) across up to `jobs` threads. Work items must be
/// independent; results written by index stay deterministic regardless of
/// scheduling. The first exception thrown by any item is rethrown after all
/// threads join.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    if (n == 0) return;
    if (jobs <= 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min(jobs, n);
    std::vector<std::thread> threads;
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        std::size_t begin = w * chunk;
        std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        threads.emplace_back([&, begin, end] {
            try {
                for (std::size_t i = begin; i < end; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (std::thread& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace deidbench
