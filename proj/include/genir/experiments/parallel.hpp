#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace genir {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers write results by index,
/// so output order never depends on scheduling. The first exception is rethrown.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    {
        std::vector<std::jthread> pool;
        for (std::size_t k = 0; k < threads; ++k) {
            pool.emplace_back([&] {
                for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(err_mu);
                        if (!err) err = std::current_exception();
                        next = n;
                    }
                }
            });
        }
    }
    if (err) std::rethrow_exception(err);
}

}  // namespace genir
