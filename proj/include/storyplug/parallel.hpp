#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace storyplug {

// Runs fn(i, worker) for i in [0, count) on up to `workers` threads; worker is
// the index of the thread running the item, for per-worker resources. Work
// items must write to disjoint outputs; the first exception is rethrown after
// joining.
template <typename Fn>
void parallel_for_workers(size_t count, int workers, Fn&& fn) {
    const size_t n_threads = std::min(count, static_cast<size_t>(std::max(workers, 1)));
    if (n_threads <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i, size_t{0});
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    threads.reserve(n_threads);
    for (size_t t = 0; t < n_threads; ++t) {
        threads.emplace_back([&, t] {
            for (size_t i = next++; i < count; i = next++) {
                try {
                    fn(i, t);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : threads) th.join();
    if (error) std::rethrow_exception(error);
}

template <typename Fn>
void parallel_for(size_t count, int workers, Fn&& fn) {
    parallel_for_workers(count, workers, [&](size_t i, size_t) { fn(i); });
}

// splitmix64 finaliser; derives independent stream seeds from (base, index).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index, std::uint64_t salt = 0) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1) + 0xbf58476d1ce4e5b9ULL * salt;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace storyplug
