#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace iseg {

/// Worker count: hardware concurrency, capped by the ISEG_THREADS environment variable.
inline std::size_t thread_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("ISEG_THREADS")) {
        try {
            const long cap = std::stol(env);
            if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
        } catch (...) {
        }
    }
    return n;
}

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker, so results
/// are bitwise independent of the worker count as long as fn(i) writes only its own slot.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace iseg
