#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace p2l {

// Within-stage parallelism cap: P2L_THREADS, defaulting to the hardware
// concurrency. Results must not depend on the thread count, so workers write
// into preassigned slots only.
inline std::size_t thread_count() {
    std::size_t n = std::thread::hardware_concurrency();
    if (n == 0) n = 1;
    if (const char* env = std::getenv("P2L_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) n = static_cast<std::size_t>(v);
    }
    return n;
}

// Index-parallel loop with deterministic slot semantics: fn(i) may only touch
// state owned by index i.
template <class Fn>
void parallel_for(std::size_t n, const Fn& fn, std::size_t threads = 0) {
    if (threads == 0) threads = thread_count();
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    threads = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t]() {
            for (std::size_t i = t; i < n; i += threads) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

} // namespace p2l
