#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace meshtex {

inline int hardware_threads() {
    static const int n = [] {
        if (const char* env = std::getenv("MESHTEX_THREADS")) {
            int v = std::atoi(env);
            if (v > 0) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }();
    return n;
}

// Static contiguous partition; deterministic as long as each index writes
// disjoint output. body(begin, end) is invoked once per chunk.
template <typename F>
void parallel_for_chunks(std::int64_t begin, std::int64_t end, F&& body,
                         std::int64_t grain = 1024) {
    const std::int64_t n = end - begin;
    if (n <= 0) return;
    int nt = hardware_threads();
    nt = static_cast<int>(std::min<std::int64_t>(nt, (n + grain - 1) / grain));
    if (nt <= 1) {
        body(begin, end);
        return;
    }
    const std::int64_t chunk = (n + nt - 1) / nt;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(nt - 1));
    for (int t = 1; t < nt; ++t) {
        std::int64_t lo = begin + t * chunk;
        std::int64_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(begin, std::min(end, begin + chunk));
    for (auto& w : workers) w.join();
}

template <typename F>
void parallel_for(std::int64_t begin, std::int64_t end, F&& body,
                  std::int64_t grain = 1024) {
    parallel_for_chunks(
        begin, end,
        [&body](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) body(i);
        },
        grain);
}

}  // namespace meshtex
