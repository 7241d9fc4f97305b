#pragma once

#include <algorithm>
#include <cstdlib>
#include <cstddef>
#include <thread>
#include <vector>

namespace plansmooth {

// Worker count: PLANSMOOTH_THREADS if set, otherwise the hardware count,
// clamped to [1, 8]. Results never depend on this value; it only controls
// how row ranges of independent writes are split.
inline unsigned thread_count() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    unsigned n = std::min(hw, 8u);
    if (const char* env = std::getenv("PLANSMOOTH_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) n = std::min<unsigned>(static_cast<unsigned>(v), std::min(hw, 8u));
    }
    return std::max(1u, n);
}

// Run body(i0, i1) over a partition of [0, n). Each range writes to disjoint
// output locations, so the result is identical for any worker count.
template <typename Body>
void parallel_for(std::size_t n, const Body& body) {
    const unsigned workers = thread_count();
    if (n == 0) return;
    if (workers == 1 || n < 2 * workers) {
        body(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned t = 0; t < workers; ++t) {
        const std::size_t i0 = std::min(n, t * chunk);
        const std::size_t i1 = std::min(n, i0 + chunk);
        if (i0 >= i1) break;
        pool.emplace_back([&body, i0, i1] { body(i0, i1); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace plansmooth
