#ifndef EVAGC_PARALLEL_HPP
#define EVAGC_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace evagc {

// Runs fn(i) for i in [0, n) on up to num_threads workers. Each index is
// processed exactly once; callers own making fn(i) write only to slot i so
// results stay identical for any worker count.
template <class Fn>
void parallel_for(int n, int num_threads, Fn&& fn) {
    if (n <= 0) return;
    int workers = num_threads > 0 ? num_threads
                                  : static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min(workers, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace evagc

#endif
