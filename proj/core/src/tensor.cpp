#include "ccs/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

namespace ccs {

namespace {
std::atomic<int> g_threads{0};  // 0 = hardware concurrency
}

void set_num_threads(int n) { g_threads.store(n > 0 ? n : 0); }

int num_threads() {
    int n = g_threads.load();
    if (n > 0) return n;
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    int t = std::min(num_threads(), n);
    if (t <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    int chunk = (n + t - 1) / t;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(t - 1));
    auto run = [&fn, n, chunk](int w) {
        int lo = w * chunk;
        int hi = std::min(n, lo + chunk);
        for (int i = lo; i < hi; ++i) fn(i);
    };
    for (int w = 1; w < t; ++w) workers.emplace_back(run, w);
    run(0);
    for (auto& th : workers) th.join();
}

}  // namespace ccs
