#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ccs/tensor.hpp"

using namespace ccs;

namespace {

std::vector<float> random_vec(size_t n, uint32_t seed) {
    std::mt19937 g(seed);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = d(g);
    return v;
}

}  // namespace

static void BM_mm_nn(benchmark::State& state) {
    int m = static_cast<int>(state.range(0)), k = 128, n = 384;
    auto a = random_vec(static_cast<size_t>(m * k), 1);
    auto b = random_vec(static_cast<size_t>(k * n), 2);
    std::vector<float> c(static_cast<size_t>(m * n));
    for (auto _ : state) {
        mm_nn(a.data(), b.data(), c.data(), m, k, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * m * k * n);
}
BENCHMARK(BM_mm_nn)->Arg(8)->Arg(24)->Arg(64);

static void BM_mm_abt(benchmark::State& state) {
    int m = static_cast<int>(state.range(0)), n = 384, j = 128;
    auto a = random_vec(static_cast<size_t>(m * n), 3);
    auto b = random_vec(static_cast<size_t>(j * n), 4);
    std::vector<float> c(static_cast<size_t>(m * j));
    for (auto _ : state) {
        mm_abt(a.data(), b.data(), c.data(), m, n, j);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * m * n * j);
}
BENCHMARK(BM_mm_abt)->Arg(8)->Arg(24)->Arg(64);

static void BM_mm_atb_acc(benchmark::State& state) {
    int m = static_cast<int>(state.range(0)), k = 128, n = 384;
    auto a = random_vec(static_cast<size_t>(m * k), 5);
    auto g = random_vec(static_cast<size_t>(m * n), 6);
    std::vector<double> w(static_cast<size_t>(k * n));
    for (auto _ : state) {
        mm_atb_acc(a.data(), g.data(), w.data(), m, k, n);
        benchmark::DoNotOptimize(w.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * m * k * n);
}
BENCHMARK(BM_mm_atb_acc)->Arg(8)->Arg(24)->Arg(64);
