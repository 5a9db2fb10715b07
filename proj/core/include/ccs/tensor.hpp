#pragma once

#include <cassert>
#include <cstddef>
#include <functional>
#include <vector>

namespace ccs {

// Worker count for example-level parallelism. Results never depend on it:
// work is partitioned by fixed index ranges and every reduction has a fixed
// order.
void set_num_threads(int n);
int num_threads();

// Static partition; fn(i) must only write state owned by index i.
void parallel_for(int n, const std::function<void(int)>& fn);

template <typename T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c)) {}

    T* row(int r) { return data.data() + static_cast<size_t>(r) * static_cast<size_t>(cols); }
    const T* row(int r) const {
        return data.data() + static_cast<size_t>(r) * static_cast<size_t>(cols);
    }
    T& at(int r, int c) { return data[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)]; }
    T at(int r, int c) const {
        return data[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)];
    }
    void zero() { std::fill(data.begin(), data.end(), T(0)); }
};

// C[M x N] = A[M x K] . B[K x N]; accumulates each output element in double.
template <typename TA, typename TB, typename TC>
void mm_nn(const TA* a, const TB* b, TC* c, int m, int k, int n, bool accumulate = false) {
    std::vector<double> acc(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
        const TA* ai = a + static_cast<size_t>(i) * static_cast<size_t>(k);
        double* accp = acc.data();
        if (accumulate) {
            TC* ci = c + static_cast<size_t>(i) * static_cast<size_t>(n);
            for (int j = 0; j < n; ++j) accp[j] = static_cast<double>(ci[j]);
        } else {
            for (int j = 0; j < n; ++j) accp[j] = 0.0;
        }
        for (int p = 0; p < k; ++p) {
            double av = static_cast<double>(ai[p]);
            const TB* bp = b + static_cast<size_t>(p) * static_cast<size_t>(n);
            for (int j = 0; j < n; ++j) accp[j] += av * static_cast<double>(bp[j]);
        }
        TC* ci = c + static_cast<size_t>(i) * static_cast<size_t>(n);
        for (int j = 0; j < n; ++j) ci[j] = static_cast<TC>(accp[j]);
    }
}

// C[M x J] = A[M x N] . B[J x N]^T  (contiguous row dots, 8-lane reduction).
template <typename TA, typename TB, typename TC>
void mm_abt(const TA* a, const TB* b, TC* c, int m, int n, int j_rows, bool accumulate = false) {
    constexpr int kLanes = 16;
    for (int i = 0; i < m; ++i) {
        const TA* ai = a + static_cast<size_t>(i) * static_cast<size_t>(n);
        TC* ci = c + static_cast<size_t>(i) * static_cast<size_t>(j_rows);
        for (int j = 0; j < j_rows; ++j) {
            const TB* bj = b + static_cast<size_t>(j) * static_cast<size_t>(n);
            double lanes[kLanes] = {};
            int p = 0;
            for (; p + kLanes <= n; p += kLanes)
                for (int l = 0; l < kLanes; ++l)
                    lanes[l] += static_cast<double>(ai[p + l]) * static_cast<double>(bj[p + l]);
            double s = 0.0;
            for (int l = 0; l < kLanes; ++l) s += lanes[l];
            for (; p < n; ++p) s += static_cast<double>(ai[p]) * static_cast<double>(bj[p]);
            ci[j] = accumulate ? static_cast<TC>(static_cast<double>(ci[j]) + s) : static_cast<TC>(s);
        }
    }
}

// W[K x N] += A[M x K]^T . G[M x N]; W kept in double for exact accumulation.
template <typename TA, typename TG>
void mm_atb_acc(const TA* a, const TG* g, double* w, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const TA* ai = a + static_cast<size_t>(i) * static_cast<size_t>(k);
        const TG* gi = g + static_cast<size_t>(i) * static_cast<size_t>(n);
        for (int p = 0; p < k; ++p) {
            double av = static_cast<double>(ai[p]);
            if (av == 0.0) continue;
            double* wp = w + static_cast<size_t>(p) * static_cast<size_t>(n);
            for (int j = 0; j < n; ++j) wp[j] += av * static_cast<double>(gi[j]);
        }
    }
}

template <typename T>
double dot_d(const T* a, const T* b, int n) {
    constexpr int kLanes = 16;
    double lanes[kLanes] = {};
    int p = 0;
    for (; p + kLanes <= n; p += kLanes)
        for (int l = 0; l < kLanes; ++l)
            lanes[l] += static_cast<double>(a[p + l]) * static_cast<double>(b[p + l]);
    double s = 0.0;
    for (int l = 0; l < kLanes; ++l) s += lanes[l];
    for (; p < n; ++p) s += static_cast<double>(a[p]) * static_cast<double>(b[p]);
    return s;
}

}  // namespace ccs
