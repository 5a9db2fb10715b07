#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace ccs {

// Deterministic, platform-independent generator (PCG32). std:: distributions
// are not stable across standard libraries, so sampling helpers live here.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) { reseed(seed, stream); }

    void reseed(uint64_t seed, uint64_t stream = 0) {
        state_ = 0;
        inc_ = (stream << 1u) | 1u;
        next();
        state_ += splitmix(seed);
        next();
    }

    uint32_t next() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ull + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // Uniform in [0, n) without modulo bias.
    uint32_t below(uint32_t n) {
        uint32_t threshold = (-n) % n;
        for (;;) {
            uint32_t r = next();
            if (r >= threshold) return r % n;
        }
    }

    int range(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<uint32_t>(hi_inclusive - lo + 1)));
    }

    double real() {  // [0, 1)
        return next() * (1.0 / 4294967296.0);
    }

    bool chance(double p) { return real() < p; }

    // Box-Muller; deterministic given the stream position.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = real();
        } while (u1 <= 1e-12);
        u2 = real();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(6.283185307179586 * u2);
        has_spare_ = true;
        return mag * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = below(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Sample k distinct indices from [0, n).
    std::vector<int> sample_indices(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        shuffle(idx);
        idx.resize(static_cast<size_t>(k < n ? k : n));
        return idx;
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t state_ = 0;
    uint64_t inc_ = 1;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ccs
