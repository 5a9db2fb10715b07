#pragma once

#include <vector>

#include "ccs/data.hpp"
#include "ccs/model.hpp"

namespace ccs::testing {

// Small world shared by the unit tests: +,- arithmetic, a 6-country KB, and
// an untrained 6-layer model over the closed vocabulary.
struct TestWorld {
    ArithmeticSpec spec;
    FactKB kb;
    Tokenizer tok;
    TinyModel model;

    static TestWorld make(uint64_t seed = 1) {
        TestWorld w;
        w.spec.operators = {ArithOp::add, ArithOp::sub};
        w.kb = FactKB::synth(6, seed);
        w.tok = Tokenizer::build(vocabulary_words(w.spec, w.kb));
        ModelConfig cfg;
        cfg.n_layers = 6;
        cfg.d_model = 32;
        cfg.n_heads = 2;
        cfg.d_mlp = 64;
        cfg.max_seq_len = 64;
        cfg.seed = seed;
        w.model = TinyModel::init(cfg, w.tok);
        return w;
    }
};

inline double max_rel_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double mx = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double denom = std::max({std::abs(static_cast<double>(a[i])),
                                 std::abs(static_cast<double>(b[i])), 1e-8});
        mx = std::max(mx, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])) / denom);
    }
    return mx;
}

}  // namespace ccs::testing
