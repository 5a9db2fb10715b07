#include <doctest.h>

#include <algorithm>

#include "ccs/common.hpp"
#include "ccs/eval.hpp"
#include "helpers.hpp"

using namespace ccs;
using ccs::testing::TestWorld;

namespace {

// Independent brute-force re-evaluation: a separate decode loop over the same
// pairs, sharing nothing with eval.cpp's bookkeeping.
double brute_force_pair_accuracy(const TinyModel& model,
                                 const std::vector<QueryContextPair>& pairs, IntentFormat f) {
    int ok = 0;
    for (const auto& p : pairs) {
        bool both = true;
        for (Intent w : {Intent::ctx, Intent::pri}) {
            auto ex = format_prompt(p, w, f);
            auto toks = model.tokenizer.encode(ex.prompt);
            auto out = greedy_decode(model, toks, 1);
            if (model.tokenizer.token(out.at(0)) != ex.expected_answer) both = false;
        }
        ok += both;
    }
    return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

}  // namespace

TEST_CASE("pair accuracy equals the brute-force oracle exactly") {
    auto w = TestWorld::make(71);
    auto pairs = gen_arithmetic(w.spec, 40, 111);
    EvalConfig cfg;
    cfg.intent_format = IntentFormat::weight;
    auto report = pair_accuracy(w.model, pairs, cfg);
    double oracle = brute_force_pair_accuracy(w.model, pairs, IntentFormat::weight);
    CHECK(report.pair_accuracy == oracle);
    CHECK(report.n_pairs == 40);
    CHECK(report.records.size() == 80);
    CHECK(report.pair_accuracy <= report.acc_ctx);
    CHECK(report.pair_accuracy <= report.acc_pri);
}

TEST_CASE("pair accuracy is invariant to example order") {
    auto w = TestWorld::make(72);
    auto pairs = gen_fact_dataset(w.kb, 30, false, 113);
    EvalConfig cfg;
    auto a = pair_accuracy(w.model, pairs, cfg);
    std::reverse(pairs.begin(), pairs.end());
    auto b = pair_accuracy(w.model, pairs, cfg);
    CHECK(a.pair_accuracy == b.pair_accuracy);
    CHECK(a.acc_ctx == b.acc_ctx);
    CHECK(a.acc_pri == b.acc_pri);
}

TEST_CASE("icl mode builds demonstration prompts; errors without a pool") {
    auto w = TestWorld::make(73);
    auto pairs = gen_fact_dataset(w.kb, 20, false, 115);
    auto sp = split(pairs, 0.5, 3);
    EvalConfig cfg;
    cfg.mode = EvalMode::icl;
    cfg.icl_k = 2;
    CHECK_THROWS_AS(pair_accuracy(w.model, sp.test, cfg), Error);
    auto report = pair_accuracy(w.model, sp.test, cfg, &sp.train);
    CHECK(report.records.size() == sp.test.size() * 2);
}

TEST_CASE("steered mode rejects missing directions and intent-bearing prompts") {
    auto w = TestWorld::make(74);
    auto pairs = gen_arithmetic(w.spec, 10, 117);
    EvalConfig cfg;
    cfg.mode = EvalMode::steered;
    CHECK_THROWS_AS(pair_accuracy(w.model, pairs, cfg), Error);

    cfg.direction.assign(static_cast<size_t>(w.model.config.d_model), 0.0f);
    cfg.direction[0] = 1.0f;
    cfg.layer = 3;
    cfg.constants.c_pri = -1.0;
    cfg.constants.c_ctx = 1.0;
    auto report = pair_accuracy(w.model, pairs, cfg);
    CHECK(report.config.intent_format == IntentFormat::none);
    CHECK(report.records.size() == 20);
}

TEST_CASE("generalization matrix covers requested cells; 1x1 equals pair_accuracy") {
    auto w = TestWorld::make(75);
    auto arith = gen_arithmetic(w.spec, 16, 119);
    auto facts = gen_fact_dataset(w.kb, 16, false, 121);
    EvalConfig cfg;
    std::vector<DatasetRef> ds{{"arith", &arith}, {"fact", &facts}};
    auto grid = generalization_matrix(w.model, ds, {IntentFormat::weight, IntentFormat::instruction},
                                      cfg);
    CHECK(grid.size() == 4);

    auto single = generalization_matrix(w.model, {{"arith", &arith}}, {IntentFormat::weight}, cfg);
    auto direct = pair_accuracy(w.model, arith, cfg);
    CHECK(single.begin()->second.pair_accuracy == direct.pair_accuracy);
}

TEST_CASE("steering_vs_baseline produces paired reports") {
    auto w = TestWorld::make(76);
    auto pairs = gen_arithmetic(w.spec, 12, 123);
    std::vector<float> u(static_cast<size_t>(w.model.config.d_model), 0.0f);
    u[2] = 1.0f;
    SteeringConstants consts{-2.0, 2.0, false};
    EvalConfig cfg;
    std::vector<DatasetRef> ds{{"arith", &pairs}};
    auto cmp = steering_vs_baseline(w.model, u, 3, consts, ds, cfg);
    REQUIRE(cmp.size() == 1);
    CHECK(cmp[0].baseline.config.mode == EvalMode::zero_shot);
    CHECK(cmp[0].steered.config.mode == EvalMode::steered);
    CHECK(cmp[0].steered.config.intent_format == IntentFormat::none);
}
