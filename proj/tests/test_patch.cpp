#include <doctest.h>

#include <cmath>

#include "ccs/common.hpp"
#include "ccs/patch.hpp"
#include "helpers.hpp"

using namespace ccs;
using ccs::testing::TestWorld;
using ccs::testing::max_rel_diff;

namespace {

std::vector<PatchTuple> make_tuples(const TestWorld& w, PatchSetup setup, int n) {
    auto pairs = gen_arithmetic(w.spec, 120, 71);
    auto test = split(pairs, 0.4, 6).test;
    auto tuples = build_patch_dataset(test, setup, IntentFormat::weight, 9, w.spec);
    if (static_cast<int>(tuples.size()) > n) tuples.resize(static_cast<size_t>(n));
    return tuples;
}

}  // namespace

TEST_CASE("lenses return distributions summing to one") {
    auto w = TestWorld::make(31);
    std::vector<float> h(static_cast<size_t>(w.model.config.d_model), 0.0f);
    auto dist = logit_lens(w.model, h);
    double sum = 0.0;
    for (double p : dist) {
        CHECK(p >= 0.0);
        sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);

    TipReader tip(w.model);
    auto tdist = tip.readout(h, 2);
    double tsum = 0.0;
    for (double p : tdist) {
        CHECK(p >= 0.0);
        tsum += p;
    }
    CHECK(std::abs(tsum - 1.0) < 1e-6);
}

TEST_CASE("logit lens of the final residual equals the model output") {
    auto w = TestWorld::make(32);
    auto toks = w.tok.encode("Query: ( 4 - 2 ) + 1 = Answer:");
    int L = w.model.config.n_layers;
    auto res = forward(w.model, toks, {HookSpec::record_at(Site::resid_post, {L - 1})});
    auto h = res.record.at(Site::resid_post, L - 1, static_cast<int>(toks.size()) - 1);
    auto lens_dist = logit_lens(w.model, h);

    double mx = -1e300, denom = 0.0;
    for (float x : res.logits) mx = std::max(mx, static_cast<double>(x));
    for (float x : res.logits) denom += std::exp(static_cast<double>(x) - mx);
    for (size_t i = 0; i < lens_dist.size(); ++i) {
        double p = std::exp(static_cast<double>(res.logits[i]) - mx) / denom;
        CHECK(std::abs(lens_dist[i] - p) < 1e-6);
    }
}

TEST_CASE("tip readout at the final layer equals the output head") {
    auto w = TestWorld::make(33);
    auto toks = w.tok.encode("Query: The capital of " + w.kb.countries[2] + " is Answer:");
    int L = w.model.config.n_layers;
    auto res = forward(w.model, toks, {HookSpec::record_at(Site::resid_post, {L - 1})});
    auto h = res.record.at(Site::resid_post, L - 1, static_cast<int>(toks.size()) - 1);

    TipReader tip(w.model);
    auto tip_dist = tip.readout(h, L - 1);
    auto lens_dist = logit_lens(w.model, h);
    // Patching the last layer leaves only the output head downstream, so TIP
    // and the logit lens coincide there.
    size_t tip_arg = 0, lens_arg = 0;
    for (size_t i = 0; i < tip_dist.size(); ++i) {
        if (tip_dist[i] > tip_dist[tip_arg]) tip_arg = i;
        if (lens_dist[i] > lens_dist[lens_arg]) lens_arg = i;
        CHECK(std::abs(tip_dist[i] - lens_dist[i]) < 1e-6);
    }
    CHECK(tip_arg == lens_arg);
}

TEST_CASE("interchange with no layers is the identity on target logits") {
    auto w = TestWorld::make(34);
    auto tuples = make_tuples(w, PatchSetup::w_p2c, 3);
    for (const auto& t : tuples) {
        auto tgt_toks = w.tok.encode(t.target_prompt);
        auto plain = forward(w.model, tgt_toks).logits;
        auto res = interchange(w.model, t, {});
        for (size_t i = 0; i < plain.size(); ++i) CHECK(res.patched_logits[i] == plain[i]);
    }
}

TEST_CASE("interchange with all layers reproduces the source") {
    auto w = TestWorld::make(35);
    auto tuples = make_tuples(w, PatchSetup::w_c2p, 3);
    std::vector<int> all{0, 1, 2, 3, 4, 5};
    for (const auto& t : tuples) {
        auto res = interchange(w.model, t, all);
        CHECK(max_rel_diff(res.patched_logits, res.source_logits) < 1e-5);
    }
}

TEST_CASE("interchange rejects mismatched final tokens") {
    auto w = TestWorld::make(36);
    auto tuples = make_tuples(w, PatchSetup::w_p2c, 1);
    PatchTuple bad = tuples[0];
    bad.target_prompt += " 3";
    CHECK_THROWS_AS(interchange(w.model, bad, {0}), Error);
}

TEST_CASE("residual patch at the last layer reproduces the source distribution") {
    auto w = TestWorld::make(37);
    auto tuples = make_tuples(w, PatchSetup::w_p2c, 3);
    int L = w.model.config.n_layers;
    for (const auto& t : tuples) {
        auto src_toks = w.tok.encode(t.source_prompt);
        auto src = forward(w.model, src_toks).logits;
        auto patched = residual_patch(w.model, t, L - 1);
        CHECK(max_rel_diff(patched, src) < 1e-5);
    }
}

TEST_CASE("residual patch at layer 0 of identical prompts changes nothing") {
    auto w = TestWorld::make(38);
    auto tuples = make_tuples(w, PatchSetup::w_p2c, 1);
    PatchTuple same = tuples[0];
    same.target_prompt = same.source_prompt;
    same.target_answer = same.source_answer == "0" ? "1" : "0";  // keep the invariant checker happy
    auto plain = forward(w.model, w.tok.encode(same.source_prompt)).logits;
    auto patched = residual_patch(w.model, same, 0);
    for (size_t i = 0; i < plain.size(); ++i) CHECK(patched[i] == plain[i]);
}

TEST_CASE("layer curves are distributions over layers and respect patch identity") {
    auto w = TestWorld::make(39);
    auto tuples = make_tuples(w, PatchSetup::w_p2c, 2);
    const auto& t = tuples[0];
    std::vector<int> all{0, 1, 2, 3, 4, 5};

    auto curves = layer_curve(w.model, t, all, {t.source_answer, t.target_answer},
                              Lens::logit_lens);
    REQUIRE(curves.size() == 2);
    for (const auto& c : curves) {
        CHECK(c.probability.size() == 6);
        for (double p : c.probability) {
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
        }
    }
    // fully patched: the final-layer logit-lens value equals the patched
    // model's actual output probability
    auto res = interchange(w.model, t, all);
    double mx = -1e300, denom = 0.0;
    for (float x : res.patched_logits) mx = std::max(mx, static_cast<double>(x));
    for (float x : res.patched_logits) denom += std::exp(static_cast<double>(x) - mx);
    double p_src =
        std::exp(static_cast<double>(
                     res.patched_logits[static_cast<size_t>(w.tok.id(t.source_answer))]) -
                 mx) /
        denom;
    CHECK(std::abs(curves[0].probability.back() - p_src) < 1e-6);
}

TEST_CASE("evaluate_sweep aggregates over tuples deterministically") {
    auto w = TestWorld::make(40);
    auto tuples = make_tuples(w, PatchSetup::w_p2c, 6);
    auto prepared = prepare_tuples(w.model, tuples, Site::mha_out);
    auto e1 = evaluate_sweep(w.model, prepared, {1, 2}, Lens::logit_lens, nullptr);
    auto e2 = evaluate_sweep(w.model, prepared, {1, 2}, Lens::logit_lens, nullptr);
    CHECK(e1.out_src == e2.out_src);
    CHECK(e1.src_curve == e2.src_curve);
    CHECK(e1.src_curve.size() == 6);
    CHECK_THROWS_AS(evaluate_sweep(w.model, prepared, {}, Lens::tip, nullptr), Error);
}
