#include <benchmark/benchmark.h>

#include "ccs/data.hpp"
#include "ccs/model.hpp"
#include "ccs/patch.hpp"
#include "ccs/tensor.hpp"

using namespace ccs;

namespace {

struct BenchWorld {
    ArithmeticSpec spec;
    FactKB kb = FactKB::synth(20, 1);
    Tokenizer tok;
    TinyModel model;
    std::vector<TokenId> prompt;
    PatchTuple tuple;

    BenchWorld() {
        tok = Tokenizer::build(vocabulary_words(spec, kb));
        ModelConfig cfg;
        cfg.seed = 3;
        model = TinyModel::init(cfg, tok);
        auto pairs = gen_arithmetic(spec, 64, 5);
        prompt = tok.encode(format_prompt(pairs[0], Intent::ctx, IntentFormat::weight).prompt);
        auto test = split(pairs, 0.5, 1).test;
        tuple = build_patch_dataset(test, PatchSetup::w_p2c, IntentFormat::weight, 2, spec)[0];
    }
};

BenchWorld& world() {
    static BenchWorld w;
    return w;
}

}  // namespace

static void BM_forward(benchmark::State& state) {
    auto& w = world();
    for (auto _ : state) {
        auto res = forward(w.model, w.prompt);
        benchmark::DoNotOptimize(res.logits.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<long>(w.prompt.size()));
}
BENCHMARK(BM_forward);

static void BM_train_step(benchmark::State& state) {
    auto& w = world();
    PretrainConfig pc;
    pc.identity_sequences = 64;
    pc.fact_repeat = 1;
    auto corpus = build_pretrain_corpus(w.spec, w.kb, w.tok, pc);
    corpus.resize(64);
    TinyModel model = w.model;
    TrainConfig tc;
    tc.steps = 1;
    tc.batch_size = static_cast<int>(state.range(0));
    tc.eval_every = 0;
    tc.warmup_steps = 0;
    for (auto _ : state) {
        train(model, corpus, tc);
        benchmark::DoNotOptimize(model.weights.tok_emb.data.data());
    }
}
BENCHMARK(BM_train_step)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_interchange(benchmark::State& state) {
    auto& w = world();
    auto rec = record_source(w.model, w.tuple, Site::mha_out);
    std::vector<int> layers{2, 3, 4};
    for (auto _ : state) {
        auto res = interchange_recorded(w.model, w.tuple, rec, layers);
        benchmark::DoNotOptimize(res.patched_logits.data());
    }
}
BENCHMARK(BM_interchange)->Unit(benchmark::kMillisecond);

static void BM_tip_readout(benchmark::State& state) {
    auto& w = world();
    TipReader tip(w.model);
    std::vector<float> h(static_cast<size_t>(w.model.config.d_model), 0.1f);
    for (auto _ : state) {
        auto dist = tip.readout(h, 4);
        benchmark::DoNotOptimize(dist.data());
    }
}
BENCHMARK(BM_tip_readout);

static void BM_greedy_decode(benchmark::State& state) {
    auto& w = world();
    for (auto _ : state) {
        auto out = greedy_decode(w.model, w.prompt, 1);
        benchmark::DoNotOptimize(out.data());
    }
}
BENCHMARK(BM_greedy_decode);
