#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "ccs/common.hpp"
#include "ccs/data.hpp"

using namespace ccs;

// Independent integer oracle: parse and evaluate a rendered query, with an
// optional reassignment context. Written against the prompt grammar only, so
// it stays independent of the generator's own evaluation path.
namespace {

std::vector<std::string> oracle_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

int oracle_op(char op, int a, int b) {
    switch (op) {
        case '+': return a + b;
        case '-': return a - b;
        case '*': return a * b;
        case '/': return a / b;
        case '^': {
            int r = 1;
            for (int i = 0; i < b; ++i) r *= a;
            return r;
        }
    }
    REQUIRE(false);
    return 0;
}

// Evaluates "( a op b ) op c =" with an optional context sentence applied.
int oracle_eval(const std::string& query, const std::string& context) {
    auto q = oracle_words(query);
    REQUIRE(q.size() == 8);
    int a = std::stoi(q[1]), b = std::stoi(q[3]), c = std::stoi(q[6]);
    char op1 = q[2][0], op2 = q[5][0];

    auto ctx = oracle_words(context);
    if (ctx.size() == 9) return std::stoi(ctx[8]);  // full override
    if (ctx.size() == 5) {                          // subexpression override
        REQUIRE(ctx[0] == q[1]);
        REQUIRE(ctx[2] == q[3]);
        return oracle_op(op2, std::stoi(ctx[4]), c);
    }
    if (ctx.size() == 3) {  // leaf reassignment
        int x = std::stoi(ctx[0]), y = std::stoi(ctx[2]);
        if (a == x) a = y;
        if (b == x) b = y;
        if (c == x) c = y;
    } else {
        REQUIRE(ctx.empty());
    }
    return oracle_op(op2, oracle_op(op1, a, b), c);
}

}  // namespace

TEST_CASE("arithmetic paper example: (5 + 1) / 2 with context 5 = 9") {
    ArithmeticSpec spec;
    CHECK(oracle_eval("( 5 + 1 ) / 2 =", "") == 3);
    CHECK(oracle_eval("( 5 + 1 ) / 2 =", "5 = 9") == 5);
    CHECK(eval_query_under_context("( 5 + 1 ) / 2 =", "", spec) == 3);
    CHECK(eval_query_under_context("( 5 + 1 ) / 2 =", "5 = 9", spec) == 5);
}

TEST_CASE("arithmetic subexpression override example") {
    ArithmeticSpec spec;
    // ( 2 * 3 ) + 1 = 7; overriding the subexpression to 4 gives 5.
    CHECK(oracle_eval("( 2 * 3 ) + 1 =", "") == 7);
    CHECK(oracle_eval("( 2 * 3 ) + 1 =", "2 * 3 = 4") == 5);
    CHECK(eval_query_under_context("( 2 * 3 ) + 1 =", "", spec) == 7);
    CHECK(eval_query_under_context("( 2 * 3 ) + 1 =", "2 * 3 = 4", spec) == 5);
}

TEST_CASE("generated arithmetic pairs match the oracle exactly") {
    ArithmeticSpec spec;
    auto pairs = gen_arithmetic(spec, 512, 42);
    REQUIRE(pairs.size() == 512);
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& p : pairs) {
        CHECK(p.prior_answer != p.context_answer);
        CHECK(oracle_eval(p.query, "") == std::stoi(p.prior_answer));
        CHECK(oracle_eval(p.query, p.context) == std::stoi(p.context_answer));
        CHECK(seen.emplace(p.query, p.context).second);
        int prior = std::stoi(p.prior_answer), ctxa = std::stoi(p.context_answer);
        CHECK(prior >= spec.min_value);
        CHECK(prior <= spec.max_value);
        CHECK(ctxa >= spec.min_value);
        CHECK(ctxa <= spec.max_value);
    }
}

TEST_CASE("arithmetic generation is deterministic and validates inputs") {
    ArithmeticSpec spec;
    auto a = gen_arithmetic(spec, 64, 7);
    auto b = gen_arithmetic(spec, 64, 7);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].query == b[i].query);
        CHECK(a[i].context == b[i].context);
    }
    auto c = gen_arithmetic(spec, 64, 8);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) any_diff |= a[i].query != c[i].query;
    CHECK(any_diff);

    ArithmeticSpec empty_ops;
    empty_ops.operators.clear();
    CHECK_THROWS_AS(gen_arithmetic(empty_ops, 4, 1), Error);
    CHECK_THROWS_AS(gen_arithmetic(spec, 0, 1), Error);
    ArithmeticSpec tiny;
    tiny.operators = {ArithOp::pow};
    CHECK_THROWS_AS(gen_arithmetic(tiny, 1000000, 1), Error);
}

TEST_CASE("self-reassignment never appears") {
    ArithmeticSpec spec;
    auto pairs = gen_arithmetic(spec, 256, 3);
    for (const auto& p : pairs) {
        auto w = oracle_words(p.context);
        if (w.size() == 3) CHECK(w[0] != w[2]);
    }
}

TEST_CASE("fact pair follows the paper's France example") {
    FactKB kb = FactKB::synth(4, 1);
    kb.triples.push_back({"France", "capital", "Paris"});
    auto p = make_fact_pair(kb, "France", "capital", "London");
    CHECK(p.query == "The capital of France is");
    CHECK(p.context == "The capital of France is London .");
    CHECK(p.prior_answer == "Paris");
    CHECK(p.context_answer == "London");
    CHECK_THROWS_AS(make_fact_pair(kb, "France", "capital", "Paris"), Error);
}

TEST_CASE("multihop pair follows the paper's Tunis example") {
    FactKB kb = FactKB::synth(4, 1);
    kb.triples.push_back({"France", "capital", "Paris"});
    kb.triples.push_back({"Tunis", "country", "Tunisia"});
    kb.triples.push_back({"London", "country", "England"});
    auto p = make_multihop_pair(kb, "Tunis", "France", "London");
    CHECK(p.query == "What country is Tunis in ?");
    CHECK(p.context ==
          "London is the capital of France . Tunis is in the same country as London .");
    CHECK(p.prior_answer == "Tunisia");
    CHECK(p.context_answer == "France");
}

TEST_CASE("fact dataset items verify against direct KB lookup") {
    FactKB kb = FactKB::synth(8, 5);
    auto pairs = gen_fact_dataset(kb, 100, false, 11);
    REQUIRE(pairs.size() == 100);
    for (const auto& p : pairs) {
        CHECK(p.prior_answer != p.context_answer);
        const auto& pool = kb.answer_pools.at(p.template_id);
        CHECK(std::find(pool.begin(), pool.end(), p.context_answer) != pool.end());
        // the query embeds a subject whose true object is the prior answer
        bool found = false;
        for (const auto& t : kb.triples)
            if (t.relation == p.template_id && t.object == p.prior_answer &&
                p.query.find(t.subject) != std::string::npos)
                found = true;
        CHECK(found);
    }

    auto mh = gen_fact_dataset(kb, 50, true, 11);
    for (const auto& p : mh) {
        CHECK(p.kind == DatasetKind::fact_multihop);
        CHECK(p.prior_answer != p.context_answer);
        CHECK(p.prior_answer == kb.true_object(oracle_words(p.query)[3], "country"));
    }

    FactKB single;
    single.relations = kb.relations;
    single.triples = {{"France", "capital", "Paris"}};
    CHECK_THROWS_AS(gen_fact_dataset(single, 2, true, 1), Error);
}

TEST_CASE("prompt formatting renders the documented intent lines") {
    ArithmeticSpec spec;
    auto pairs = gen_arithmetic(spec, 4, 9);
    const auto& p = pairs[0];

    auto weight_pri = format_prompt(p, Intent::pri, IntentFormat::weight);
    CHECK(weight_pri.prompt.find("Context weight: 0") != std::string::npos);
    CHECK(weight_pri.expected_answer == p.prior_answer);

    auto weight_ctx = format_prompt(p, Intent::ctx, IntentFormat::weight);
    CHECK(weight_ctx.prompt.find("Context weight: 1") != std::string::npos);
    CHECK(weight_ctx.expected_answer == p.context_answer);

    auto instr_ctx = format_prompt(p, Intent::ctx, IntentFormat::instruction);
    CHECK(instr_ctx.prompt.find("Only listen to the context") != std::string::npos);
    auto instr_pri = format_prompt(p, Intent::pri, IntentFormat::instruction);
    CHECK(instr_pri.prompt.find("Ignore the context") != std::string::npos);

    auto none_pri = format_prompt(p, Intent::pri, IntentFormat::none);
    CHECK(none_pri.prompt.find("weight:") == std::string::npos);
    CHECK(none_pri.prompt.find("Ignore") == std::string::npos);
    CHECK(none_pri.prompt.find("Only listen") == std::string::npos);
    CHECK(none_pri.expected_answer == p.prior_answer);

    for (IntentFormat f : {IntentFormat::weight, IntentFormat::instruction}) {
        auto a = oracle_words(format_prompt(p, Intent::pri, f).prompt);
        auto b = oracle_words(format_prompt(p, Intent::ctx, f).prompt);
        CHECK(a.size() == b.size());
        CHECK(a.back() == b.back());
    }
}

TEST_CASE("split is disjoint, deterministic, and validates the fraction") {
    FactKB kb = FactKB::synth(10, 2);
    auto pairs = gen_fact_dataset(kb, 100, false, 13);
    auto sp = split(pairs, 0.2, 21);
    CHECK(sp.train.size() == 80);
    CHECK(sp.test.size() == 20);
    std::set<std::string> train_ids;
    for (const auto& p : sp.train) train_ids.insert(p.id);
    for (const auto& p : sp.test) CHECK(train_ids.count(p.id) == 0);

    auto sp2 = split(pairs, 0.2, 21);
    REQUIRE(sp2.test.size() == sp.test.size());
    for (size_t i = 0; i < sp.test.size(); ++i) CHECK(sp.test[i].id == sp2.test[i].id);

    CHECK_THROWS_AS(split(pairs, 1.0, 1), Error);
    CHECK_THROWS_AS(split(pairs, 0.0, 1), Error);
    CHECK_THROWS_AS(split({}, 0.5, 1), Error);

    ArithmeticSpec spec;
    auto ap = gen_arithmetic(spec, 300, 17);
    auto asp = split(ap, 0.25, 5);
    std::set<std::string> train_q;
    for (const auto& p : asp.train) train_q.insert(p.query);
    for (const auto& p : asp.test) CHECK(train_q.count(p.query) == 0);
}

TEST_CASE("patch datasets satisfy their setup invariants") {
    ArithmeticSpec spec;
    auto pairs = gen_arithmetic(spec, 400, 23);
    auto test = split(pairs, 0.3, 3).test;

    for (PatchSetup setup :
         {PatchSetup::w_p2c, PatchSetup::w_c2p, PatchSetup::pri, PatchSetup::ctx}) {
        auto tuples = build_patch_dataset(test, setup, IntentFormat::weight, 31, spec);
        REQUIRE(!tuples.empty());
        for (const auto& t : tuples) {
            verify_patch_tuple(t);
            auto sw = oracle_words(t.source_prompt);
            auto tw = oracle_words(t.target_prompt);
            CHECK(sw.back() == tw.back());
            CHECK(sw.size() == tw.size());
        }
    }

    // swapping the intent line of a W tuple reproduces the other prompt verbatim
    auto w_tuples = build_patch_dataset(test, PatchSetup::w_p2c, IntentFormat::weight, 31, spec);
    for (const auto& t : w_tuples) {
        std::string swapped = t.target_prompt;
        auto pos = swapped.find("Context weight: 1");
        REQUIRE(pos != std::string::npos);
        swapped.replace(pos, 17, "Context weight: 0");
        CHECK(swapped == t.source_prompt);
    }

    // PRI tuples keep the original context binding on the partner query
    auto pri_tuples = build_patch_dataset(test, PatchSetup::pri, IntentFormat::weight, 37, spec);
    for (const auto& t : pri_tuples) {
        auto q_begin = t.target_prompt.find("Query: ");
        auto q_end = t.target_prompt.find("\nAnswer:");
        std::string tgt_query = t.target_prompt.substr(q_begin + 7, q_end - q_begin - 7);
        std::string ctx_line = t.source_prompt.substr(9, t.source_prompt.find('\n') - 9);
        CHECK(oracle_eval(tgt_query, "") == std::stoi(t.target_answer));
        CHECK(eval_query_under_context(tgt_query, ctx_line, spec).has_value());
    }

    std::vector<QueryContextPair> one = {test[0]};
    CHECK_THROWS_AS(build_patch_dataset(one, PatchSetup::ctx, IntentFormat::weight, 1, spec),
                    Error);
    CHECK_THROWS_AS(build_patch_dataset(one, PatchSetup::pri, IntentFormat::weight, 1, spec),
                    Error);
}

TEST_CASE("fact patch datasets cover PRI and CTX") {
    FactKB kb = FactKB::synth(10, 4);
    auto pairs = gen_fact_dataset(kb, 200, false, 41);
    auto test = split(pairs, 0.3, 7).test;
    auto pri = build_patch_dataset(test, PatchSetup::pri, IntentFormat::instruction, 43);
    REQUIRE(!pri.empty());
    for (const auto& t : pri) {
        CHECK(t.source_prompt.find("Ignore the context") != std::string::npos);
        CHECK(t.target_prompt.find("Ignore the context") != std::string::npos);
        CHECK(t.source_answer != t.target_answer);
    }
    auto ctx = build_patch_dataset(test, PatchSetup::ctx, IntentFormat::instruction, 47);
    REQUIRE(!ctx.empty());
    for (const auto& t : ctx) {
        CHECK(t.source_prompt.find("Only listen to the context") != std::string::npos);
        CHECK(t.source_answer != t.target_answer);
    }
}

TEST_CASE("vocabulary covers every prompt the generators emit") {
    ArithmeticSpec spec;
    FactKB kb = FactKB::synth(10, 6);
    Tokenizer tok = Tokenizer::build(vocabulary_words(spec, kb));
    auto arith = gen_arithmetic(spec, 200, 51);
    auto facts = gen_fact_dataset(kb, 200, false, 52);
    auto mh = gen_fact_dataset(kb, 50, true, 53);
    std::vector<QueryContextPair> all;
    all.insert(all.end(), arith.begin(), arith.end());
    all.insert(all.end(), facts.begin(), facts.end());
    all.insert(all.end(), mh.begin(), mh.end());
    for (const auto& p : all) {
        for (Intent w : {Intent::ctx, Intent::pri}) {
            for (IntentFormat f :
                 {IntentFormat::weight, IntentFormat::instruction, IntentFormat::none}) {
                auto ex = format_prompt(p, w, f);
                CHECK_NOTHROW(tok.encode(ex.prompt));
                CHECK_NOTHROW(tok.id(ex.expected_answer));
            }
        }
    }
}

TEST_CASE("corpora are well formed") {
    ArithmeticSpec spec;
    spec.operators = {ArithOp::add, ArithOp::sub};
    FactKB kb = FactKB::synth(4, 3);
    Tokenizer tok = Tokenizer::build(vocabulary_words(spec, kb));
    PretrainConfig pc;
    pc.identity_sequences = 50;
    auto corpus = build_pretrain_corpus(spec, kb, tok, pc);
    CHECK(corpus.size() > 100);
    for (const auto& ex : corpus) {
        CHECK(ex.tokens.size() >= 2);
        CHECK(ex.loss_from >= 0);
        CHECK(ex.loss_from + 1 < static_cast<int>(ex.tokens.size()));
    }

    auto pairs = gen_arithmetic(spec, 32, 61);
    auto ft = build_finetune_corpus(pairs, {IntentFormat::weight, IntentFormat::instruction}, tok,
                                    true, 5);
    CHECK(ft.size() == 64);  // both intents per pair
    for (const auto& ex : ft) CHECK(ex.loss_from == static_cast<int>(ex.tokens.size()) - 2);
}
