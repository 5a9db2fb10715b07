#include "ccs/eval.hpp"

#include <algorithm>

#include "ccs/common.hpp"
#include "ccs/rng.hpp"
#include "ccs/tensor.hpp"

namespace ccs {

const char* to_string(EvalMode m) {
    switch (m) {
        case EvalMode::zero_shot: return "zero_shot";
        case EvalMode::icl: return "icl";
        case EvalMode::fine_tuned: return "fine_tuned";
        case EvalMode::steered: return "steered";
    }
    return "?";
}

EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "zero_shot") return EvalMode::zero_shot;
    if (s == "icl") return EvalMode::icl;
    if (s == "fine_tuned") return EvalMode::fine_tuned;
    if (s == "steered") return EvalMode::steered;
    fail_schema("unknown eval mode: " + s);
}

namespace {

void check_no_intent_tokens(const std::string& prompt) {
    if (prompt.find("Context weight:") != std::string::npos ||
        prompt.find("Ignore the context") != std::string::npos ||
        prompt.find("Only listen to the context") != std::string::npos)
        fail_schema("steered evaluation prompt carries intent tokens");
}

// Demonstrations: k training pairs, intents alternating.
std::string icl_prefix(const std::vector<QueryContextPair>& pool, const EvalConfig& cfg) {
    if (pool.empty()) fail_schema("icl mode needs a demonstration pool");
    if (cfg.icl_k < 1) fail_schema("icl k must be >= 1");
    Rng rng(cfg.seed, 163);
    auto idx = rng.sample_indices(static_cast<int>(pool.size()), cfg.icl_k);
    std::string out;
    for (size_t i = 0; i < idx.size(); ++i) {
        bool ctx_turn = cfg.icl_ctx_first ? (i % 2 == 0) : (i % 2 == 1);
        Intent w = ctx_turn ? Intent::ctx : Intent::pri;
        PromptExample ex = format_prompt(pool[static_cast<size_t>(idx[i])], w, cfg.intent_format);
        out += ex.prompt + " " + ex.expected_answer + "\n";
    }
    return out;
}

}  // namespace

EvalReport pair_accuracy(const TinyModel& model, const std::vector<QueryContextPair>& pairs,
                         const EvalConfig& cfg, const std::vector<QueryContextPair>* icl_pool) {
    if (pairs.empty()) fail_schema("pair_accuracy: empty test set");
    EvalConfig resolved = cfg;
    if (cfg.mode == EvalMode::steered) {
        resolved.intent_format = IntentFormat::none;
        if (resolved.layer < 0 || resolved.direction.empty())
            fail_schema("steered evaluation needs a direction and layer");
        if (resolved.constants.c_pri == resolved.constants.c_ctx)
            fail_schema("steered evaluation needs distinct constants");
    }

    std::string demo_prefix;
    if (cfg.mode == EvalMode::icl) {
        if (!icl_pool) fail_schema("icl mode needs a demonstration pool");
        demo_prefix = icl_prefix(*icl_pool, resolved);
    }

    int n = static_cast<int>(pairs.size());
    std::vector<ExampleRecord> ctx_rec(static_cast<size_t>(n)), pri_rec(static_cast<size_t>(n));
    parallel_for(n, [&](int i) {
        const QueryContextPair& pair = pairs[static_cast<size_t>(i)];
        for (Intent w : {Intent::ctx, Intent::pri}) {
            PromptExample ex = format_prompt(pair, w, resolved.intent_format);
            std::string prompt_text = demo_prefix.empty() ? ex.prompt : demo_prefix + ex.prompt;
            std::vector<TokenId> prompt = model.tokenizer.encode(prompt_text);
            TokenId predicted;
            if (resolved.mode == EvalMode::steered) {
                check_no_intent_tokens(prompt_text);
                double c = w == Intent::ctx ? resolved.constants.c_ctx : resolved.constants.c_pri;
                auto logits = steer(model, prompt, resolved.direction, resolved.layer, c);
                int best = 0;
                for (int j = 1; j < model.config.vocab_size; ++j)
                    if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
                predicted = best;
            } else {
                auto out = greedy_decode(model, prompt, 1);
                predicted = out.at(0);
            }
            ExampleRecord rec;
            rec.pair_id = pair.id;
            rec.intent = w;
            rec.expected = ex.expected_answer;
            rec.predicted = model.tokenizer.token(predicted);
            rec.correct = rec.predicted == rec.expected;
            (w == Intent::ctx ? ctx_rec : pri_rec)[static_cast<size_t>(i)] = std::move(rec);
        }
    });

    EvalReport report;
    report.config = resolved;
    report.n_pairs = n;
    int pair_ok = 0, ctx_ok = 0, pri_ok = 0;
    for (int i = 0; i < n; ++i) {
        const auto& c = ctx_rec[static_cast<size_t>(i)];
        const auto& p = pri_rec[static_cast<size_t>(i)];
        ctx_ok += c.correct;
        pri_ok += p.correct;
        pair_ok += c.correct && p.correct;
        report.records.push_back(c);
        report.records.push_back(p);
    }
    report.pair_accuracy = static_cast<double>(pair_ok) / n;
    report.acc_ctx = static_cast<double>(ctx_ok) / n;
    report.acc_pri = static_cast<double>(pri_ok) / n;
    return report;
}

std::map<std::pair<std::string, std::string>, EvalReport> generalization_matrix(
    const TinyModel& model, const std::vector<DatasetRef>& datasets,
    const std::vector<IntentFormat>& formats, const EvalConfig& base_cfg,
    const std::vector<QueryContextPair>* icl_pool) {
    if (datasets.empty() || formats.empty())
        fail_schema("generalization_matrix: need at least one dataset and format");
    std::map<std::pair<std::string, std::string>, EvalReport> grid;
    for (const auto& ds : datasets) {
        for (IntentFormat f : formats) {
            EvalConfig cfg = base_cfg;
            cfg.dataset_id = ds.id;
            cfg.intent_format = f;
            grid[{ds.id, to_string(f)}] = pair_accuracy(model, *ds.pairs, cfg, icl_pool);
        }
    }
    return grid;
}

std::vector<SteeringComparison> steering_vs_baseline(const TinyModel& model,
                                                     const std::vector<float>& u, int layer,
                                                     const SteeringConstants& constants,
                                                     const std::vector<DatasetRef>& datasets,
                                                     const EvalConfig& base_cfg) {
    std::vector<SteeringComparison> out;
    for (const auto& ds : datasets) {
        SteeringComparison cmp;
        cmp.dataset_id = ds.id;
        EvalConfig base = base_cfg;
        base.dataset_id = ds.id;
        cmp.baseline = pair_accuracy(model, *ds.pairs, base);
        EvalConfig st = base_cfg;
        st.dataset_id = ds.id;
        st.mode = EvalMode::steered;
        st.direction = u;
        st.layer = layer;
        st.constants = constants;
        cmp.steered = pair_accuracy(model, *ds.pairs, st);
        out.push_back(std::move(cmp));
    }
    return out;
}

}  // namespace ccs
