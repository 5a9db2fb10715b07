#include "ccs/patch.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "ccs/common.hpp"
#include "ccs/tensor.hpp"

namespace ccs {

const char* to_string(Lens l) { return l == Lens::tip ? "tip" : "logit_lens"; }

Lens lens_from_string(const std::string& s) {
    if (s == "tip") return Lens::tip;
    if (s == "logit_lens") return Lens::logit_lens;
    fail_schema("unknown lens: " + s);
}

namespace {

std::vector<double> softmax_d(const std::vector<float>& logits) {
    double mx = -1e300;
    for (float x : logits) mx = std::max(mx, static_cast<double>(x));
    double denom = 0.0;
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(static_cast<double>(logits[i]) - mx);
        denom += out[i];
    }
    for (auto& x : out) x /= denom;
    return out;
}

std::vector<int> all_layers(const ModelConfig& cfg) {
    std::vector<int> out(static_cast<size_t>(cfg.n_layers));
    for (int i = 0; i < cfg.n_layers; ++i) out[static_cast<size_t>(i)] = i;
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// TIP
// ---------------------------------------------------------------------------

TipReader::TipReader(const TinyModel& model, TipConfig cfg) : model_(&model), cfg_(std::move(cfg)) {
    const int v = model.config.vocab_size;
    if (cfg_.groups < 1) fail_schema("TIP needs at least one filler group");
    if (cfg_.fillers.empty()) {
        // Spread the fillers over the content range of the vocabulary.
        for (int g = 0; g < cfg_.groups; ++g) {
            TokenId t = static_cast<TokenId>(2 + (static_cast<long>(g + 1) * (v - 3)) / (cfg_.groups + 1));
            cfg_.fillers.push_back(t);
        }
    }
    if (static_cast<int>(cfg_.fillers.size()) != cfg_.groups)
        fail_schema("TIP filler count must match groups");
    if (cfg_.query_token < 0) cfg_.query_token = static_cast<TokenId>(2 + (v - 3) / 2);

    TokenId nl = model.tokenizer.newline_id();
    for (int g = 0; g < cfg_.groups; ++g) {
        prompt_.push_back(cfg_.fillers[static_cast<size_t>(g)]);
        prompt_.push_back(cfg_.fillers[static_cast<size_t>(g)]);
        prompt_.push_back(nl);
    }
    prompt_.push_back(cfg_.query_token);

    std::vector<TokenId> prefix(prompt_.begin(), prompt_.end() - 1);
    cache_ = build_tail_cache(model, prefix);
}

std::vector<double> TipReader::readout(const std::vector<float>& h, int layer) const {
    ResidOverride ov;
    ov.layer = layer;
    ov.kind = ResidOverride::Kind::replace;
    ov.h = h;
    auto logits = run_tail(*model_, cache_, prompt_.back(), ov);
    return softmax_d(logits);
}

std::vector<double> logit_lens(const TinyModel& model, const std::vector<float>& h) {
    const ModelConfig& cfg = model.config;
    if (static_cast<int>(h.size()) != cfg.d_model) fail_schema("logit_lens: wrong vector length");
    for (float x : h)
        if (!std::isfinite(x)) fail_schema("logit_lens: non-finite input");
    int d = cfg.d_model;
    double mu = 0.0;
    for (float x : h) mu += static_cast<double>(x);
    mu /= d;
    double var = 0.0;
    for (float x : h) {
        double dv = static_cast<double>(x) - mu;
        var += dv * dv;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + static_cast<double>(cfg.norm_eps));
    std::vector<float> normed(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        normed[static_cast<size_t>(j)] = static_cast<float>(
            (static_cast<double>(h[static_cast<size_t>(j)]) - mu) * rstd *
                static_cast<double>(model.weights.lnf_g[static_cast<size_t>(j)]) +
            static_cast<double>(model.weights.lnf_b[static_cast<size_t>(j)]));
    std::vector<float> logits(static_cast<size_t>(cfg.vocab_size));
    mm_nn(normed.data(), model.weights.w_un.row(0), logits.data(), 1, d, cfg.vocab_size);
    for (int j = 0; j < cfg.vocab_size; ++j)
        logits[static_cast<size_t>(j)] += model.weights.b_un[static_cast<size_t>(j)];
    return softmax_d(logits);
}

// ---------------------------------------------------------------------------
// Interchange
// ---------------------------------------------------------------------------

SourceRecording record_source(const TinyModel& model, const PatchTuple& tuple, Site site) {
    auto src_tokens = model.tokenizer.encode(tuple.source_prompt);
    auto tgt_tokens = model.tokenizer.encode(tuple.target_prompt);
    if (src_tokens.empty() || tgt_tokens.empty()) fail_schema("interchange: empty prompt");
    if (src_tokens.back() != tgt_tokens.back())
        fail_schema("interchange: source and target prompts end with different tokens");

    SourceRecording rec;
    rec.site = site;
    auto res = forward(model, src_tokens, {HookSpec::record_at(site, all_layers(model.config))});
    rec.source_logits = res.logits;
    int last = static_cast<int>(src_tokens.size()) - 1;
    rec.vectors.reserve(static_cast<size_t>(model.config.n_layers));
    for (int l = 0; l < model.config.n_layers; ++l)
        rec.vectors.push_back(res.record.at(site, l, last));
    return rec;
}

InterchangeResult interchange_recorded(const TinyModel& model, const PatchTuple& tuple,
                                       const SourceRecording& rec,
                                       const std::vector<int>& layers) {
    auto tgt_tokens = model.tokenizer.encode(tuple.target_prompt);
    std::vector<HookSpec> hooks;
    if (!layers.empty()) {
        std::vector<std::vector<float>> vectors;
        for (int l : layers) {
            if (l < 0 || l >= model.config.n_layers) fail_schema("interchange: layer out of range");
            vectors.push_back(rec.vectors[static_cast<size_t>(l)]);
        }
        hooks.push_back(HookSpec::replace_at(rec.site, layers, std::move(vectors)));
    }
    hooks.push_back(HookSpec::record_at(Site::resid_post, all_layers(model.config)));

    auto res = forward(model, tgt_tokens, hooks);
    InterchangeResult out;
    out.patched_logits = res.logits;
    out.source_logits = rec.source_logits;
    out.target_resid = Mat<float>(model.config.n_layers, model.config.d_model);
    int last = static_cast<int>(tgt_tokens.size()) - 1;
    for (int l = 0; l < model.config.n_layers; ++l) {
        const auto& v = res.record.at(Site::resid_post, l, last);
        std::copy(v.begin(), v.end(), out.target_resid.row(l));
    }
    return out;
}

InterchangeResult interchange(const TinyModel& model, const PatchTuple& tuple,
                              const std::vector<int>& layers, Site site) {
    SourceRecording rec = record_source(model, tuple, site);
    return interchange_recorded(model, tuple, rec, layers);
}

std::vector<float> residual_patch(const TinyModel& model, const PatchTuple& tuple, int layer) {
    if (layer < 0 || layer >= model.config.n_layers)
        fail_schema("residual_patch: layer out of range");
    SourceRecording rec = record_source(model, tuple, Site::resid_post);
    auto tgt_tokens = model.tokenizer.encode(tuple.target_prompt);
    std::vector<HookSpec> hooks{HookSpec::replace_at(
        Site::resid_post, {layer}, {rec.vectors[static_cast<size_t>(layer)]})};
    return forward(model, tgt_tokens, hooks).logits;
}

// ---------------------------------------------------------------------------
// Layer curves and sweeps
// ---------------------------------------------------------------------------

std::vector<LayerCurve> layer_curve(const TinyModel& model, const PatchTuple& tuple,
                                    const std::vector<int>& patched_layers,
                                    const std::vector<std::string>& answer_tokens, Lens lens,
                                    Site site, const TipReader* tip) {
    std::optional<TipReader> local_tip;
    if (lens == Lens::tip && !tip) local_tip.emplace(model);
    const TipReader* reader = tip ? tip : (local_tip ? &*local_tip : nullptr);

    auto res = interchange(model, tuple, patched_layers, site);
    int L = model.config.n_layers;
    std::vector<LayerCurve> out;
    for (const auto& tok : answer_tokens) {
        TokenId id = model.tokenizer.id(tok);
        LayerCurve c;
        c.token = tok;
        c.lens = lens;
        c.probability.resize(static_cast<size_t>(L));
        for (int l = 0; l < L; ++l) {
            std::vector<float> h(res.target_resid.row(l), res.target_resid.row(l) + model.config.d_model);
            std::vector<double> dist =
                lens == Lens::tip ? reader->readout(h, l) : logit_lens(model, h);
            c.probability[static_cast<size_t>(l)] = dist[static_cast<size_t>(id)];
        }
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<PreparedTuple> prepare_tuples(const TinyModel& model,
                                          const std::vector<PatchTuple>& tuples, Site site) {
    std::vector<PreparedTuple> out(tuples.size());
    parallel_for(static_cast<int>(tuples.size()), [&](int i) {
        PreparedTuple& p = out[static_cast<size_t>(i)];
        p.tuple = tuples[static_cast<size_t>(i)];
        p.recording = record_source(model, p.tuple, site);
        p.target_tokens = model.tokenizer.encode(p.tuple.target_prompt);
        p.src_answer = model.tokenizer.id(p.tuple.source_answer);
        p.tgt_answer = model.tokenizer.id(p.tuple.target_answer);
    });
    return out;
}

SweepEval evaluate_sweep(const TinyModel& model, const std::vector<PreparedTuple>& prepared,
                         const std::vector<int>& layers, Lens lens, const TipReader* tip,
                         bool use_median) {
    if (prepared.empty()) fail_schema("evaluate_sweep: no tuples");
    if (lens == Lens::tip && !tip) fail_schema("evaluate_sweep: TIP lens requires a TipReader");
    int L = model.config.n_layers;
    int n = static_cast<int>(prepared.size());
    Mat<double> src_probs(n, L), tgt_probs(n, L);
    std::vector<double> out_src(static_cast<size_t>(n)), out_tgt(static_cast<size_t>(n));

    parallel_for(n, [&](int i) {
        const PreparedTuple& p = prepared[static_cast<size_t>(i)];
        auto res = interchange_recorded(model, p.tuple, p.recording, layers);
        auto dist = softmax_d(res.patched_logits);
        out_src[static_cast<size_t>(i)] = dist[static_cast<size_t>(p.src_answer)];
        out_tgt[static_cast<size_t>(i)] = dist[static_cast<size_t>(p.tgt_answer)];
        for (int l = 0; l < L; ++l) {
            std::vector<float> h(res.target_resid.row(l),
                                 res.target_resid.row(l) + model.config.d_model);
            std::vector<double> d = lens == Lens::tip && tip ? tip->readout(h, l)
                                                             : logit_lens(model, h);
            src_probs.at(i, l) = d[static_cast<size_t>(p.src_answer)];
            tgt_probs.at(i, l) = d[static_cast<size_t>(p.tgt_answer)];
        }
    });

    auto aggregate = [&](const Mat<double>& m, int layer) {
        if (!use_median) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += m.at(i, layer);
            return s / n;
        }
        std::vector<double> v(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = m.at(i, layer);
        std::sort(v.begin(), v.end());
        return n % 2 ? v[static_cast<size_t>(n / 2)]
                     : 0.5 * (v[static_cast<size_t>(n / 2 - 1)] + v[static_cast<size_t>(n / 2)]);
    };

    SweepEval ev;
    ev.src_curve.resize(static_cast<size_t>(L));
    ev.tgt_curve.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        ev.src_curve[static_cast<size_t>(l)] = aggregate(src_probs, l);
        ev.tgt_curve[static_cast<size_t>(l)] = aggregate(tgt_probs, l);
    }
    double ssum = 0.0, tsum = 0.0;
    for (int i = 0; i < n; ++i) {
        ssum += out_src[static_cast<size_t>(i)];
        tsum += out_tgt[static_cast<size_t>(i)];
    }
    ev.out_src = ssum / n;
    ev.out_tgt = tsum / n;
    return ev;
}

}  // namespace ccs
