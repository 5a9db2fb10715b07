#include "ccs/subspace.hpp"

#include <algorithm>
#include <cmath>

#include "ccs/common.hpp"
#include "ccs/rng.hpp"
#include "ccs/tensor.hpp"

namespace ccs {

double ProjectionDirection::norm() const {
    double s = 0.0;
    for (float x : u) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
}

void ProjectionDirection::renormalize() {
    double n = norm();
    if (n <= 0.0) fail_numeric("projection direction collapsed to zero norm");
    for (auto& x : u) x = static_cast<float>(static_cast<double>(x) / n);
}

ProjectionCheck check_projection(const std::vector<float>& u) {
    int d = static_cast<int>(u.size());
    ProjectionCheck c;
    double s = 0.0;
    for (float x : u) s += static_cast<double>(x) * static_cast<double>(x);
    c.u_norm_err = std::abs(std::sqrt(s) - 1.0);
    // P = u u^T. Exploit nothing; build it and measure directly.
    Mat<double> p(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            p.at(i, j) = static_cast<double>(u[static_cast<size_t>(i)]) *
                         static_cast<double>(u[static_cast<size_t>(j)]);
    double sym = 0.0, tr = 0.0;
    for (int i = 0; i < d; ++i) {
        tr += p.at(i, i);
        for (int j = 0; j < d; ++j) {
            double dsym = p.at(i, j) - p.at(j, i);
            sym += dsym * dsym;
        }
    }
    c.symmetry_err = std::sqrt(sym);
    c.trace_err = std::abs(tr - 1.0);
    Mat<double> p2(d, d);
    mm_nn(p.row(0), p.row(0), p2.row(0), d, d, d);
    double idem = 0.0;
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double dv = p2.at(i, j) - p.at(i, j);
            idem += dv * dv;
        }
    c.idem_err = std::sqrt(idem);
    return c;
}

namespace {

std::vector<float> resid_at(const TinyModel& model, const std::vector<TokenId>& tokens,
                            int layer) {
    auto res = forward(model, tokens, {HookSpec::record_at(Site::resid_post, {layer})});
    return res.record.at(Site::resid_post, layer, static_cast<int>(tokens.size()) - 1);
}

double dotf(const std::vector<float>& a, const std::vector<float>& b) {
    return dot_d(a.data(), b.data(), static_cast<int>(a.size()));
}

}  // namespace

std::vector<float> patched_forward(const TinyModel& model, const std::vector<TokenId>& target,
                                   const std::vector<TokenId>& source,
                                   const std::vector<float>& u, int layer) {
    if (layer < 0 || layer >= model.config.n_layers)
        fail_schema("patched_forward: layer out of range");
    std::vector<float> h_s = resid_at(model, source, layer);
    float value = static_cast<float>(dotf(u, h_s));
    auto res = forward(model, target, {HookSpec::subspace_at(layer, u, value)});
    return res.logits;
}

std::vector<float> steer(const TinyModel& model, const std::vector<TokenId>& prompt,
                         const std::vector<float>& u, int layer, double c_value) {
    auto res = forward(model, prompt,
                       {HookSpec::subspace_at(layer, u, static_cast<float>(c_value))});
    return res.logits;
}

// ---------------------------------------------------------------------------
// Learning u
// ---------------------------------------------------------------------------

namespace {

struct PairState {
    TailCache cache;          // target prompt prefix
    TokenId last_token = 0;
    TokenId src_answer = 0;
    std::vector<float> h_s;   // source resid at the subspace layer
    std::vector<float> h_t;   // target resid at the subspace layer
    std::vector<float> diff;  // h_s - h_t
};

}  // namespace

SubspaceTrainResult learn_subspace(const TinyModel& model, const std::vector<PatchTuple>& pairs,
                                   int layer, const SubspaceTrainConfig& cfg) {
    if (layer < 0 || layer >= model.config.n_layers)
        fail_schema("learn_subspace: layer out of range");
    if (cfg.learning_rate <= 0 || cfg.steps <= 0 || cfg.batch_size <= 0)
        fail_schema("learn_subspace: hyperparameters must be positive");
    const int d = model.config.d_model;

    // Frozen filtering pass: keep tuples whose source and target prompts the
    // model already answers correctly (= both intents right).
    std::vector<const PatchTuple*> kept;
    std::vector<char> keep_flag(pairs.size(), 0);
    parallel_for(static_cast<int>(pairs.size()), [&](int i) {
        const PatchTuple& t = pairs[static_cast<size_t>(i)];
        auto src = model.tokenizer.encode(t.source_prompt);
        auto tgt = model.tokenizer.encode(t.target_prompt);
        auto src_out = greedy_decode(model, src, 1);
        auto tgt_out = greedy_decode(model, tgt, 1);
        bool ok = !src_out.empty() && !tgt_out.empty() &&
                  src_out[0] == model.tokenizer.id(t.source_answer) &&
                  tgt_out[0] == model.tokenizer.id(t.target_answer);
        keep_flag[static_cast<size_t>(i)] = ok ? 1 : 0;
    });
    for (size_t i = 0; i < pairs.size(); ++i)
        if (keep_flag[i]) kept.push_back(&pairs[i]);
    if (kept.empty()) fail_schema("learn_subspace: no pairs survive the both-intents-correct filter");

    SubspaceTrainResult result;
    result.pairs_used = static_cast<int>(kept.size());
    result.pairs_filtered_out = static_cast<int>(pairs.size() - kept.size());

    // Frozen per-pair state.
    std::vector<PairState> states(kept.size());
    parallel_for(static_cast<int>(kept.size()), [&](int i) {
        const PatchTuple& t = *kept[static_cast<size_t>(i)];
        PairState& st = states[static_cast<size_t>(i)];
        auto src = model.tokenizer.encode(t.source_prompt);
        auto tgt = model.tokenizer.encode(t.target_prompt);
        std::vector<TokenId> prefix(tgt.begin(), tgt.end() - 1);
        st.cache = build_tail_cache(model, prefix);
        st.last_token = tgt.back();
        st.src_answer = model.tokenizer.id(t.source_answer);
        st.h_s = resid_at(model, src, layer);
        st.h_t = resid_at(model, tgt, layer);
        st.diff.resize(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j)
            st.diff[static_cast<size_t>(j)] = st.h_s[static_cast<size_t>(j)] - st.h_t[static_cast<size_t>(j)];
    });

    Rng rng(cfg.seed, 151);
    int holdout_n = std::min<int>(static_cast<int>(kept.size() * cfg.holdout_fraction),
                                  static_cast<int>(kept.size()) / 2);
    std::vector<int> order(states.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    std::vector<int> holdout(order.begin(), order.begin() + holdout_n);
    std::vector<int> train_idx(order.begin() + holdout_n, order.end());
    if (train_idx.empty()) fail_schema("learn_subspace: too few pairs to train on");

    ProjectionDirection dir;
    dir.layer = layer;
    dir.u.resize(static_cast<size_t>(d));
    for (auto& x : dir.u) x = static_cast<float>(rng.normal());
    dir.renormalize();

    auto pair_loss_grad = [&](int idx, const std::vector<float>& u, std::vector<double>* grad_u) {
        const PairState& st = states[static_cast<size_t>(idx)];
        double u_dot_diff = dotf(u, st.diff);
        std::vector<double> h_tilde(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j)
            h_tilde[static_cast<size_t>(j)] = static_cast<double>(st.h_t[static_cast<size_t>(j)]) +
                                              static_cast<double>(u[static_cast<size_t>(j)]) * u_dot_diff;
        TailGrad tg = run_tail_grad(model, st.cache, st.last_token, layer, h_tilde, st.src_answer);
        if (grad_u) {
            double g_dot_u = 0.0;
            for (int j = 0; j < d; ++j)
                g_dot_u += tg.grad[static_cast<size_t>(j)] * static_cast<double>(u[static_cast<size_t>(j)]);
            for (int j = 0; j < d; ++j)
                (*grad_u)[static_cast<size_t>(j)] +=
                    tg.grad[static_cast<size_t>(j)] * u_dot_diff +
                    g_dot_u * static_cast<double>(st.diff[static_cast<size_t>(j)]);
        }
        return tg.loss;
    };

    auto holdout_loss = [&](const std::vector<float>& u) {
        if (holdout.empty()) return 0.0;
        std::vector<double> losses(holdout.size());
        parallel_for(static_cast<int>(holdout.size()), [&](int i) {
            losses[static_cast<size_t>(i)] = pair_loss_grad(holdout[static_cast<size_t>(i)], u, nullptr);
        });
        double s = 0.0;
        for (double x : losses) s += x;
        return s / static_cast<double>(losses.size());
    };

    std::vector<int> perm = train_idx;
    rng.shuffle(perm);
    size_t cursor = 0;
    auto next_index = [&]() {
        if (cursor >= perm.size()) {
            rng.shuffle(perm);
            cursor = 0;
        }
        return perm[cursor++];
    };

    result.best_holdout_loss = holdout_loss(dir.u);
    ProjectionDirection best = dir;
    auto checkpoint = [&](int step, double train_loss, double ho_loss) {
        ProjectionCheck c = check_projection(dir.u);
        c.step = step;
        c.train_loss = train_loss;
        c.holdout_loss = ho_loss;
        result.checkpoints.push_back(c);
    };
    checkpoint(0, 0.0, result.best_holdout_loss);

    int batch = std::min<int>(cfg.batch_size, static_cast<int>(train_idx.size()));
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<int> bidx(static_cast<size_t>(batch));
        for (int b = 0; b < batch; ++b) bidx[static_cast<size_t>(b)] = next_index();
        std::vector<std::vector<double>> grads(static_cast<size_t>(batch));
        std::vector<double> losses(static_cast<size_t>(batch), 0.0);
        parallel_for(batch, [&](int b) {
            grads[static_cast<size_t>(b)].assign(static_cast<size_t>(d), 0.0);
            losses[static_cast<size_t>(b)] =
                pair_loss_grad(bidx[static_cast<size_t>(b)], dir.u, &grads[static_cast<size_t>(b)]);
        });
        std::vector<double> grad(static_cast<size_t>(d), 0.0);
        double loss = 0.0;
        for (int b = 0; b < batch; ++b) {
            loss += losses[static_cast<size_t>(b)];
            for (int j = 0; j < d; ++j)
                grad[static_cast<size_t>(j)] += grads[static_cast<size_t>(b)][static_cast<size_t>(j)];
        }
        loss /= batch;
        if (!std::isfinite(loss))
            fail_numeric("learn_subspace diverged at step " + std::to_string(step));
        for (int j = 0; j < d; ++j)
            dir.u[static_cast<size_t>(j)] = static_cast<float>(
                static_cast<double>(dir.u[static_cast<size_t>(j)]) -
                cfg.learning_rate * grad[static_cast<size_t>(j)] / batch);
        dir.renormalize();

        bool last = step + 1 == cfg.steps;
        if ((step + 1) % cfg.eval_every == 0 || last) {
            double ho = holdout_loss(dir.u);
            checkpoint(step + 1, loss, ho);
            if (ho < result.best_holdout_loss) {
                result.best_holdout_loss = ho;
                best = dir;
            }
        }
    }
    result.direction = best;
    return result;
}

// ---------------------------------------------------------------------------
// Constants, stats, correlation
// ---------------------------------------------------------------------------

namespace {

void assert_no_intent_tokens(const std::string& prompt) {
    if (prompt.find("Context weight:") != std::string::npos ||
        prompt.find("Ignore the context") != std::string::npos ||
        prompt.find("Only listen to the context") != std::string::npos)
        fail_schema("steered evaluation prompt carries intent tokens");
}

}  // namespace

SteeringConstants fit_constants(const TinyModel& model, const std::vector<float>& u, int layer,
                                const std::vector<QueryContextPair>& validation,
                                const FitConstantsConfig& cfg) {
    if (validation.empty()) fail_schema("fit_constants: empty validation set");
    int n = static_cast<int>(validation.size());

    // Observed subspace values of the intent-free prompts.
    struct Prepared {
        TailCache cache;
        TokenId last = 0;
        TokenId ctx_ans = 0, pri_ans = 0;
        double value = 0.0;  // u . h_t
    };
    std::vector<Prepared> prep(static_cast<size_t>(n));
    parallel_for(n, [&](int i) {
        const auto& pair = validation[static_cast<size_t>(i)];
        PromptExample ex = format_prompt(pair, Intent::ctx, IntentFormat::none);
        assert_no_intent_tokens(ex.prompt);
        auto toks = model.tokenizer.encode(ex.prompt);
        Prepared& p = prep[static_cast<size_t>(i)];
        std::vector<TokenId> prefix(toks.begin(), toks.end() - 1);
        p.cache = build_tail_cache(model, prefix);
        p.last = toks.back();
        p.ctx_ans = model.tokenizer.id(pair.context_answer);
        p.pri_ans = model.tokenizer.id(pair.prior_answer);
        std::vector<float> h = resid_at(model, toks, layer);
        p.value = dot_d(u.data(), h.data(), static_cast<int>(u.size()));
    });

    double mean = 0.0;
    for (const auto& p : prep) mean += p.value;
    mean /= n;
    double var = 0.0;
    for (const auto& p : prep) var += (p.value - mean) * (p.value - mean);
    var /= std::max(1, n - 1);
    double sd = std::sqrt(std::max(var, 1e-12));

    int grid_n = std::max(3, cfg.grid_points);
    std::vector<double> grid(static_cast<size_t>(grid_n));
    for (int g = 0; g < grid_n; ++g)
        grid[static_cast<size_t>(g)] =
            mean - cfg.std_range * sd + (2.0 * cfg.std_range * sd) * g / (grid_n - 1);

    // correct_ctx[g][i]: steering with grid[g] makes example i produce its
    // context answer; likewise for the prior answer.
    Mat<float> correct_ctx(grid_n, n), correct_pri(grid_n, n);
    parallel_for(n, [&](int i) {
        const Prepared& p = prep[static_cast<size_t>(i)];
        for (int g = 0; g < grid_n; ++g) {
            ResidOverride ov;
            ov.layer = layer;
            ov.kind = ResidOverride::Kind::subspace;
            ov.direction = u;
            ov.value = static_cast<float>(grid[static_cast<size_t>(g)]);
            auto logits = run_tail(model, p.cache, p.last, ov);
            int best = 0;
            for (int j = 1; j < model.config.vocab_size; ++j)
                if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
            correct_ctx.at(g, i) = best == p.ctx_ans ? 1.0f : 0.0f;
            correct_pri.at(g, i) = best == p.pri_ans ? 1.0f : 0.0f;
        }
    });

    double best_acc = -1.0;
    int best_gp = 0, best_gc = 0;
    for (int gp = 0; gp < grid_n; ++gp) {
        for (int gc = 0; gc < grid_n; ++gc) {
            if (gp == gc) continue;  // c_pri != c_ctx
            int both = 0;
            for (int i = 0; i < n; ++i)
                if (correct_pri.at(gp, i) > 0.5f && correct_ctx.at(gc, i) > 0.5f) ++both;
            double acc = static_cast<double>(both) / n;
            if (acc > best_acc) {
                best_acc = acc;
                best_gp = gp;
                best_gc = gc;
            }
        }
    }

    // Degenerate: the grid found no signal at all.
    bool flat = best_acc <= 0.0;
    SteeringConstants out;
    out.degenerate = flat;
    if (flat) {
        out.c_pri = mean - sd;
        out.c_ctx = mean + sd;
    } else {
        out.c_pri = grid[static_cast<size_t>(best_gp)];
        out.c_ctx = grid[static_cast<size_t>(best_gc)];
    }
    return out;
}

SubspaceStats subspace_stats(const TinyModel& model,
                             const std::vector<PromptExample>& prompts_with_intents,
                             const std::vector<float>& u, int layer) {
    if (prompts_with_intents.empty()) fail_schema("subspace_stats: no prompts");
    SubspaceStats st;
    int n = static_cast<int>(prompts_with_intents.size());
    std::vector<double> values(static_cast<size_t>(n));
    parallel_for(n, [&](int i) {
        const auto& ex = prompts_with_intents[static_cast<size_t>(i)];
        if (ex.intent_format == IntentFormat::none)
            fail_schema("subspace_stats: prompts must carry explicit intents");
        auto toks = model.tokenizer.encode(ex.prompt);
        std::vector<float> h = resid_at(model, toks, layer);
        values[static_cast<size_t>(i)] = dot_d(u.data(), h.data(), static_cast<int>(u.size()));
    });
    for (int i = 0; i < n; ++i) {
        if (prompts_with_intents[static_cast<size_t>(i)].intent == Intent::ctx)
            st.values_ctx.push_back(values[static_cast<size_t>(i)]);
        else
            st.values_pri.push_back(values[static_cast<size_t>(i)]);
    }
    auto mean_of = [](const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    st.mean_ctx = mean_of(st.values_ctx);
    st.mean_pri = mean_of(st.values_pri);
    st.separation = std::abs(st.mean_ctx - st.mean_pri);
    return st;
}

double separation_accuracy_correlation(const std::vector<std::pair<double, double>>& points) {
    int n = static_cast<int>(points.size());
    if (n < 3) fail_schema("separation_accuracy_correlation: need at least 3 checkpoints");
    double mx = 0.0, my = 0.0;
    for (const auto& [x, y] : points) {
        mx += x;
        my += y;
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (const auto& [x, y] : points) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if (sxx <= 0.0 || syy <= 0.0)
        fail_schema("separation_accuracy_correlation: zero variance in inputs");
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace ccs
