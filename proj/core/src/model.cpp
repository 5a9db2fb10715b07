#include "ccs/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ccs/common.hpp"
#include "ccs/rng.hpp"

namespace ccs {

void ModelConfig::validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_mlp <= 0 || vocab_size <= 0 || max_seq_len <= 0)
        fail_schema("model config fields must be positive");
    if (d_model % n_heads != 0) fail_schema("d_model must be divisible by n_heads");
    if (n_layers < 6) fail_schema("n_layers must be at least 6");
    if (!(norm_eps > 0.0f)) fail_schema("norm_eps must be positive");
}

const char* to_string(Site s) {
    switch (s) {
        case Site::mha_out: return "mha_out";
        case Site::mlp_out: return "mlp_out";
        case Site::resid_post: return "resid_post";
    }
    return "?";
}

HookSpec HookSpec::record_at(Site site, std::vector<int> layers) {
    HookSpec h;
    h.site = site;
    h.action = Action::record;
    h.layers = std::move(layers);
    return h;
}

HookSpec HookSpec::replace_at(Site site, std::vector<int> layers,
                              std::vector<std::vector<float>> vectors) {
    HookSpec h;
    h.site = site;
    h.action = Action::replace;
    h.layers = std::move(layers);
    h.vectors = std::move(vectors);
    return h;
}

HookSpec HookSpec::subspace_at(int layer, std::vector<float> u, float value) {
    HookSpec h;
    h.site = Site::resid_post;
    h.action = Action::subspace_replace;
    h.layers = {layer};
    h.direction = std::move(u);
    h.value = value;
    return h;
}

const std::vector<float>& ActivationRecord::at(Site site, int layer, int position) const {
    auto it = values.find(ActKey{site, layer, position});
    if (it == values.end())
        fail_schema("activation record missing " + std::string(to_string(site)) + " layer " +
                    std::to_string(layer) + " pos " + std::to_string(position));
    return it->second;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void fill_normal(std::vector<T>& v, Rng& rng, double std_dev) {
    for (auto& x : v) x = static_cast<T>(rng.normal() * std_dev);
}

template <typename T>
WeightsT<T> make_weights(const ModelConfig& cfg) {
    WeightsT<T> w;
    int d = cfg.d_model, m = cfg.d_mlp, v = cfg.vocab_size;
    w.tok_emb = Mat<T>(v, d);
    w.pos_emb = Mat<T>(cfg.max_seq_len, d);
    w.blocks.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& b : w.blocks) {
        b.w_qkv = Mat<T>(d, 3 * d);
        b.b_qkv.assign(static_cast<size_t>(3 * d), T(0));
        b.w_o = Mat<T>(d, d);
        b.b_o.assign(static_cast<size_t>(d), T(0));
        b.ln1_g.assign(static_cast<size_t>(d), T(0));
        b.ln1_b.assign(static_cast<size_t>(d), T(0));
        b.ln2_g.assign(static_cast<size_t>(d), T(0));
        b.ln2_b.assign(static_cast<size_t>(d), T(0));
        b.w_up = Mat<T>(d, m);
        b.b_up.assign(static_cast<size_t>(m), T(0));
        b.w_down = Mat<T>(m, d);
        b.b_down.assign(static_cast<size_t>(d), T(0));
    }
    w.lnf_g.assign(static_cast<size_t>(d), T(0));
    w.lnf_b.assign(static_cast<size_t>(d), T(0));
    w.w_un = Mat<T>(d, v);
    w.b_un.assign(static_cast<size_t>(v), T(0));
    return w;
}

// Fixed traversal order shared by grads, moments, checkpoints.
template <typename T, typename F>
void visit_tensors(WeightsT<T>& w, F&& f) {
    f("tok_emb", w.tok_emb.data);
    f("pos_emb", w.pos_emb.data);
    for (size_t l = 0; l < w.blocks.size(); ++l) {
        auto& b = w.blocks[l];
        std::string p = "block" + std::to_string(l) + ".";
        f(p + "ln1_g", b.ln1_g);
        f(p + "ln1_b", b.ln1_b);
        f(p + "w_qkv", b.w_qkv.data);
        f(p + "b_qkv", b.b_qkv);
        f(p + "w_o", b.w_o.data);
        f(p + "b_o", b.b_o);
        f(p + "ln2_g", b.ln2_g);
        f(p + "ln2_b", b.ln2_b);
        f(p + "w_up", b.w_up.data);
        f(p + "b_up", b.b_up);
        f(p + "w_down", b.w_down.data);
        f(p + "b_down", b.b_down);
    }
    f("lnf_g", w.lnf_g);
    f("lnf_b", w.lnf_b);
    f("w_un", w.w_un.data);
    f("b_un", w.b_un);
}

template <typename T>
std::vector<std::vector<T>*> tensor_ptrs(WeightsT<T>& w) {
    std::vector<std::vector<T>*> out;
    visit_tensors(w, [&out](const std::string&, std::vector<T>& v) { out.push_back(&v); });
    return out;
}

std::vector<std::vector<int>> tensor_shapes(const ModelConfig& cfg) {
    std::vector<std::vector<int>> shapes;
    int d = cfg.d_model, m = cfg.d_mlp, v = cfg.vocab_size;
    shapes.push_back({v, d});
    shapes.push_back({cfg.max_seq_len, d});
    for (int l = 0; l < cfg.n_layers; ++l) {
        shapes.push_back({d});
        shapes.push_back({d});
        shapes.push_back({d, 3 * d});
        shapes.push_back({3 * d});
        shapes.push_back({d, d});
        shapes.push_back({d});
        shapes.push_back({d});
        shapes.push_back({d});
        shapes.push_back({d, m});
        shapes.push_back({m});
        shapes.push_back({m, d});
        shapes.push_back({d});
    }
    shapes.push_back({d});
    shapes.push_back({d});
    shapes.push_back({d, v});
    shapes.push_back({v});
    return shapes;
}

}  // namespace

TinyModel TinyModel::init(const ModelConfig& cfg, Tokenizer tok) {
    ModelConfig c = cfg;
    c.vocab_size = tok.size();
    c.validate();
    TinyModel model;
    model.config = c;
    model.tokenizer = std::move(tok);
    model.weights = make_weights<float>(c);
    Rng rng(c.seed, 97);
    double resid_std = 0.02 / std::sqrt(2.0 * c.n_layers);
    fill_normal(model.weights.tok_emb.data, rng, 0.02);
    fill_normal(model.weights.pos_emb.data, rng, 0.02);
    for (auto& b : model.weights.blocks) {
        std::fill(b.ln1_g.begin(), b.ln1_g.end(), 1.0f);
        std::fill(b.ln2_g.begin(), b.ln2_g.end(), 1.0f);
        fill_normal(b.w_qkv.data, rng, 0.02);
        fill_normal(b.w_o.data, rng, resid_std);
        fill_normal(b.w_up.data, rng, 0.02);
        fill_normal(b.w_down.data, rng, resid_std);
    }
    std::fill(model.weights.lnf_g.begin(), model.weights.lnf_g.end(), 1.0f);
    fill_normal(model.weights.w_un.data, rng, 0.02);
    return model;
}

std::vector<NamedTensor> TinyModel::named_tensors() {
    std::vector<NamedTensor> out;
    auto shapes = tensor_shapes(config);
    size_t i = 0;
    visit_tensors(weights, [&](const std::string& name, std::vector<float>& v) {
        out.push_back({name, shapes[i], v.data(), v.data(), v.size()});
        ++i;
    });
    return out;
}

std::vector<NamedTensor> TinyModel::named_tensors() const {
    auto* self = const_cast<TinyModel*>(this);
    auto out = self->named_tensors();
    for (auto& t : out) t.data = nullptr;
    return out;
}

WeightsT<double> TinyModel::weights_as_double() const {
    WeightsT<double> w = make_weights<double>(config);
    auto dst = tensor_ptrs(w);
    auto src = tensor_ptrs(const_cast<TinyModel*>(this)->weights);
    for (size_t i = 0; i < dst.size(); ++i)
        for (size_t j = 0; j < dst[i]->size(); ++j)
            (*dst[i])[j] = static_cast<double>((*src[i])[j]);
    return w;
}

bool TinyModel::finite() const {
    bool ok = true;
    visit_tensors(const_cast<TinyModel*>(this)->weights,
                  [&ok](const std::string&, std::vector<float>& v) {
                      for (float x : v)
                          if (!std::isfinite(x)) ok = false;
                  });
    return ok;
}

// ---------------------------------------------------------------------------
// Forward internals
// ---------------------------------------------------------------------------

namespace {

struct LnStats {
    std::vector<double> mu;
    std::vector<double> rstd;
};

template <typename T>
void layer_norm(const Mat<T>& x, const std::vector<T>& g, const std::vector<T>& b, double eps,
                Mat<T>& out, LnStats& stats) {
    int rows = x.rows, d = x.cols;
    stats.mu.resize(static_cast<size_t>(rows));
    stats.rstd.resize(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        const T* xi = x.row(i);
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += static_cast<double>(xi[j]);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double dv = static_cast<double>(xi[j]) - mu;
            var += dv * dv;
        }
        var /= d;
        double rstd = 1.0 / std::sqrt(var + eps);
        stats.mu[static_cast<size_t>(i)] = mu;
        stats.rstd[static_cast<size_t>(i)] = rstd;
        T* oi = out.row(i);
        for (int j = 0; j < d; ++j)
            oi[j] = static_cast<T>((static_cast<double>(xi[j]) - mu) * rstd *
                                       static_cast<double>(g[static_cast<size_t>(j)]) +
                                   static_cast<double>(b[static_cast<size_t>(j)]));
    }
}

template <typename T>
T gelu(T x) {
    double xd = static_cast<double>(x);
    double c = 0.7978845608028654;  // sqrt(2/pi)
    double t = std::tanh(c * (xd + 0.044715 * xd * xd * xd));
    return static_cast<T>(0.5 * xd * (1.0 + t));
}

double gelu_grad(double x) {
    double c = 0.7978845608028654;
    double inner = c * (x + 0.044715 * x * x * x);
    double t = std::tanh(inner);
    double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x);
}

template <typename T>
void add_bias(Mat<T>& x, const std::vector<T>& b) {
    for (int i = 0; i < x.rows; ++i) {
        T* xi = x.row(i);
        for (int j = 0; j < x.cols; ++j) xi[j] += b[static_cast<size_t>(j)];
    }
}

template <typename T>
struct BlockCache {
    Mat<T> x_in, ln1_out, qkv, att_ctx, mha_out, x_mid, ln2_out, mlp_pre, mlp_act, mlp_out, x_out;
    LnStats ln1_stats, ln2_stats;
    std::vector<Mat<T>> probs;  // per head, seq x seq
    std::vector<Mat<T>> qh, kh, vh;  // per head, seq x hd (contiguous copies)
};

template <typename T>
struct RunCache {
    int seq = 0;
    Mat<T> x0;
    std::vector<BlockCache<T>> blocks;
    Mat<T> lnf_in, lnf_out, logits;  // logits: rows = positions computed
    LnStats lnf_stats;
    std::vector<int> logit_rows;  // positions with logits
};

struct HookIndex {
    // per (site, layer): ordered applicable hooks
    const std::vector<HookSpec>* hooks = nullptr;
    int n_layers = 0;

    std::vector<const HookSpec*> at(Site site, int layer) const {
        std::vector<const HookSpec*> out;
        if (!hooks) return out;
        for (const auto& h : *hooks) {
            if (h.site != site) continue;
            if (std::find(h.layers.begin(), h.layers.end(), layer) == h.layers.end()) continue;
            out.push_back(&h);
        }
        return out;
    }
};

template <typename T>
void apply_site_hooks(Mat<T>& site_values, Site site, int layer, const HookIndex& idx, int seq,
                      int d, ActivationRecord* rec) {
    auto hooks = idx.at(site, layer);
    for (const HookSpec* h : hooks) {
        std::vector<int> positions = h->positions.empty() ? std::vector<int>{seq - 1} : h->positions;
        for (int pos : positions) {
            if (pos < 0 || pos >= seq) fail_schema("hook position out of range");
            T* row = site_values.row(pos);
            switch (h->action) {
                case HookSpec::Action::record:
                    break;
                case HookSpec::Action::replace: {
                    size_t which = 0;
                    for (size_t i = 0; i < h->layers.size(); ++i)
                        if (h->layers[i] == layer) which = i;
                    if (which >= h->vectors.size() ||
                        static_cast<int>(h->vectors[which].size()) != d)
                        fail_schema("replace vector of wrong length");
                    for (int j = 0; j < d; ++j) row[j] = static_cast<T>(h->vectors[which][j]);
                    break;
                }
                case HookSpec::Action::subspace_replace: {
                    if (site != Site::resid_post)
                        fail_schema("subspace_replace only applies to resid_post");
                    if (static_cast<int>(h->direction.size()) != d)
                        fail_schema("subspace direction of wrong length");
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j)
                        dot += static_cast<double>(h->direction[static_cast<size_t>(j)]) *
                               static_cast<double>(row[j]);
                    double delta = static_cast<double>(h->value) - dot;
                    for (int j = 0; j < d; ++j)
                        row[j] = static_cast<T>(static_cast<double>(row[j]) +
                                                static_cast<double>(h->direction[static_cast<size_t>(j)]) * delta);
                    break;
                }
            }
        }
    }
    // Records capture post-action values.
    for (const HookSpec* h : hooks) {
        if (h->action != HookSpec::Action::record || !rec) continue;
        std::vector<int> positions = h->positions.empty() ? std::vector<int>{seq - 1} : h->positions;
        for (int pos : positions) {
            const T* row = site_values.row(pos);
            std::vector<float> v(static_cast<size_t>(d));
            for (int j = 0; j < d; ++j) v[static_cast<size_t>(j)] = static_cast<float>(row[j]);
            rec->values[ActKey{site, layer, pos}] = std::move(v);
        }
    }
}

template <typename T>
void attention_forward(const BlockWeights<T>& bw, const ModelConfig& cfg, BlockCache<T>& bc,
                       int seq) {
    int d = cfg.d_model, hd = cfg.head_dim(), H = cfg.n_heads;
    bc.qkv = Mat<T>(seq, 3 * d);
    mm_nn(bc.ln1_out.row(0), bw.w_qkv.row(0), bc.qkv.row(0), seq, d, 3 * d);
    add_bias(bc.qkv, bw.b_qkv);

    bc.att_ctx = Mat<T>(seq, d);
    bc.probs.assign(static_cast<size_t>(H), Mat<T>());
    bc.qh.assign(static_cast<size_t>(H), Mat<T>());
    bc.kh.assign(static_cast<size_t>(H), Mat<T>());
    bc.vh.assign(static_cast<size_t>(H), Mat<T>());
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int h = 0; h < H; ++h) {
        Mat<T>&q = bc.qh[static_cast<size_t>(h)], &k = bc.kh[static_cast<size_t>(h)],
        &v = bc.vh[static_cast<size_t>(h)];
        q = Mat<T>(seq, hd);
        k = Mat<T>(seq, hd);
        v = Mat<T>(seq, hd);
        for (int i = 0; i < seq; ++i) {
            const T* qkvi = bc.qkv.row(i);
            std::memcpy(q.row(i), qkvi + h * hd, sizeof(T) * static_cast<size_t>(hd));
            std::memcpy(k.row(i), qkvi + d + h * hd, sizeof(T) * static_cast<size_t>(hd));
            std::memcpy(v.row(i), qkvi + 2 * d + h * hd, sizeof(T) * static_cast<size_t>(hd));
        }
        Mat<T>& p = bc.probs[static_cast<size_t>(h)];
        p = Mat<T>(seq, seq);
        mm_abt(q.row(0), k.row(0), p.row(0), seq, hd, seq);
        // causal softmax, double accumulation
        for (int i = 0; i < seq; ++i) {
            T* pi = p.row(i);
            double mx = -1e300;
            for (int j = 0; j <= i; ++j) {
                double s = static_cast<double>(pi[j]) * scale;
                if (s > mx) mx = s;
            }
            double denom = 0.0;
            std::vector<double> e(static_cast<size_t>(i + 1));
            for (int j = 0; j <= i; ++j) {
                e[static_cast<size_t>(j)] = std::exp(static_cast<double>(pi[j]) * scale - mx);
                denom += e[static_cast<size_t>(j)];
            }
            for (int j = 0; j <= i; ++j) pi[j] = static_cast<T>(e[static_cast<size_t>(j)] / denom);
            for (int j = i + 1; j < seq; ++j) pi[j] = T(0);
        }
        // ctx = probs @ v -> columns h*hd..(h+1)*hd of att_ctx
        Mat<T> ctx(seq, hd);
        mm_nn(p.row(0), v.row(0), ctx.row(0), seq, seq, hd);
        for (int i = 0; i < seq; ++i)
            std::memcpy(bc.att_ctx.row(i) + h * hd, ctx.row(i), sizeof(T) * static_cast<size_t>(hd));
    }
}

template <typename T>
void net_forward(const WeightsT<T>& w, const ModelConfig& cfg, const std::vector<TokenId>& tokens,
                 const HookIndex& hooks, ActivationRecord* rec, RunCache<T>& rc, bool all_logits) {
    int seq = static_cast<int>(tokens.size());
    if (seq == 0) fail_schema("forward: empty token sequence");
    if (seq > cfg.max_seq_len)
        fail_schema("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len");
    for (TokenId t : tokens)
        if (t < 0 || t >= cfg.vocab_size) fail_schema("forward: token id out of range");

    int d = cfg.d_model;
    rc.seq = seq;
    rc.x0 = Mat<T>(seq, d);
    for (int i = 0; i < seq; ++i) {
        const T* te = w.tok_emb.row(tokens[static_cast<size_t>(i)]);
        const T* pe = w.pos_emb.row(i);
        T* xi = rc.x0.row(i);
        for (int j = 0; j < d; ++j) xi[j] = te[j] + pe[j];
    }

    rc.blocks.assign(static_cast<size_t>(cfg.n_layers), BlockCache<T>());
    Mat<T>* x = &rc.x0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        BlockCache<T>& bc = rc.blocks[static_cast<size_t>(l)];
        const BlockWeights<T>& bw = w.blocks[static_cast<size_t>(l)];
        bc.x_in = *x;
        bc.ln1_out = Mat<T>(seq, d);
        layer_norm(bc.x_in, bw.ln1_g, bw.ln1_b, cfg.norm_eps, bc.ln1_out, bc.ln1_stats);
        attention_forward(bw, cfg, bc, seq);
        bc.mha_out = Mat<T>(seq, d);
        mm_nn(bc.att_ctx.row(0), bw.w_o.row(0), bc.mha_out.row(0), seq, d, d);
        add_bias(bc.mha_out, bw.b_o);
        apply_site_hooks(bc.mha_out, Site::mha_out, l, hooks, seq, d, rec);

        bc.x_mid = Mat<T>(seq, d);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j < d; ++j) bc.x_mid.at(i, j) = bc.x_in.at(i, j) + bc.mha_out.at(i, j);

        bc.ln2_out = Mat<T>(seq, d);
        layer_norm(bc.x_mid, bw.ln2_g, bw.ln2_b, cfg.norm_eps, bc.ln2_out, bc.ln2_stats);
        bc.mlp_pre = Mat<T>(seq, cfg.d_mlp);
        mm_nn(bc.ln2_out.row(0), bw.w_up.row(0), bc.mlp_pre.row(0), seq, d, cfg.d_mlp);
        add_bias(bc.mlp_pre, bw.b_up);
        bc.mlp_act = Mat<T>(seq, cfg.d_mlp);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j < cfg.d_mlp; ++j) bc.mlp_act.at(i, j) = gelu(bc.mlp_pre.at(i, j));
        bc.mlp_out = Mat<T>(seq, d);
        mm_nn(bc.mlp_act.row(0), bw.w_down.row(0), bc.mlp_out.row(0), seq, cfg.d_mlp, d);
        add_bias(bc.mlp_out, bw.b_down);
        apply_site_hooks(bc.mlp_out, Site::mlp_out, l, hooks, seq, d, rec);

        bc.x_out = Mat<T>(seq, d);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j < d; ++j) bc.x_out.at(i, j) = bc.x_mid.at(i, j) + bc.mlp_out.at(i, j);
        apply_site_hooks(bc.x_out, Site::resid_post, l, hooks, seq, d, rec);
        x = &bc.x_out;
    }

    rc.lnf_in = *x;
    rc.lnf_out = Mat<T>(seq, d);
    layer_norm(rc.lnf_in, w.lnf_g, w.lnf_b, cfg.norm_eps, rc.lnf_out, rc.lnf_stats);

    if (all_logits) {
        rc.logits = Mat<T>(seq, cfg.vocab_size);
        mm_nn(rc.lnf_out.row(0), w.w_un.row(0), rc.logits.row(0), seq, d, cfg.vocab_size);
        add_bias(rc.logits, w.b_un);
        rc.logit_rows.resize(static_cast<size_t>(seq));
        for (int i = 0; i < seq; ++i) rc.logit_rows[static_cast<size_t>(i)] = i;
    } else {
        rc.logits = Mat<T>(1, cfg.vocab_size);
        mm_nn(rc.lnf_out.row(seq - 1), w.w_un.row(0), rc.logits.row(0), 1, d, cfg.vocab_size);
        for (int j = 0; j < cfg.vocab_size; ++j) rc.logits.at(0, j) += w.b_un[static_cast<size_t>(j)];
        rc.logit_rows = {seq - 1};
    }
}

void validate_hooks(const std::vector<HookSpec>& hooks, const ModelConfig& cfg) {
    for (const auto& h : hooks) {
        for (int l : h.layers)
            if (l < 0 || l >= cfg.n_layers) fail_schema("hook layer out of range");
        if (h.action == HookSpec::Action::replace) {
            if (h.vectors.size() != h.layers.size())
                fail_schema("replace hook needs one vector per layer");
            for (const auto& v : h.vectors)
                if (static_cast<int>(v.size()) != cfg.d_model)
                    fail_schema("replace vector of wrong length");
        }
        if (h.action == HookSpec::Action::subspace_replace &&
            static_cast<int>(h.direction.size()) != cfg.d_model)
            fail_schema("subspace direction of wrong length");
    }
}

}  // namespace

ForwardResult forward(const TinyModel& model, const std::vector<TokenId>& tokens,
                      const std::vector<HookSpec>& hooks) {
    validate_hooks(hooks, model.config);
    HookIndex idx{&hooks, model.config.n_layers};
    ForwardResult out;
    RunCache<float> rc;
    net_forward(model.weights, model.config, tokens, idx, &out.record, rc, false);
    out.logits.assign(rc.logits.row(0), rc.logits.row(0) + model.config.vocab_size);
    out.record.final_logits = out.logits;
    return out;
}

Mat<float> forward_all_logits(const TinyModel& model, const std::vector<TokenId>& tokens) {
    HookIndex idx{nullptr, model.config.n_layers};
    RunCache<float> rc;
    net_forward(model.weights, model.config, tokens, idx, nullptr, rc, true);
    return rc.logits;
}

std::vector<TokenId> greedy_decode(const TinyModel& model, const std::vector<TokenId>& prompt,
                                   int max_new) {
    std::vector<TokenId> seq = prompt;
    std::vector<TokenId> out;
    for (int i = 0; i < max_new; ++i) {
        auto res = forward(model, seq);
        int best = 0;
        for (int j = 1; j < model.config.vocab_size; ++j)
            if (res.logits[static_cast<size_t>(j)] > res.logits[static_cast<size_t>(best)]) best = j;
        out.push_back(best);
        if (static_cast<int>(seq.size()) >= model.config.max_seq_len) break;
        seq.push_back(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tail runs
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct TailCacheT {
    int prefix_len = 0;
    std::vector<Mat<T>> k, v;  // per layer, prefix_len x D (head-major columns)
};

// K/V rows for every prefix position at every layer, computed by a plain
// prefix forward.
template <typename T>
TailCacheT<T> build_tail_cache_t(const WeightsT<T>& w, const ModelConfig& cfg,
                                 const std::vector<TokenId>& prefix) {
    if (prefix.empty()) fail_schema("tail cache needs a non-empty prefix");
    HookIndex idx{nullptr, cfg.n_layers};
    RunCache<T> rc;
    net_forward(w, cfg, prefix, idx, nullptr, rc, false);
    TailCacheT<T> tc;
    int seq = static_cast<int>(prefix.size());
    int d = cfg.d_model, hd = cfg.head_dim(), H = cfg.n_heads;
    tc.prefix_len = seq;
    tc.k.assign(static_cast<size_t>(cfg.n_layers), Mat<T>());
    tc.v.assign(static_cast<size_t>(cfg.n_layers), Mat<T>());
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& bc = rc.blocks[static_cast<size_t>(l)];
        Mat<T>&k = tc.k[static_cast<size_t>(l)], &v = tc.v[static_cast<size_t>(l)];
        k = Mat<T>(seq, d);
        v = Mat<T>(seq, d);
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < seq; ++i) {
                std::memcpy(k.row(i) + h * hd, bc.kh[static_cast<size_t>(h)].row(i),
                            sizeof(T) * static_cast<size_t>(hd));
                std::memcpy(v.row(i) + h * hd, bc.vh[static_cast<size_t>(h)].row(i),
                            sizeof(T) * static_cast<size_t>(hd));
            }
    }
    return tc;
}

// Per-layer cache of the single tail position (needed by the backward pass).
template <typename T>
struct TailStep {
    std::vector<T> x_in, ln1_out, q, k, v, ctx, mha_out, x_mid, ln2_out, mlp_pre, mlp_act, mlp_out,
        x_out;
    std::vector<std::vector<double>> probs;  // per head, prefix_len + 1
    double ln1_mu = 0, ln1_rstd = 0, ln2_mu = 0, ln2_rstd = 0;
};

template <typename T>
struct TailRun {
    std::vector<TailStep<T>> steps;
    std::vector<T> lnf_out, logits;
    double lnf_mu = 0, lnf_rstd = 0;
};

template <typename T>
void vec_layer_norm(const std::vector<T>& x, const std::vector<T>& g, const std::vector<T>& b,
                    double eps, std::vector<T>& out, double& mu_out, double& rstd_out) {
    int d = static_cast<int>(x.size());
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += static_cast<double>(x[static_cast<size_t>(j)]);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        double dv = static_cast<double>(x[static_cast<size_t>(j)]) - mu;
        var += dv * dv;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + eps);
    out.resize(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        out[static_cast<size_t>(j)] =
            static_cast<T>((static_cast<double>(x[static_cast<size_t>(j)]) - mu) * rstd *
                               static_cast<double>(g[static_cast<size_t>(j)]) +
                           static_cast<double>(b[static_cast<size_t>(j)]));
    mu_out = mu;
    rstd_out = rstd;
}

template <typename T>
void tail_forward(const WeightsT<T>& w, const ModelConfig& cfg, const TailCacheT<T>& tc,
                  TokenId token, int override_layer, const std::vector<T>* override_h,
                  const std::vector<T>* subspace_u, double subspace_value, TailRun<T>& run,
                  Mat<T>* resid_out) {
    int d = cfg.d_model, hd = cfg.head_dim(), H = cfg.n_heads, P = tc.prefix_len;
    if (P + 1 > cfg.max_seq_len) fail_schema("tail position exceeds max_seq_len");
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<T> x(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        x[static_cast<size_t>(j)] = w.tok_emb.at(token, j) + w.pos_emb.at(P, j);

    run.steps.assign(static_cast<size_t>(cfg.n_layers), TailStep<T>());
    for (int l = 0; l < cfg.n_layers; ++l) {
        TailStep<T>& st = run.steps[static_cast<size_t>(l)];
        const BlockWeights<T>& bw = w.blocks[static_cast<size_t>(l)];
        st.x_in = x;
        vec_layer_norm(st.x_in, bw.ln1_g, bw.ln1_b, cfg.norm_eps, st.ln1_out, st.ln1_mu,
                       st.ln1_rstd);
        // qkv for the single position
        std::vector<T> qkv(static_cast<size_t>(3 * d));
        mm_nn(st.ln1_out.data(), bw.w_qkv.row(0), qkv.data(), 1, d, 3 * d);
        for (int j = 0; j < 3 * d; ++j) qkv[static_cast<size_t>(j)] += bw.b_qkv[static_cast<size_t>(j)];
        st.q.assign(qkv.begin(), qkv.begin() + d);
        st.k.assign(qkv.begin() + d, qkv.begin() + 2 * d);
        st.v.assign(qkv.begin() + 2 * d, qkv.end());

        st.ctx.assign(static_cast<size_t>(d), T(0));
        st.probs.assign(static_cast<size_t>(H), std::vector<double>());
        const Mat<T>& kp = tc.k[static_cast<size_t>(l)];
        const Mat<T>& vp = tc.v[static_cast<size_t>(l)];
        for (int h = 0; h < H; ++h) {
            std::vector<double>& probs = st.probs[static_cast<size_t>(h)];
            probs.resize(static_cast<size_t>(P + 1));
            const T* qh = st.q.data() + h * hd;
            double mx = -1e300;
            for (int j = 0; j <= P; ++j) {
                const T* kj = j < P ? kp.row(j) + h * hd : st.k.data() + h * hd;
                // Raw scores round through T, matching the full forward's
                // score matrix; the tail must stay bitwise identical to it.
                double s = static_cast<double>(static_cast<T>(dot_d(qh, kj, hd))) * scale;
                probs[static_cast<size_t>(j)] = s;
                if (s > mx) mx = s;
            }
            double denom = 0.0;
            for (int j = 0; j <= P; ++j) {
                probs[static_cast<size_t>(j)] = std::exp(probs[static_cast<size_t>(j)] - mx);
                denom += probs[static_cast<size_t>(j)];
            }
            for (int j = 0; j <= P; ++j)
                probs[static_cast<size_t>(j)] =
                    static_cast<double>(static_cast<T>(probs[static_cast<size_t>(j)] / denom));
            T* ctx_h = st.ctx.data() + h * hd;
            for (int c = 0; c < hd; ++c) {
                double acc = 0.0;
                for (int j = 0; j <= P; ++j) {
                    const T* vj = j < P ? vp.row(j) + h * hd : st.v.data() + h * hd;
                    acc += probs[static_cast<size_t>(j)] * static_cast<double>(vj[c]);
                }
                ctx_h[c] = static_cast<T>(acc);
            }
        }
        st.mha_out.assign(static_cast<size_t>(d), T(0));
        mm_nn(st.ctx.data(), bw.w_o.row(0), st.mha_out.data(), 1, d, d);
        for (int j = 0; j < d; ++j) st.mha_out[static_cast<size_t>(j)] += bw.b_o[static_cast<size_t>(j)];
        st.x_mid.resize(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j)
            st.x_mid[static_cast<size_t>(j)] = st.x_in[static_cast<size_t>(j)] + st.mha_out[static_cast<size_t>(j)];
        vec_layer_norm(st.x_mid, bw.ln2_g, bw.ln2_b, cfg.norm_eps, st.ln2_out, st.ln2_mu,
                       st.ln2_rstd);
        st.mlp_pre.assign(static_cast<size_t>(cfg.d_mlp), T(0));
        mm_nn(st.ln2_out.data(), bw.w_up.row(0), st.mlp_pre.data(), 1, d, cfg.d_mlp);
        for (int j = 0; j < cfg.d_mlp; ++j)
            st.mlp_pre[static_cast<size_t>(j)] += bw.b_up[static_cast<size_t>(j)];
        st.mlp_act.resize(static_cast<size_t>(cfg.d_mlp));
        for (int j = 0; j < cfg.d_mlp; ++j)
            st.mlp_act[static_cast<size_t>(j)] = gelu(st.mlp_pre[static_cast<size_t>(j)]);
        st.mlp_out.assign(static_cast<size_t>(d), T(0));
        mm_nn(st.mlp_act.data(), bw.w_down.row(0), st.mlp_out.data(), 1, cfg.d_mlp, d);
        for (int j = 0; j < d; ++j) st.mlp_out[static_cast<size_t>(j)] += bw.b_down[static_cast<size_t>(j)];
        st.x_out.resize(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j)
            st.x_out[static_cast<size_t>(j)] = st.x_mid[static_cast<size_t>(j)] + st.mlp_out[static_cast<size_t>(j)];

        if (l == override_layer) {
            if (override_h) {
                st.x_out = *override_h;
            } else if (subspace_u) {
                double dot = 0.0;
                for (int j = 0; j < d; ++j)
                    dot += static_cast<double>((*subspace_u)[static_cast<size_t>(j)]) *
                           static_cast<double>(st.x_out[static_cast<size_t>(j)]);
                double delta = subspace_value - dot;
                for (int j = 0; j < d; ++j)
                    st.x_out[static_cast<size_t>(j)] = static_cast<T>(
                        static_cast<double>(st.x_out[static_cast<size_t>(j)]) +
                        static_cast<double>((*subspace_u)[static_cast<size_t>(j)]) * delta);
            }
        }
        if (resid_out)
            for (int j = 0; j < d; ++j) resid_out->at(l, j) = static_cast<float>(st.x_out[static_cast<size_t>(j)]);
        x = st.x_out;
    }
    vec_layer_norm(x, w.lnf_g, w.lnf_b, cfg.norm_eps, run.lnf_out, run.lnf_mu, run.lnf_rstd);
    run.logits.assign(static_cast<size_t>(cfg.vocab_size), T(0));
    mm_nn(run.lnf_out.data(), w.w_un.row(0), run.logits.data(), 1, d, cfg.vocab_size);
    for (int j = 0; j < cfg.vocab_size; ++j)
        run.logits[static_cast<size_t>(j)] += w.b_un[static_cast<size_t>(j)];
}

}  // namespace

TailCache build_tail_cache(const TinyModel& model, const std::vector<TokenId>& prefix) {
    auto tc = build_tail_cache_t(model.weights, model.config, prefix);
    TailCache out;
    out.prefix_len = tc.prefix_len;
    out.k = std::move(tc.k);
    out.v = std::move(tc.v);
    return out;
}

std::vector<float> run_tail(const TinyModel& model, const TailCache& cache, TokenId token,
                            const ResidOverride& ov, Mat<float>* resid_out) {
    TailCacheT<float> tc;
    tc.prefix_len = cache.prefix_len;
    tc.k = cache.k;
    tc.v = cache.v;
    if (resid_out) *resid_out = Mat<float>(model.config.n_layers, model.config.d_model);
    TailRun<float> run;
    const std::vector<float>* h = nullptr;
    const std::vector<float>* u = nullptr;
    if (ov.layer >= 0) {
        if (ov.layer >= model.config.n_layers) fail_schema("override layer out of range");
        if (ov.kind == ResidOverride::Kind::replace)
            h = &ov.h;
        else
            u = &ov.direction;
    }
    tail_forward(model.weights, model.config, tc, token, ov.layer, h, u,
                 static_cast<double>(ov.value), run, resid_out);
    return std::vector<float>(run.logits.begin(), run.logits.end());
}

// ---------------------------------------------------------------------------
// Backward (templated; used by training in float and checks in double)
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void layer_norm_backward(const Mat<T>& x, const std::vector<T>& g, const LnStats& stats,
                         const Mat<T>& dy, Mat<T>& dx_add, std::vector<double>* dg,
                         std::vector<double>* db, double /*eps*/) {
    int rows = x.rows, d = x.cols;
    for (int i = 0; i < rows; ++i) {
        const T* xi = x.row(i);
        const T* dyi = dy.row(i);
        T* dxi = dx_add.row(i);
        double mu = stats.mu[static_cast<size_t>(i)], rstd = stats.rstd[static_cast<size_t>(i)];
        double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
            double xhat = (static_cast<double>(xi[j]) - mu) * rstd;
            double dyg = static_cast<double>(dyi[j]) * static_cast<double>(g[static_cast<size_t>(j)]);
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
            if (dg) (*dg)[static_cast<size_t>(j)] += static_cast<double>(dyi[j]) * xhat;
            if (db) (*db)[static_cast<size_t>(j)] += static_cast<double>(dyi[j]);
        }
        for (int j = 0; j < d; ++j) {
            double xhat = (static_cast<double>(xi[j]) - mu) * rstd;
            double dyg = static_cast<double>(dyi[j]) * static_cast<double>(g[static_cast<size_t>(j)]);
            double v = rstd * (dyg - sum_dyg / d - xhat * sum_dyg_xhat / d);
            dxi[j] = static_cast<T>(static_cast<double>(dxi[j]) + v);
        }
    }
}

// Gradient mirror of WeightsT (always double).
using Grads = WeightsT<double>;

template <typename T>
void net_backward(const WeightsT<T>& w, const ModelConfig& cfg, const RunCache<T>& rc,
                  const std::vector<TokenId>& tokens, const Mat<T>& dlogits, Grads& g,
                  Mat<T>* dresid_at_layer = nullptr, int resid_layer = -1) {
    int seq = rc.seq, d = cfg.d_model, hd = cfg.head_dim(), H = cfg.n_heads, m = cfg.d_mlp;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // unembed
    Mat<T> dlnf(seq, d);
    mm_abt(dlogits.row(0), w.w_un.row(0), dlnf.row(0), seq, cfg.vocab_size, d);
    mm_atb_acc(rc.lnf_out.row(0), dlogits.row(0), g.w_un.row(0), seq, d, cfg.vocab_size);
    for (int i = 0; i < seq; ++i)
        for (int j = 0; j < cfg.vocab_size; ++j)
            g.b_un[static_cast<size_t>(j)] += static_cast<double>(dlogits.at(i, j));

    Mat<T> dx(seq, d);
    dx.zero();
    {
        std::vector<double> dg(static_cast<size_t>(d), 0.0), db(static_cast<size_t>(d), 0.0);
        layer_norm_backward(rc.lnf_in, w.lnf_g, rc.lnf_stats, dlnf, dx, &dg, &db, cfg.norm_eps);
        for (int j = 0; j < d; ++j) {
            g.lnf_g[static_cast<size_t>(j)] += dg[static_cast<size_t>(j)];
            g.lnf_b[static_cast<size_t>(j)] += db[static_cast<size_t>(j)];
        }
    }

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const BlockCache<T>& bc = rc.blocks[static_cast<size_t>(l)];
        const BlockWeights<T>& bw = w.blocks[static_cast<size_t>(l)];
        BlockWeights<double>& bg = g.blocks[static_cast<size_t>(l)];
        if (dresid_at_layer && l == resid_layer) *dresid_at_layer = dx;

        // x_out = x_mid + mlp_out
        Mat<T> dmlp_out = dx;  // alias semantics: same values
        // mlp_out = mlp_act @ w_down + b_down
        Mat<T> dmlp_act(seq, m);
        mm_abt(dmlp_out.row(0), bw.w_down.row(0), dmlp_act.row(0), seq, d, m);
        mm_atb_acc(bc.mlp_act.row(0), dmlp_out.row(0), bg.w_down.row(0), seq, m, d);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j < d; ++j)
                bg.b_down[static_cast<size_t>(j)] += static_cast<double>(dmlp_out.at(i, j));
        // gelu
        Mat<T> dmlp_pre(seq, m);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j < m; ++j)
                dmlp_pre.at(i, j) = static_cast<T>(static_cast<double>(dmlp_act.at(i, j)) *
                                                   gelu_grad(static_cast<double>(bc.mlp_pre.at(i, j))));
        // mlp_pre = ln2_out @ w_up + b_up
        Mat<T> dln2(seq, d);
        mm_abt(dmlp_pre.row(0), bw.w_up.row(0), dln2.row(0), seq, m, d);
        mm_atb_acc(bc.ln2_out.row(0), dmlp_pre.row(0), bg.w_up.row(0), seq, d, m);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j < m; ++j)
                bg.b_up[static_cast<size_t>(j)] += static_cast<double>(dmlp_pre.at(i, j));
        // ln2: dx_mid = dx (residual) + ln2 backward
        Mat<T> dx_mid = dx;
        {
            std::vector<double> dg(static_cast<size_t>(d), 0.0), db(static_cast<size_t>(d), 0.0);
            layer_norm_backward(bc.x_mid, bw.ln2_g, bc.ln2_stats, dln2, dx_mid, &dg, &db,
                                cfg.norm_eps);
            for (int j = 0; j < d; ++j) {
                bg.ln2_g[static_cast<size_t>(j)] += dg[static_cast<size_t>(j)];
                bg.ln2_b[static_cast<size_t>(j)] += db[static_cast<size_t>(j)];
            }
        }

        // x_mid = x_in + mha_out
        Mat<T>& dmha = dx_mid;  // gradient w.r.t. mha_out equals dx_mid
        // mha_out = att_ctx @ w_o + b_o
        Mat<T> dctx(seq, d);
        mm_abt(dmha.row(0), bw.w_o.row(0), dctx.row(0), seq, d, d);
        mm_atb_acc(bc.att_ctx.row(0), dmha.row(0), bg.w_o.row(0), seq, d, d);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j < d; ++j)
                bg.b_o[static_cast<size_t>(j)] += static_cast<double>(dmha.at(i, j));

        Mat<T> dqkv(seq, 3 * d);
        dqkv.zero();
        for (int h = 0; h < H; ++h) {
            const Mat<T>&q = bc.qh[static_cast<size_t>(h)], &k = bc.kh[static_cast<size_t>(h)],
            &v = bc.vh[static_cast<size_t>(h)], &p = bc.probs[static_cast<size_t>(h)];
            // slice dctx for this head
            Mat<T> dctx_h(seq, hd);
            for (int i = 0; i < seq; ++i)
                std::memcpy(dctx_h.row(i), dctx.row(i) + h * hd, sizeof(T) * static_cast<size_t>(hd));
            // dprobs = dctx_h @ v^T
            Mat<T> dp(seq, seq);
            mm_abt(dctx_h.row(0), v.row(0), dp.row(0), seq, hd, seq);
            // dv = p^T @ dctx_h
            Mat<double> dv_d(seq, hd);
            dv_d.zero();
            mm_atb_acc(p.row(0), dctx_h.row(0), dv_d.row(0), seq, seq, hd);
            // softmax backward (causal rows)
            Mat<T> ds(seq, seq);
            ds.zero();
            for (int i = 0; i < seq; ++i) {
                double dot = 0.0;
                for (int j = 0; j <= i; ++j)
                    dot += static_cast<double>(dp.at(i, j)) * static_cast<double>(p.at(i, j));
                for (int j = 0; j <= i; ++j)
                    ds.at(i, j) = static_cast<T>(static_cast<double>(p.at(i, j)) *
                                                 (static_cast<double>(dp.at(i, j)) - dot) * scale);
            }
            // dq = ds @ k ; dk = ds^T @ q
            Mat<T> dq(seq, hd);
            mm_nn(ds.row(0), k.row(0), dq.row(0), seq, seq, hd);
            Mat<double> dk_d(seq, hd);
            dk_d.zero();
            mm_atb_acc(ds.row(0), q.row(0), dk_d.row(0), seq, seq, hd);
            for (int i = 0; i < seq; ++i) {
                T* r = dqkv.row(i);
                for (int c = 0; c < hd; ++c) {
                    r[h * hd + c] += dq.at(i, c);
                    r[d + h * hd + c] += static_cast<T>(dk_d.at(i, c));
                    r[2 * d + h * hd + c] += static_cast<T>(dv_d.at(i, c));
                }
            }
        }
        // qkv = ln1_out @ w_qkv + b_qkv
        Mat<T> dln1(seq, d);
        mm_abt(dqkv.row(0), bw.w_qkv.row(0), dln1.row(0), seq, 3 * d, d);
        mm_atb_acc(bc.ln1_out.row(0), dqkv.row(0), bg.w_qkv.row(0), seq, d, 3 * d);
        for (int i = 0; i < seq; ++i)
            for (int j = 0; j < 3 * d; ++j)
                bg.b_qkv[static_cast<size_t>(j)] += static_cast<double>(dqkv.at(i, j));

        Mat<T> dx_in = dx_mid;  // residual path
        {
            std::vector<double> dg(static_cast<size_t>(d), 0.0), db(static_cast<size_t>(d), 0.0);
            layer_norm_backward(bc.x_in, bw.ln1_g, bc.ln1_stats, dln1, dx_in, &dg, &db,
                                cfg.norm_eps);
            for (int j = 0; j < d; ++j) {
                bg.ln1_g[static_cast<size_t>(j)] += dg[static_cast<size_t>(j)];
                bg.ln1_b[static_cast<size_t>(j)] += db[static_cast<size_t>(j)];
            }
        }
        dx = std::move(dx_in);
    }

    // embeddings
    for (int i = 0; i < seq; ++i) {
        const T* dxi = dx.row(i);
        double* te = g.tok_emb.row(tokens[static_cast<size_t>(i)]);
        double* pe = g.pos_emb.row(i);
        for (int j = 0; j < d; ++j) {
            te[j] += static_cast<double>(dxi[j]);
            pe[j] += static_cast<double>(dxi[j]);
        }
    }
}

// lossature of one example: softmax CE summed over masked positions,
// dlogits written scaled by `scale`.
template <typename T>
double example_loss_backward(const WeightsT<T>& w, const ModelConfig& cfg,
                             const TrainExample& ex, double scale, Grads* g) {
    HookIndex idx{nullptr, cfg.n_layers};
    RunCache<T> rc;
    net_forward(w, cfg, ex.tokens, idx, nullptr, rc, true);
    int seq = rc.seq;
    Mat<T> dlogits(seq, cfg.vocab_size);
    dlogits.zero();
    double loss = 0.0;
    for (int i = std::max(0, ex.loss_from); i + 1 < seq; ++i) {
        TokenId target = ex.tokens[static_cast<size_t>(i + 1)];
        const T* row = rc.logits.row(i);
        double mx = -1e300;
        for (int j = 0; j < cfg.vocab_size; ++j)
            mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < cfg.vocab_size; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        double logprob = static_cast<double>(row[target]) - mx - std::log(denom);
        loss -= logprob;
        if (g) {
            T* dl = dlogits.row(i);
            for (int j = 0; j < cfg.vocab_size; ++j) {
                double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
                double delta = (j == target) ? p - 1.0 : p;
                dl[j] = static_cast<T>(delta * scale);
            }
        }
    }
    if (g) net_backward(w, cfg, rc, ex.tokens, dlogits, *g);
    return loss;
}

int target_count(const TrainExample& ex) {
    int n = static_cast<int>(ex.tokens.size()) - 1 - std::max(0, ex.loss_from);
    return std::max(n, 0);
}

void grads_add(Grads& a, const Grads& b) {
    auto pa = tensor_ptrs(a);
    auto pb = tensor_ptrs(const_cast<Grads&>(b));
    for (size_t i = 0; i < pa.size(); ++i)
        for (size_t j = 0; j < pa[i]->size(); ++j) (*pa[i])[j] += (*pb[i])[j];
}

void grads_zero(Grads& a) {
    auto pa = tensor_ptrs(a);
    for (auto* v : pa) std::fill(v->begin(), v->end(), 0.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainReport train(TinyModel& model, const std::vector<TrainExample>& corpus,
                  const TrainConfig& cfg) {
    if (corpus.empty()) fail_schema("train: empty corpus");
    if (cfg.batch_size <= 0 || cfg.learning_rate <= 0.0f || cfg.steps < 0)
        fail_schema("train: hyperparameters must be positive");
    for (const auto& ex : corpus)
        if (ex.tokens.size() < 2) fail_schema("train: example shorter than two tokens");

    TrainReport report;
    if (cfg.steps == 0) return report;

    Rng rng(cfg.seed, 113);
    // held-out split for the loss curve
    std::vector<int> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    int holdout_n = std::min<int>(static_cast<int>(corpus.size() * cfg.holdout_fraction),
                                  static_cast<int>(corpus.size()) / 2);
    std::vector<int> holdout(order.begin(), order.begin() + holdout_n);
    std::vector<int> train_idx(order.begin() + holdout_n, order.end());
    if (train_idx.empty()) fail_schema("train: corpus too small");

    constexpr int kChunks = 2;
    std::vector<Grads> chunk_grads;
    for (int c = 0; c < kChunks; ++c) chunk_grads.push_back(make_weights<double>(model.config));
    Grads moments_m = make_weights<double>(model.config);
    Grads moments_v = make_weights<double>(model.config);

    auto holdout_loss = [&]() {
        if (holdout.empty()) return 0.0;
        std::vector<double> losses(holdout.size(), 0.0);
        std::vector<int> counts(holdout.size(), 0);
        parallel_for(static_cast<int>(holdout.size()), [&](int i) {
            const TrainExample& ex = corpus[static_cast<size_t>(holdout[static_cast<size_t>(i)])];
            losses[static_cast<size_t>(i)] =
                example_loss_backward(model.weights, model.config, ex, 0.0, nullptr);
            counts[static_cast<size_t>(i)] = target_count(ex);
        });
        double total = 0.0;
        long n = 0;
        for (size_t i = 0; i < losses.size(); ++i) {
            total += losses[i];
            n += counts[i];
        }
        return n > 0 ? total / static_cast<double>(n) : 0.0;
    };

    auto maybe_snapshot = [&](int completed) {
        if (cfg.on_snapshot &&
            std::find(cfg.snapshot_steps.begin(), cfg.snapshot_steps.end(), completed) !=
                cfg.snapshot_steps.end())
            cfg.on_snapshot(completed, model);
    };
    maybe_snapshot(0);

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

    double beta1 = cfg.adam_beta1, beta2 = cfg.adam_beta2, adam_eps = 1e-8;
    for (int step = 0; step < cfg.steps; ++step) {
        // lr schedule: linear warmup then cosine decay
        double lr = cfg.learning_rate;
        if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
            lr *= static_cast<double>(step + 1) / cfg.warmup_steps;
        else if (cfg.cosine_decay && cfg.steps > cfg.warmup_steps) {
            double t = static_cast<double>(step - cfg.warmup_steps) /
                       std::max(1, cfg.steps - cfg.warmup_steps);
            double floor_frac = cfg.final_lr_fraction;
            lr *= floor_frac + (1.0 - floor_frac) * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
        }

        std::vector<int> batch(static_cast<size_t>(cfg.batch_size));
        long total_targets = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            batch[static_cast<size_t>(b)] = next_index();
            total_targets += target_count(corpus[static_cast<size_t>(batch[static_cast<size_t>(b)])]);
        }
        if (total_targets == 0) continue;
        double scale = 1.0 / static_cast<double>(total_targets);

        std::vector<double> chunk_loss(kChunks, 0.0);
        int per_chunk = (cfg.batch_size + kChunks - 1) / kChunks;
        parallel_for(kChunks, [&](int c) {
            grads_zero(chunk_grads[static_cast<size_t>(c)]);
            int lo = c * per_chunk, hi = std::min(cfg.batch_size, lo + per_chunk);
            for (int b = lo; b < hi; ++b) {
                const TrainExample& ex = corpus[static_cast<size_t>(batch[static_cast<size_t>(b)])];
                chunk_loss[static_cast<size_t>(c)] += example_loss_backward(
                    model.weights, model.config, ex, scale, &chunk_grads[static_cast<size_t>(c)]);
            }
        });
        {
            auto p0 = tensor_ptrs(chunk_grads[0]);
            std::vector<std::vector<double>*> others;
            for (int c = 1; c < kChunks; ++c)
                for (auto* v : tensor_ptrs(chunk_grads[static_cast<size_t>(c)])) others.push_back(v);
            int nt = static_cast<int>(p0.size());
            parallel_for(nt, [&](int t) {
                auto& dst = *p0[static_cast<size_t>(t)];
                for (int c = 1; c < kChunks; ++c) {
                    auto& src = *others[static_cast<size_t>((c - 1) * nt + t)];
                    for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                }
            });
        }
        double batch_loss = 0.0;
        for (int c = 0; c < kChunks; ++c) batch_loss += chunk_loss[static_cast<size_t>(c)];
        batch_loss /= static_cast<double>(total_targets);
        if (!std::isfinite(batch_loss))
            fail_numeric("training diverged (non-finite loss) at step " + std::to_string(step));

        // global-norm clip
        auto gp = tensor_ptrs(chunk_grads[0]);
        double norm_sq = 0.0;
        for (auto* v : gp)
            for (double x : *v) norm_sq += x * x;
        if (!std::isfinite(norm_sq))
            fail_numeric("training diverged (non-finite gradient) at step " + std::to_string(step));
        double clip_scale = 1.0;
        double norm = std::sqrt(norm_sq);
        if (cfg.grad_clip > 0 && norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;

        auto wp = tensor_ptrs(model.weights);
        auto mp = tensor_ptrs(moments_m);
        auto vp = tensor_ptrs(moments_v);
        double bc1 = 1.0 - std::pow(beta1, step + 1);
        double bc2 = 1.0 - std::pow(beta2, step + 1);
        parallel_for(static_cast<int>(wp.size()), [&](int t) {
            auto& wv = *wp[static_cast<size_t>(t)];
            auto& gv = *gp[static_cast<size_t>(t)];
            auto& mv = *mp[static_cast<size_t>(t)];
            auto& vv = *vp[static_cast<size_t>(t)];
            for (size_t j = 0; j < wv.size(); ++j) {
                double gj = gv[j] * clip_scale;
                if (cfg.optimizer == OptimizerKind::adam) {
                    mv[j] = beta1 * mv[j] + (1.0 - beta1) * gj;
                    vv[j] = beta2 * vv[j] + (1.0 - beta2) * gj * gj;
                    double mhat = mv[j] / bc1, vhat = vv[j] / bc2;
                    wv[j] = static_cast<float>(static_cast<double>(wv[j]) -
                                               lr * mhat / (std::sqrt(vhat) + adam_eps));
                } else {
                    wv[j] = static_cast<float>(static_cast<double>(wv[j]) - lr * gj);
                }
            }
        });

        report.train_loss.emplace_back(step, batch_loss);
        report.steps_run = step + 1;
        maybe_snapshot(step + 1);

        bool last = step + 1 == cfg.steps;
        if (cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last)) {
            report.holdout_loss.emplace_back(step + 1, holdout_loss());
            if (cfg.should_stop && cfg.should_stop(step + 1, model)) break;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

GradCheckResult gradient_check_params(const TinyModel& model,
                                      const std::vector<TrainExample>& samples, int probes,
                                      double step, uint64_t seed) {
    if (samples.empty()) fail_schema("gradient_check_params: no samples");
    WeightsT<double> w = model.weights_as_double();
    const ModelConfig& cfg = model.config;

    auto loss_of = [&](const WeightsT<double>& weights) {
        double total = 0.0;
        long n = 0;
        for (const auto& ex : samples) {
            total += example_loss_backward(weights, cfg, ex, 0.0, nullptr);
            n += target_count(ex);
        }
        return total / static_cast<double>(n);
    };

    // analytic grads
    Grads g = make_weights<double>(cfg);
    long total_targets = 0;
    for (const auto& ex : samples) total_targets += target_count(ex);
    for (const auto& ex : samples)
        example_loss_backward(w, cfg, ex, 1.0 / static_cast<double>(total_targets), &g);

    auto wp = tensor_ptrs(w);
    auto gp = tensor_ptrs(g);
    Rng rng(seed, 131);
    GradCheckResult res;
    res.probes = probes;
    for (int p = 0; p < probes; ++p) {
        size_t t = rng.below(static_cast<uint32_t>(wp.size()));
        size_t j = rng.below(static_cast<uint32_t>(wp[t]->size()));
        // Embedding rows for tokens absent from the samples carry zero
        // gradient; skip to probed tensors that participate.
        double analytic = (*gp[t])[j];
        double orig = (*wp[t])[j];
        (*wp[t])[j] = orig + step;
        double lp = loss_of(w);
        (*wp[t])[j] = orig - step;
        double lm = loss_of(w);
        (*wp[t])[j] = orig;
        double fd = (lp - lm) / (2.0 * step);
        double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
        double rel = std::abs(analytic - fd) / denom;
        if (std::abs(analytic) < 1e-12 && std::abs(fd) < 1e-10) rel = 0.0;
        res.max_rel_error = std::max(res.max_rel_error, rel);
    }
    return res;
}

namespace {

// Single-position layer-norm backward in double; adds into dx.
template <typename T>
void vec_ln_backward(const std::vector<T>& x, const std::vector<T>& g, double mu, double rstd,
                     const std::vector<double>& dy, std::vector<double>& dx_add) {
    int d = static_cast<int>(x.size());
    double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
        double xhat = (static_cast<double>(x[static_cast<size_t>(j)]) - mu) * rstd;
        double dyg = dy[static_cast<size_t>(j)] * static_cast<double>(g[static_cast<size_t>(j)]);
        sum_dyg += dyg;
        sum_dyg_xhat += dyg * xhat;
    }
    for (int j = 0; j < d; ++j) {
        double xhat = (static_cast<double>(x[static_cast<size_t>(j)]) - mu) * rstd;
        double dyg = dy[static_cast<size_t>(j)] * static_cast<double>(g[static_cast<size_t>(j)]);
        dx_add[static_cast<size_t>(j)] += rstd * (dyg - sum_dyg / d - xhat * sum_dyg_xhat / d);
    }
}

// d(loss)/d(residual at override layer) given dlogits at the tail position.
// Layers at or below the override contribute nothing (the override replaced
// their output).
template <typename T>
std::vector<double> tail_backward(const WeightsT<T>& w, const ModelConfig& cfg,
                                  const TailCacheT<T>& tc, const TailRun<T>& run,
                                  int override_layer, const std::vector<double>& dlogits) {
    int d = cfg.d_model, hd = cfg.head_dim(), H = cfg.n_heads, P = tc.prefix_len, m = cfg.d_mlp;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> dlnf(static_cast<size_t>(d), 0.0);
    mm_abt(dlogits.data(), w.w_un.row(0), dlnf.data(), 1, cfg.vocab_size, d);
    std::vector<double> dx(static_cast<size_t>(d), 0.0);
    vec_ln_backward(run.steps.back().x_out, w.lnf_g, run.lnf_mu, run.lnf_rstd, dlnf, dx);

    for (int l = cfg.n_layers - 1; l > override_layer; --l) {
        const TailStep<T>& st = run.steps[static_cast<size_t>(l)];
        const BlockWeights<T>& bw = w.blocks[static_cast<size_t>(l)];
        // x_out = x_mid + mlp_out; mlp_out = gelu(ln2 @ w_up) @ w_down
        std::vector<double> dmlp_act(static_cast<size_t>(m), 0.0);
        mm_abt(dx.data(), bw.w_down.row(0), dmlp_act.data(), 1, d, m);
        std::vector<double> dmlp_pre(static_cast<size_t>(m));
        for (int j = 0; j < m; ++j)
            dmlp_pre[static_cast<size_t>(j)] =
                dmlp_act[static_cast<size_t>(j)] *
                gelu_grad(static_cast<double>(st.mlp_pre[static_cast<size_t>(j)]));
        std::vector<double> dln2(static_cast<size_t>(d), 0.0);
        mm_abt(dmlp_pre.data(), bw.w_up.row(0), dln2.data(), 1, m, d);
        std::vector<double> dx_mid = dx;
        vec_ln_backward(st.x_mid, bw.ln2_g, st.ln2_mu, st.ln2_rstd, dln2, dx_mid);

        // mha backward; prefix K/V are constants, only the own position's
        // q/k/v receive gradient.
        std::vector<double> dctx(static_cast<size_t>(d), 0.0);
        mm_abt(dx_mid.data(), bw.w_o.row(0), dctx.data(), 1, d, d);
        std::vector<double> dqkv(static_cast<size_t>(3 * d), 0.0);
        const Mat<T>& kp = tc.k[static_cast<size_t>(l)];
        const Mat<T>& vp = tc.v[static_cast<size_t>(l)];
        for (int h = 0; h < H; ++h) {
            const std::vector<double>& probs = st.probs[static_cast<size_t>(h)];
            const double* dctx_h = dctx.data() + h * hd;
            std::vector<double> dp(static_cast<size_t>(P + 1));
            for (int j = 0; j <= P; ++j) {
                const T* vj = j < P ? vp.row(j) + h * hd : st.v.data() + h * hd;
                double s = 0.0;
                for (int c = 0; c < hd; ++c) s += dctx_h[c] * static_cast<double>(vj[c]);
                dp[static_cast<size_t>(j)] = s;
            }
            double dot = 0.0;
            for (int j = 0; j <= P; ++j)
                dot += dp[static_cast<size_t>(j)] * probs[static_cast<size_t>(j)];
            for (int j = 0; j <= P; ++j) {
                double ds = probs[static_cast<size_t>(j)] * (dp[static_cast<size_t>(j)] - dot) * scale;
                const T* kj = j < P ? kp.row(j) + h * hd : st.k.data() + h * hd;
                for (int c = 0; c < hd; ++c)
                    dqkv[static_cast<size_t>(h * hd + c)] += ds * static_cast<double>(kj[c]);
                if (j == P) {
                    const T* qh = st.q.data() + h * hd;
                    for (int c = 0; c < hd; ++c)
                        dqkv[static_cast<size_t>(d + h * hd + c)] += ds * static_cast<double>(qh[c]);
                }
            }
            for (int c = 0; c < hd; ++c)
                dqkv[static_cast<size_t>(2 * d + h * hd + c)] +=
                    probs[static_cast<size_t>(P)] * dctx_h[c];
        }
        std::vector<double> dln1(static_cast<size_t>(d), 0.0);
        mm_abt(dqkv.data(), bw.w_qkv.row(0), dln1.data(), 1, 3 * d, d);
        std::vector<double> dx_in = dx_mid;
        vec_ln_backward(st.x_in, bw.ln1_g, st.ln1_mu, st.ln1_rstd, dln1, dx_in);
        dx = std::move(dx_in);
    }
    return dx;
}

template <typename T>
void ce_loss_dlogits(const std::vector<T>& logits, TokenId answer, double& loss,
                     std::vector<double>& dlogits) {
    double mx = -1e300;
    for (T x : logits) mx = std::max(mx, static_cast<double>(x));
    double denom = 0.0;
    for (T x : logits) denom += std::exp(static_cast<double>(x) - mx);
    loss = -(static_cast<double>(logits[static_cast<size_t>(answer)]) - mx - std::log(denom));
    dlogits.resize(logits.size());
    for (size_t j = 0; j < logits.size(); ++j) {
        double p = std::exp(static_cast<double>(logits[j]) - mx) / denom;
        dlogits[j] = p - (static_cast<int>(j) == answer ? 1.0 : 0.0);
    }
}

}  // namespace

SubspacePairGrad subspace_pair_grad(const WeightsT<double>& w, const ModelConfig& cfg,
                                    const std::vector<TokenId>& source_prompt,
                                    const std::vector<TokenId>& target_prompt,
                                    TokenId source_answer, const std::vector<double>& u,
                                    int layer) {
    if (static_cast<int>(u.size()) != cfg.d_model) fail_schema("subspace u has wrong length");
    if (layer < 0 || layer >= cfg.n_layers) fail_schema("subspace layer out of range");
    int d = cfg.d_model;

    HookIndex no_hooks{nullptr, cfg.n_layers};
    RunCache<double> rc_s, rc_t;
    net_forward(w, cfg, source_prompt, no_hooks, nullptr, rc_s, false);
    net_forward(w, cfg, target_prompt, no_hooks, nullptr, rc_t, false);
    const Mat<double>& hs_m = rc_s.blocks[static_cast<size_t>(layer)].x_out;
    const Mat<double>& ht_m = rc_t.blocks[static_cast<size_t>(layer)].x_out;
    std::vector<double> h_s(hs_m.row(hs_m.rows - 1), hs_m.row(hs_m.rows - 1) + d);
    std::vector<double> h_t(ht_m.row(ht_m.rows - 1), ht_m.row(ht_m.rows - 1) + d);

    std::vector<double> diff(static_cast<size_t>(d));
    double u_dot_diff = 0.0;
    for (int j = 0; j < d; ++j) {
        diff[static_cast<size_t>(j)] = h_s[static_cast<size_t>(j)] - h_t[static_cast<size_t>(j)];
        u_dot_diff += u[static_cast<size_t>(j)] * diff[static_cast<size_t>(j)];
    }
    std::vector<double> h_tilde(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        h_tilde[static_cast<size_t>(j)] =
            h_t[static_cast<size_t>(j)] + u[static_cast<size_t>(j)] * u_dot_diff;

    std::vector<TokenId> prefix(target_prompt.begin(), target_prompt.end() - 1);
    auto tc = build_tail_cache_t(w, cfg, prefix);
    TailRun<double> run;
    tail_forward<double>(w, cfg, tc, target_prompt.back(), layer, &h_tilde, nullptr, 0.0, run,
                         nullptr);

    double loss = 0.0;
    std::vector<double> dlogits;
    ce_loss_dlogits(run.logits, source_answer, loss, dlogits);
    std::vector<double> g = tail_backward(w, cfg, tc, run, layer, dlogits);

    // chain rule: h_tilde = h_t + u (u . diff)
    SubspacePairGrad out;
    out.loss = loss;
    out.grad_u.assign(static_cast<size_t>(d), 0.0);
    double g_dot_u = 0.0;
    for (int j = 0; j < d; ++j) g_dot_u += g[static_cast<size_t>(j)] * u[static_cast<size_t>(j)];
    for (int j = 0; j < d; ++j)
        out.grad_u[static_cast<size_t>(j)] =
            g[static_cast<size_t>(j)] * u_dot_diff + g_dot_u * diff[static_cast<size_t>(j)];
    return out;
}

TailGrad run_tail_grad(const TinyModel& model, const TailCache& cache, TokenId token, int layer,
                       const std::vector<double>& h_tilde, TokenId answer) {
    const ModelConfig& cfg = model.config;
    if (layer < 0 || layer >= cfg.n_layers) fail_schema("override layer out of range");
    TailCacheT<float> tc;
    tc.prefix_len = cache.prefix_len;
    tc.k = cache.k;
    tc.v = cache.v;
    std::vector<float> hf(h_tilde.begin(), h_tilde.end());
    TailRun<float> run;
    tail_forward<float>(model.weights, cfg, tc, token, layer, &hf, nullptr, 0.0, run, nullptr);
    TailGrad out;
    std::vector<double> dlogits;
    ce_loss_dlogits(run.logits, answer, out.loss, dlogits);
    out.grad = tail_backward(model.weights, cfg, tc, run, layer, dlogits);
    return out;
}

GradCheckResult gradient_check_subspace(const TinyModel& model,
                                        const std::vector<TokenId>& source_prompt,
                                        const std::vector<TokenId>& target_prompt,
                                        TokenId source_answer, const std::vector<float>& u,
                                        int layer, int probes, double step, uint64_t seed) {
    WeightsT<double> w = model.weights_as_double();
    const ModelConfig& cfg = model.config;
    std::vector<double> ud(u.begin(), u.end());

    auto loss_at = [&](const std::vector<double>& uu) {
        return subspace_pair_grad(w, cfg, source_prompt, target_prompt, source_answer, uu, layer)
            .loss;
    };
    SubspacePairGrad an = subspace_pair_grad(w, cfg, source_prompt, target_prompt, source_answer,
                                             ud, layer);

    Rng rng(seed, 137);
    GradCheckResult res;
    res.probes = probes;
    int d = cfg.d_model;
    for (int p = 0; p < probes; ++p) {
        std::vector<double> dir(static_cast<size_t>(d));
        double norm = 0.0;
        for (int j = 0; j < d; ++j) {
            dir[static_cast<size_t>(j)] = rng.normal();
            norm += dir[static_cast<size_t>(j)] * dir[static_cast<size_t>(j)];
        }
        norm = std::sqrt(norm);
        for (int j = 0; j < d; ++j) dir[static_cast<size_t>(j)] /= norm;
        std::vector<double> up = ud, um = ud;
        for (int j = 0; j < d; ++j) {
            up[static_cast<size_t>(j)] += step * dir[static_cast<size_t>(j)];
            um[static_cast<size_t>(j)] -= step * dir[static_cast<size_t>(j)];
        }
        double fd = (loss_at(up) - loss_at(um)) / (2.0 * step);
        double analytic = 0.0;
        for (int j = 0; j < d; ++j)
            analytic += an.grad_u[static_cast<size_t>(j)] * dir[static_cast<size_t>(j)];
        double denom = std::max({std::abs(analytic), std::abs(fd), 1e-10});
        double rel = std::abs(analytic - fd) / denom;
        if (std::abs(analytic) < 1e-12 && std::abs(fd) < 1e-10) rel = 0.0;
        res.max_rel_error = std::max(res.max_rel_error, rel);
    }
    return res;
}

}  // namespace ccs
