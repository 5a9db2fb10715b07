#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ccs/data.hpp"
#include "ccs/tensor.hpp"
#include "ccs/tokenizer.hpp"

namespace ccs {

struct ModelConfig {
    int n_layers = 8;
    int d_model = 128;
    int n_heads = 4;
    int d_mlp = 512;
    int vocab_size = 2500;
    int max_seq_len = 128;
    float norm_eps = 1e-5f;
    uint64_t seed = 1234;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

enum class Site { mha_out, mlp_out, resid_post };
const char* to_string(Site s);

// Declarative description of one intervention or recording during a forward
// pass. Layer order is the execution order; within a layer the MHA hook
// fires before the MLP reads the residual.
struct HookSpec {
    enum class Action { record, replace, subspace_replace };

    Site site = Site::mha_out;
    Action action = Action::record;
    std::vector<int> layers;
    std::vector<int> positions;  // empty = last position only

    // replace: vectors[i] substitutes the site output at layers[i].
    std::vector<std::vector<float>> vectors;

    // subspace_replace (RESID_POST only): h <- h - u (u.h) + u * value.
    std::vector<float> direction;
    float value = 0.0f;

    static HookSpec record_at(Site site, std::vector<int> layers);
    static HookSpec replace_at(Site site, std::vector<int> layers,
                               std::vector<std::vector<float>> vectors);
    static HookSpec subspace_at(int layer, std::vector<float> u, float value);
};

struct ActKey {
    Site site;
    int layer;
    int position;
    bool operator<(const ActKey& o) const {
        if (site != o.site) return site < o.site;
        if (layer != o.layer) return layer < o.layer;
        return position < o.position;
    }
};

struct ActivationRecord {
    std::map<ActKey, std::vector<float>> values;
    std::vector<float> final_logits;

    const std::vector<float>& at(Site site, int layer, int position) const;
};

// ---------------------------------------------------------------------------
// Weights. Scalar type is templated so verification can run the whole network
// in double precision; training and inference use float with every reduction
// accumulated in double.
// ---------------------------------------------------------------------------

template <typename T>
struct BlockWeights {
    Mat<T> w_qkv;  // D x 3D
    std::vector<T> b_qkv;
    Mat<T> w_o;  // D x D
    std::vector<T> b_o;
    std::vector<T> ln1_g, ln1_b, ln2_g, ln2_b;
    Mat<T> w_up;  // D x M
    std::vector<T> b_up;
    Mat<T> w_down;  // M x D
    std::vector<T> b_down;
};

template <typename T>
struct WeightsT {
    Mat<T> tok_emb;  // V x D
    Mat<T> pos_emb;  // P x D
    std::vector<BlockWeights<T>> blocks;
    std::vector<T> lnf_g, lnf_b;
    Mat<T> w_un;  // D x V
    std::vector<T> b_un;
};

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    float* data;
    const float* cdata;
    size_t size;
};

struct TinyModel {
    ModelConfig config;
    Tokenizer tokenizer;
    WeightsT<float> weights;

    static TinyModel init(const ModelConfig& cfg, Tokenizer tok);
    std::vector<NamedTensor> named_tensors();
    std::vector<NamedTensor> named_tensors() const;
    WeightsT<double> weights_as_double() const;
    bool finite() const;
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardResult {
    std::vector<float> logits;  // final position, size V
    ActivationRecord record;
};

ForwardResult forward(const TinyModel& model, const std::vector<TokenId>& tokens,
                      const std::vector<HookSpec>& hooks = {});

// Full-sequence logits (seq x V); used by training and tests.
Mat<float> forward_all_logits(const TinyModel& model, const std::vector<TokenId>& tokens);

std::vector<TokenId> greedy_decode(const TinyModel& model, const std::vector<TokenId>& prompt,
                                   int max_new);

// ---------------------------------------------------------------------------
// Prefix-cached single-position runs. A TailCache holds the per-layer K/V of
// a fixed prompt prefix; run_tail pushes one final-position token through the
// network, optionally replacing the residual after a given layer. Bitwise
// identical to the hooked full forward over [prefix, token].
// ---------------------------------------------------------------------------

struct TailCache {
    int prefix_len = 0;
    std::vector<Mat<float>> k;  // per layer: prefix_len x D
    std::vector<Mat<float>> v;
};

TailCache build_tail_cache(const TinyModel& model, const std::vector<TokenId>& prefix);

struct ResidOverride {
    int layer = -1;  // -1 = none
    enum class Kind { replace, subspace } kind = Kind::replace;
    std::vector<float> h;          // replace: the new residual
    std::vector<float> direction;  // subspace: unit u
    float value = 0.0f;            // subspace: u-component written in
};

// Final-position logits; `resid_out`, when given, receives RESID_POST of
// every layer (post-override).
std::vector<float> run_tail(const TinyModel& model, const TailCache& cache, TokenId token,
                            const ResidOverride& ov = {}, Mat<float>* resid_out = nullptr);

// Cross-entropy of `answer` after overriding RESID_POST at `layer` with
// `h_tilde`, plus d(loss)/d(h_tilde). Layers at or below the override never
// influence the loss.
struct TailGrad {
    double loss = 0.0;
    std::vector<double> grad;  // size D
};
TailGrad run_tail_grad(const TinyModel& model, const TailCache& cache, TokenId token, int layer,
                       const std::vector<double>& h_tilde, TokenId answer);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
    int batch_size = 32;
    float learning_rate = 1e-3f;
    int steps = 1000;
    OptimizerKind optimizer = OptimizerKind::adam;
    uint64_t seed = 7;

    int warmup_steps = 50;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    bool cosine_decay = true;
    float final_lr_fraction = 0.1f;
    float grad_clip = 1.0f;
    double holdout_fraction = 0.02;  // split off for the held-out loss curve
    int eval_every = 100;

    // Optional per-step observers (snapshots, early stopping).
    std::vector<int> snapshot_steps;
    std::function<void(int step, const TinyModel&)> on_snapshot;
    std::function<bool(int step, const TinyModel&)> should_stop;  // checked every eval_every
};

struct TrainReport {
    std::vector<std::pair<int, double>> train_loss;    // (step, batch loss)
    std::vector<std::pair<int, double>> holdout_loss;  // (step, loss)
    int steps_run = 0;
};

TrainReport train(TinyModel& model, const std::vector<TrainExample>& corpus,
                  const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Gradient verification (runs entirely in double precision).
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    int probes = 0;
};

// Analytic parameter gradients of the LM loss vs central finite differences
// on randomly chosen parameters.
GradCheckResult gradient_check_params(const TinyModel& model,
                                      const std::vector<TrainExample>& samples, int probes,
                                      double step, uint64_t seed);

// Analytic gradient w.r.t. the projection direction u of the subspace-patch
// loss, vs central finite differences along random unit directions.
GradCheckResult gradient_check_subspace(const TinyModel& model,
                                        const std::vector<TokenId>& source_prompt,
                                        const std::vector<TokenId>& target_prompt,
                                        TokenId source_answer, const std::vector<float>& u,
                                        int layer, int probes, double step, uint64_t seed);

// d(-log p(answer))/du for one (source, target) pair, double precision;
// exposed for the gradient checks and the subspace trainer.
struct SubspacePairGrad {
    double loss = 0.0;
    std::vector<double> grad_u;
};
SubspacePairGrad subspace_pair_grad(const WeightsT<double>& w, const ModelConfig& cfg,
                                    const std::vector<TokenId>& source_prompt,
                                    const std::vector<TokenId>& target_prompt,
                                    TokenId source_answer, const std::vector<double>& u, int layer);

}  // namespace ccs
