#pragma once

#include <string>
#include <vector>

#include "ccs/data.hpp"
#include "ccs/model.hpp"

namespace ccs {

// Rank-1 projection P = u u^T over RESID_POST of one layer; u is unit-norm.
struct ProjectionDirection {
    std::vector<float> u;
    int layer = 0;

    double norm() const;
    void renormalize();
};

struct SteeringConstants {
    double c_pri = 0.0;
    double c_ctx = 0.0;
    bool degenerate = false;  // grid search found no signal; constants are +-1 std
};

struct SubspaceTrainConfig {
    double learning_rate = 0.2;
    int steps = 240;
    int batch_size = 32;
    uint64_t seed = 17;
    double holdout_fraction = 0.125;
    int eval_every = 20;
};

// Projection health at a checkpointed optimization step: P = u u^T must stay
// symmetric, idempotent, trace-1, with unit u.
struct ProjectionCheck {
    int step = 0;
    double u_norm_err = 0.0;    // | ||u|| - 1 |
    double symmetry_err = 0.0;  // ||P - P^T||_F
    double idem_err = 0.0;      // ||P^2 - P||_F
    double trace_err = 0.0;     // | tr P - 1 |
    double train_loss = 0.0;
    double holdout_loss = 0.0;
};

struct SubspaceTrainResult {
    ProjectionDirection direction;  // lowest held-out loss
    std::vector<ProjectionCheck> checkpoints;
    double best_holdout_loss = 0.0;
    int pairs_used = 0;
    int pairs_filtered_out = 0;
};

ProjectionCheck check_projection(const std::vector<float>& u);

// Eq. 2b: h~ = (I - P) h_t + P h_s at RESID_POST of `layer`, last token.
std::vector<float> patched_forward(const TinyModel& model, const std::vector<TokenId>& target,
                                   const std::vector<TokenId>& source,
                                   const std::vector<float>& u, int layer);

// Learn u by gradient descent on the patched cross-entropy toward the source
// answer, renormalizing after every step. Pairs the model answers wrongly
// under either intent are filtered out first (frozen evaluation pass).
SubspaceTrainResult learn_subspace(const TinyModel& model, const std::vector<PatchTuple>& pairs,
                                   int layer, const SubspaceTrainConfig& cfg);

// h~ = (I - P) h_t + u c_value: write a constant into the subspace.
std::vector<float> steer(const TinyModel& model, const std::vector<TokenId>& prompt,
                         const std::vector<float>& u, int layer, double c_value);

// Grid search over subspace values maximizing steered pair accuracy on
// intent-free validation prompts.
struct FitConstantsConfig {
    int grid_points = 41;
    double std_range = 10.0;  // grid spans mean +- std_range * std of observed u.h
};
SteeringConstants fit_constants(const TinyModel& model, const std::vector<float>& u, int layer,
                                const std::vector<QueryContextPair>& validation,
                                const FitConstantsConfig& cfg = {});

struct SubspaceStats {
    std::vector<double> values_ctx;  // u . h per ctx-intent prompt
    std::vector<double> values_pri;
    double mean_ctx = 0.0;
    double mean_pri = 0.0;
    double separation = 0.0;  // |mean_ctx - mean_pri|
};

SubspaceStats subspace_stats(const TinyModel& model,
                             const std::vector<PromptExample>& prompts_with_intents,
                             const std::vector<float>& u, int layer);

// Pearson correlation between per-checkpoint subspace separation and pair
// accuracy. Errors below 3 points or under zero variance.
double separation_accuracy_correlation(const std::vector<std::pair<double, double>>& points);

}  // namespace ccs
