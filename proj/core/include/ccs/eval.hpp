#pragma once

#include <map>
#include <string>
#include <vector>

#include "ccs/data.hpp"
#include "ccs/model.hpp"
#include "ccs/subspace.hpp"

namespace ccs {

enum class EvalMode { zero_shot, icl, fine_tuned, steered };
const char* to_string(EvalMode m);
EvalMode eval_mode_from_string(const std::string& s);

struct EvalConfig {
    EvalMode mode = EvalMode::zero_shot;
    IntentFormat intent_format = IntentFormat::weight;
    std::string dataset_id;
    uint64_t seed = 5;

    int icl_k = 10;
    bool icl_ctx_first = true;  // demonstration intent ordering

    // steered mode (intent_format forced to none)
    std::vector<float> direction;
    int layer = -1;
    SteeringConstants constants;
};

struct ExampleRecord {
    std::string pair_id;
    Intent intent = Intent::ctx;
    std::string expected;
    std::string predicted;
    bool correct = false;
};

struct EvalReport {
    double pair_accuracy = 0.0;
    double acc_ctx = 0.0;
    double acc_pri = 0.0;
    int n_pairs = 0;
    std::vector<ExampleRecord> records;  // two per pair, ctx then pri
    EvalConfig config;
};

// Greedy-decode both intent variants of every pair; a pair counts only when
// both answers are right. `icl_pool` supplies demonstrations for icl mode.
EvalReport pair_accuracy(const TinyModel& model, const std::vector<QueryContextPair>& pairs,
                         const EvalConfig& cfg,
                         const std::vector<QueryContextPair>* icl_pool = nullptr);

struct DatasetRef {
    std::string id;
    const std::vector<QueryContextPair>* pairs;
};

// One report per (dataset, intent format) cell.
std::map<std::pair<std::string, std::string>, EvalReport> generalization_matrix(
    const TinyModel& model, const std::vector<DatasetRef>& datasets,
    const std::vector<IntentFormat>& formats, const EvalConfig& base_cfg,
    const std::vector<QueryContextPair>* icl_pool = nullptr);

struct SteeringComparison {
    std::string dataset_id;
    EvalReport baseline;  // explicit intents
    EvalReport steered;   // no intents, subspace constants written in
};

std::vector<SteeringComparison> steering_vs_baseline(const TinyModel& model,
                                                     const std::vector<float>& u, int layer,
                                                     const SteeringConstants& constants,
                                                     const std::vector<DatasetRef>& datasets,
                                                     const EvalConfig& base_cfg);

}  // namespace ccs
