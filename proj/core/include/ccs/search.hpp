#pragma once

#include <string>
#include <vector>

#include "ccs/patch.hpp"

namespace ccs {

struct SearchParams {
    double thres = 0.88;
    double margin = 0.3;
    double eps = 0.05;
    Lens lens = Lens::tip;
    int max_pairs = 64;       // batch the mean curves are computed over
    bool use_median = false;  // mean by default
};

enum class SearchStatus { ok, no_base_range, no_convergence };
const char* to_string(SearchStatus s);

struct SearchStep {
    std::string stage;  // "grow_end", "shrink_start", "suppression", "prune", "final"
    std::vector<int> layers;
    SweepEval eval;
};

struct SearchResult {
    SearchStatus status = SearchStatus::ok;
    int base_start = 0;
    int base_end = 0;  // base range is [base_start, base_end)
    std::vector<int> suppression_layers;
    std::vector<int> layers;  // base range plus suppression layers
    std::vector<SearchStep> trace;
    int sweeps = 0;  // interchange sweeps issued; bounded by 4 * n_layers
    SearchParams params;

    bool criterion_met(const SweepEval& ev) const {
        return ev.out_src >= params.margin + ev.out_tgt;
    }
};

// Iterative layer search: grow the end of a base range until the source
// answer becomes decodable somewhere, shrink the start while it stays
// decodable, then add later suppression layers until the output prefers the
// source answer by `margin`. Suppression layers that turn out unnecessary are
// pruned so every one that remains is load-bearing.
SearchResult search(const TinyModel& model, const std::vector<PatchTuple>& pairs,
                    const SearchParams& params);

struct AblateReport {
    int dropped_layer = -1;
    SweepEval with_layer;
    SweepEval without_layer;
    bool criterion_with = false;
    bool criterion_without = false;
};

// Rerun the mean curves with `drop` removed from the layer set.
AblateReport ablate(const TinyModel& model, const std::vector<PatchTuple>& pairs,
                    const std::vector<int>& layer_set, int drop, const SearchParams& params);

}  // namespace ccs
