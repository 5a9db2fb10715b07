#include "ccs/search.hpp"

#include <algorithm>
#include <map>
#include <optional>

#include "ccs/common.hpp"

namespace ccs {

const char* to_string(SearchStatus s) {
    switch (s) {
        case SearchStatus::ok: return "ok";
        case SearchStatus::no_base_range: return "no_base_range";
        case SearchStatus::no_convergence: return "no_convergence";
    }
    return "?";
}

namespace {

double curve_max(const std::vector<double>& curve) {
    double mx = 0.0;
    for (double x : curve) mx = std::max(mx, x);
    return mx;
}

std::vector<int> make_range(int lo, int hi) {
    std::vector<int> out;
    for (int l = lo; l < hi; ++l) out.push_back(l);
    return out;
}

struct Sweeper {
    const TinyModel* model;
    std::vector<PreparedTuple> prepared;
    std::optional<TipReader> tip;
    const SearchParams* params;
    int sweeps = 0;
    int budget = 0;
    std::map<std::vector<int>, SweepEval> cache;
    std::vector<SearchStep>* trace;

    const SweepEval& eval(std::vector<int> layers, const std::string& stage) {
        std::sort(layers.begin(), layers.end());
        auto it = cache.find(layers);
        if (it == cache.end()) {
            if (sweeps >= budget)
                fail_numeric("layer search exceeded its forward-pass budget of " +
                             std::to_string(budget) + " sweeps");
            ++sweeps;
            SweepEval ev = evaluate_sweep(*model, prepared, layers, params->lens,
                                          tip ? &*tip : nullptr, params->use_median);
            it = cache.emplace(std::move(layers), std::move(ev)).first;
        }
        trace->push_back({stage, it->first, it->second});
        return it->second;
    }

    bool has_budget() const { return sweeps < budget; }
};

}  // namespace

SearchResult search(const TinyModel& model, const std::vector<PatchTuple>& pairs,
                    const SearchParams& params) {
    if (pairs.empty()) fail_schema("search: no patch tuples");
    const int L = model.config.n_layers;

    SearchResult res;
    res.params = params;

    Sweeper sw;
    sw.model = &model;
    sw.params = &params;
    sw.budget = 4 * L;
    sw.trace = &res.trace;
    std::vector<PatchTuple> sample = pairs;
    if (static_cast<int>(sample.size()) > params.max_pairs) sample.resize(static_cast<size_t>(params.max_pairs));
    sw.prepared = prepare_tuples(model, sample, Site::mha_out);
    if (params.lens == Lens::tip) sw.tip.emplace(model);

    // Step 1.1: grow the end of the base range until the source answer is
    // decodable at some layer.
    int end_l = 0;
    const SweepEval* ev = &sw.eval(make_range(0, end_l), "grow_end");
    while (curve_max(ev->src_curve) < params.thres) {
        ++end_l;
        if (end_l > L) {
            res.status = SearchStatus::no_base_range;
            res.sweeps = sw.sweeps;
            return res;
        }
        ev = &sw.eval(make_range(0, end_l), "grow_end");
    }

    // Step 1.2: raise the start while the criterion still holds; ties resolve
    // toward the smaller range.
    int start_l = 0;
    while (start_l < end_l) {
        const SweepEval& trial = sw.eval(make_range(start_l + 1, end_l), "shrink_start");
        if (curve_max(trial.src_curve) >= params.thres) {
            ++start_l;
            ev = &trial;
        } else {
            break;
        }
    }
    res.base_start = start_l;
    res.base_end = end_l;

    // Step 2: append later layers that suppress the source answer until the
    // output prefers it by `margin`.
    std::vector<int> layers = make_range(start_l, end_l);
    ev = &sw.eval(layers, "suppression");
    while (!res.criterion_met(*ev)) {
        int scan_from = layers.empty() ? 1 : *std::max_element(layers.begin(), layers.end()) + 1;
        int found = -1;
        for (int l = std::max(1, scan_from); l < L; ++l) {
            if (std::abs(ev->src_curve[static_cast<size_t>(l)] -
                         ev->src_curve[static_cast<size_t>(l - 1)]) > params.eps) {
                found = l;
                break;
            }
        }
        if (found < 0) {
            res.status = SearchStatus::no_convergence;
            break;
        }
        layers.push_back(found);
        res.suppression_layers.push_back(found);
        ev = &sw.eval(layers, "suppression");
    }

    // Prune suppression layers whose removal keeps the criterion; repeat to a
    // fixed point so every surviving one is necessary.
    if (res.status == SearchStatus::ok) {
        bool changed = true;
        while (changed && sw.has_budget()) {
            changed = false;
            for (int s : res.suppression_layers) {
                std::vector<int> without = layers;
                without.erase(std::remove(without.begin(), without.end(), s), without.end());
                const SweepEval& trial = sw.eval(without, "prune");
                if (res.criterion_met(trial)) {
                    layers = without;
                    res.suppression_layers.erase(std::remove(res.suppression_layers.begin(),
                                                             res.suppression_layers.end(), s),
                                                 res.suppression_layers.end());
                    ev = &trial;
                    changed = true;
                    break;
                }
                if (!sw.has_budget()) break;
            }
        }
    }

    std::sort(layers.begin(), layers.end());
    res.layers = layers;
    res.trace.push_back({"final", layers, *ev});
    res.sweeps = sw.sweeps;
    return res;
}

AblateReport ablate(const TinyModel& model, const std::vector<PatchTuple>& pairs,
                    const std::vector<int>& layer_set, int drop, const SearchParams& params) {
    if (std::find(layer_set.begin(), layer_set.end(), drop) == layer_set.end())
        fail_schema("ablate: dropped layer not in the layer set");
    std::vector<PatchTuple> sample = pairs;
    if (static_cast<int>(sample.size()) > params.max_pairs)
        sample.resize(static_cast<size_t>(params.max_pairs));
    auto prepared = prepare_tuples(model, sample, Site::mha_out);
    std::optional<TipReader> tip;
    if (params.lens == Lens::tip) tip.emplace(model);

    std::vector<int> without = layer_set;
    without.erase(std::remove(without.begin(), without.end(), drop), without.end());

    AblateReport rep;
    rep.dropped_layer = drop;
    rep.with_layer = evaluate_sweep(model, prepared, layer_set, params.lens,
                                    tip ? &*tip : nullptr, params.use_median);
    rep.without_layer = evaluate_sweep(model, prepared, without, params.lens,
                                       tip ? &*tip : nullptr, params.use_median);
    rep.criterion_with = rep.with_layer.out_src >= params.margin + rep.with_layer.out_tgt;
    rep.criterion_without = rep.without_layer.out_src >= params.margin + rep.without_layer.out_tgt;
    return rep;
}

}  // namespace ccs
