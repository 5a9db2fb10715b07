#pragma once

#include <string>
#include <vector>

#include "ccs/eval.hpp"
#include "ccs/search.hpp"
#include "ccs/subspace.hpp"

namespace ccs {

// Every artifact starts with schema_version and the producing config hash
// (comment line for CSV/SVG, fields for JSON).

struct ArtifactStamp {
    std::string config_json;  // compact echo of the producing config
    std::string hash() const;
};

// (layer, token, probability, lens, setup, n_examples) rows.
struct CurveRow {
    int layer = 0;
    std::string token;
    double probability = 0.0;
    std::string lens;
    std::string setup;
    int n_examples = 0;
};
void write_curve_csv(const std::string& path, const ArtifactStamp& stamp,
                     const std::vector<CurveRow>& rows);

struct LineSeries {
    std::string label;
    std::vector<double> y;  // x = index
};
// Line plot; `marked_x` positions get tick marks under the axis (the patched
// layers in the layer-curve figures).
void write_line_svg(const std::string& path, const ArtifactStamp& stamp, const std::string& title,
                    const std::vector<LineSeries>& series, const std::vector<int>& marked_x);

void write_search_json(const std::string& path, const ArtifactStamp& stamp,
                       const SearchResult& result);
SearchResult read_search_json(const std::string& path);
void write_search_svg(const std::string& path, const ArtifactStamp& stamp,
                      const SearchResult& result);

void write_eval_csv(const std::string& path, const ArtifactStamp& stamp, const EvalReport& report);
void write_eval_json(const std::string& path, const ArtifactStamp& stamp, const EvalReport& report);
EvalReport read_eval_json(const std::string& path);

struct BarGroup {
    std::string label;
    std::vector<double> values;  // one per series
};
void write_bar_svg(const std::string& path, const ArtifactStamp& stamp, const std::string& title,
                   const std::vector<std::string>& series_names, const std::vector<BarGroup>& groups);

void write_stats_csv(const std::string& path, const ArtifactStamp& stamp,
                     const std::vector<PromptExample>& prompts, const SubspaceStats& stats);
void write_violin_svg(const std::string& path, const ArtifactStamp& stamp, const std::string& title,
                      const SubspaceStats& stats);

void write_direction_json(const std::string& path, const ArtifactStamp& stamp,
                          const ProjectionDirection& dir, double held_out_loss,
                          const std::string& train_config_json);
ProjectionDirection read_direction_json(const std::string& path);

void write_run_manifest(const std::string& path, const std::string& command,
                        const std::string& config_json);

}  // namespace ccs
