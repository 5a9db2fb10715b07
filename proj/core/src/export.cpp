#include "ccs/export.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ccs/common.hpp"

namespace ccs {

using nlohmann::json;

std::string ArtifactStamp::hash() const { return hash_hex(config_json); }

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) fail_schema("cannot open for writing: " + path);
    return f;
}

std::string csv_stamp(const ArtifactStamp& s) {
    return "# schema_version=" + std::to_string(kSchemaVersion) + " config_hash=" + s.hash() + "\n";
}

std::string svg_stamp(const ArtifactStamp& s) {
    return "<!-- schema_version=" + std::to_string(kSchemaVersion) + " config_hash=" + s.hash() +
           " -->\n";
}

void stamp_json(json& j, const ArtifactStamp& s) {
    j["schema_version"] = kSchemaVersion;
    j["config_hash"] = s.hash();
}

const char* kPalette[] = {"#4878d0", "#ee854a", "#6acc64", "#d65f5f",
                          "#956cb4", "#8c613c", "#dc7ec0", "#797979"};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

void write_curve_csv(const std::string& path, const ArtifactStamp& stamp,
                     const std::vector<CurveRow>& rows) {
    auto f = open_out(path);
    f << csv_stamp(stamp);
    f << "layer,token,probability,lens,setup,n_examples\n";
    for (const auto& r : rows)
        f << r.layer << ',' << r.token << ',' << fmt(r.probability) << ',' << r.lens << ','
          << r.setup << ',' << r.n_examples << '\n';
}

void write_line_svg(const std::string& path, const ArtifactStamp& stamp, const std::string& title,
                    const std::vector<LineSeries>& series, const std::vector<int>& marked_x) {
    const int W = 720, H = 420, ml = 60, mr = 20, mt = 40, mb = 50;
    const double pw = W - ml - mr, ph = H - mt - mb;
    size_t nx = 0;
    for (const auto& s : series) nx = std::max(nx, s.y.size());
    if (nx < 2) nx = 2;

    auto fx = [&](double x) { return ml + pw * x / static_cast<double>(nx - 1); };
    auto fy = [&](double y) { return mt + ph * (1.0 - std::clamp(y, 0.0, 1.0)); };

    auto f = open_out(path);
    f << svg_stamp(stamp);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    f << "<rect width='100%' height='100%' fill='white'/>\n";
    f << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
    // axes
    f << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << mt + ph
      << "' stroke='black'/>\n";
    f << "<line x1='" << ml << "' y1='" << mt + ph << "' x2='" << ml + pw << "' y2='" << mt + ph
      << "' stroke='black'/>\n";
    for (int g = 0; g <= 4; ++g) {
        double y = g / 4.0;
        f << "<line x1='" << ml << "' y1='" << fy(y) << "' x2='" << ml + pw << "' y2='" << fy(y)
          << "' stroke='#dddddd'/>\n";
        f << "<text x='" << ml - 8 << "' y='" << fy(y) + 4
          << "' text-anchor='end' font-size='11'>" << fmt(y) << "</text>\n";
    }
    for (size_t x = 0; x < nx; ++x)
        f << "<text x='" << fx(static_cast<double>(x)) << "' y='" << mt + ph + 16
          << "' text-anchor='middle' font-size='11'>" << x << "</text>\n";
    for (int m : marked_x)
        f << "<rect x='" << fx(m) - 4 << "' y='" << mt + ph + 20 << "' width='8' height='6' fill='"
          << "#d65f5f" << "'/>\n";
    f << "<text x='" << ml + pw / 2 << "' y='" << H - 8
      << "' text-anchor='middle' font-size='12'>layer (marks = patched)</text>\n";

    for (size_t s = 0; s < series.size(); ++s) {
        f << "<polyline fill='none' stroke='" << kPalette[s % 8] << "' stroke-width='2' points='";
        for (size_t x = 0; x < series[s].y.size(); ++x)
            f << fx(static_cast<double>(x)) << ',' << fy(series[s].y[x]) << ' ';
        f << "'/>\n";
        f << "<text x='" << ml + pw - 4 << "' y='" << mt + 16 + 16 * static_cast<int>(s)
          << "' text-anchor='end' font-size='12' fill='" << kPalette[s % 8] << "'>"
          << series[s].label << "</text>\n";
    }
    f << "</svg>\n";
}

namespace {

json sweep_json(const SweepEval& ev) {
    return json{{"src_curve", ev.src_curve},
                {"tgt_curve", ev.tgt_curve},
                {"out_src", ev.out_src},
                {"out_tgt", ev.out_tgt}};
}

SweepEval sweep_from_json(const json& j) {
    SweepEval ev;
    ev.src_curve = j.at("src_curve").get<std::vector<double>>();
    ev.tgt_curve = j.at("tgt_curve").get<std::vector<double>>();
    ev.out_src = j.at("out_src").get<double>();
    ev.out_tgt = j.at("out_tgt").get<double>();
    return ev;
}

}  // namespace

void write_search_json(const std::string& path, const ArtifactStamp& stamp,
                       const SearchResult& result) {
    json j;
    stamp_json(j, stamp);
    j["status"] = to_string(result.status);
    j["base_range"] = {{"start", result.base_start}, {"end", result.base_end}};
    j["suppression_layers"] = result.suppression_layers;
    j["layers"] = result.layers;
    j["sweeps"] = result.sweeps;
    j["params"] = {{"thres", result.params.thres},
                   {"margin", result.params.margin},
                   {"eps", result.params.eps},
                   {"lens", to_string(result.params.lens)},
                   {"max_pairs", result.params.max_pairs},
                   {"use_median", result.params.use_median}};
    json steps = json::array();
    for (const auto& st : result.trace)
        steps.push_back({{"stage", st.stage}, {"layers", st.layers}, {"eval", sweep_json(st.eval)}});
    j["trace"] = steps;
    auto f = open_out(path);
    f << j.dump(2) << '\n';
}

SearchResult read_search_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail_schema("cannot open search result: " + path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) fail_schema("invalid search result JSON: " + path);
    SearchResult r;
    std::string status = j.at("status").get<std::string>();
    r.status = status == "ok"              ? SearchStatus::ok
               : status == "no_base_range" ? SearchStatus::no_base_range
                                           : SearchStatus::no_convergence;
    r.base_start = j.at("base_range").at("start").get<int>();
    r.base_end = j.at("base_range").at("end").get<int>();
    r.suppression_layers = j.at("suppression_layers").get<std::vector<int>>();
    r.layers = j.at("layers").get<std::vector<int>>();
    r.sweeps = j.at("sweeps").get<int>();
    r.params.thres = j.at("params").at("thres").get<double>();
    r.params.margin = j.at("params").at("margin").get<double>();
    r.params.eps = j.at("params").at("eps").get<double>();
    r.params.lens = lens_from_string(j.at("params").at("lens").get<std::string>());
    for (const auto& st : j.at("trace"))
        r.trace.push_back({st.at("stage").get<std::string>(), st.at("layers").get<std::vector<int>>(),
                           sweep_from_json(st.at("eval"))});
    return r;
}

void write_search_svg(const std::string& path, const ArtifactStamp& stamp,
                      const SearchResult& result) {
    std::vector<LineSeries> series;
    // Show the trajectory: first step, the accepted base range, and the final
    // set, source-answer curves.
    auto add = [&series](const std::string& label, const SweepEval& ev) {
        series.push_back({label, ev.src_curve});
    };
    if (!result.trace.empty()) add("initial", result.trace.front().eval);
    for (const auto& st : result.trace)
        if (st.stage == "final") {
            add("final src", st.eval);
            series.push_back({"final tgt", st.eval.tgt_curve});
        }
    write_line_svg(path, stamp,
                   "layer search (" + std::string(to_string(result.status)) + ")", series,
                   result.layers);
}

void write_eval_csv(const std::string& path, const ArtifactStamp& stamp, const EvalReport& report) {
    auto f = open_out(path);
    f << csv_stamp(stamp);
    f << "pair_id,intent,expected,predicted,correct\n";
    for (const auto& r : report.records)
        f << r.pair_id << ',' << to_string(r.intent) << ',' << r.expected << ',' << r.predicted
          << ',' << (r.correct ? 1 : 0) << '\n';
}

void write_eval_json(const std::string& path, const ArtifactStamp& stamp, const EvalReport& report) {
    json j;
    stamp_json(j, stamp);
    j["pair_accuracy"] = report.pair_accuracy;
    j["acc_ctx"] = report.acc_ctx;
    j["acc_pri"] = report.acc_pri;
    j["n_pairs"] = report.n_pairs;
    j["mode"] = to_string(report.config.mode);
    j["intent_format"] = to_string(report.config.intent_format);
    j["dataset_id"] = report.config.dataset_id;
    auto f = open_out(path);
    f << j.dump(2) << '\n';
}

EvalReport read_eval_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail_schema("cannot open eval summary: " + path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) fail_schema("invalid eval summary JSON: " + path);
    EvalReport r;
    r.pair_accuracy = j.at("pair_accuracy").get<double>();
    r.acc_ctx = j.at("acc_ctx").get<double>();
    r.acc_pri = j.at("acc_pri").get<double>();
    r.n_pairs = j.at("n_pairs").get<int>();
    r.config.mode = eval_mode_from_string(j.at("mode").get<std::string>());
    r.config.intent_format = format_from_string(j.at("intent_format").get<std::string>());
    r.config.dataset_id = j.value("dataset_id", "");
    return r;
}

void write_bar_svg(const std::string& path, const ArtifactStamp& stamp, const std::string& title,
                   const std::vector<std::string>& series_names,
                   const std::vector<BarGroup>& groups) {
    const int W = 720, H = 420, ml = 60, mr = 20, mt = 40, mb = 60;
    const double pw = W - ml - mr, ph = H - mt - mb;
    size_t ns = series_names.size(), ng = groups.size();
    if (ns == 0 || ng == 0) fail_schema("write_bar_svg: empty data");

    auto f = open_out(path);
    f << svg_stamp(stamp);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    f << "<rect width='100%' height='100%' fill='white'/>\n";
    f << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
    for (int g = 0; g <= 4; ++g) {
        double y = g / 4.0;
        double yy = mt + ph * (1.0 - y);
        f << "<line x1='" << ml << "' y1='" << yy << "' x2='" << ml + pw << "' y2='" << yy
          << "' stroke='#dddddd'/>\n";
        f << "<text x='" << ml - 8 << "' y='" << yy + 4 << "' text-anchor='end' font-size='11'>"
          << fmt(y) << "</text>\n";
    }
    double group_w = pw / static_cast<double>(ng);
    double bar_w = group_w * 0.8 / static_cast<double>(ns);
    for (size_t gi = 0; gi < ng; ++gi) {
        for (size_t si = 0; si < ns && si < groups[gi].values.size(); ++si) {
            double v = std::clamp(groups[gi].values[si], 0.0, 1.0);
            double x = ml + group_w * static_cast<double>(gi) + group_w * 0.1 + bar_w * static_cast<double>(si);
            double y = mt + ph * (1.0 - v);
            f << "<rect x='" << x << "' y='" << y << "' width='" << bar_w * 0.92 << "' height='"
              << ph * v << "' fill='" << kPalette[si % 8] << "'/>\n";
            f << "<text x='" << x + bar_w * 0.46 << "' y='" << y - 3
              << "' text-anchor='middle' font-size='9'>" << fmt(v) << "</text>\n";
        }
        f << "<text x='" << ml + group_w * (static_cast<double>(gi) + 0.5) << "' y='" << mt + ph + 16
          << "' text-anchor='middle' font-size='11'>" << groups[gi].label << "</text>\n";
    }
    for (size_t si = 0; si < ns; ++si)
        f << "<text x='" << ml + 4 << "' y='" << mt + 14 + 14 * static_cast<double>(si)
          << "' font-size='11' fill='" << kPalette[si % 8] << "'>" << series_names[si]
          << "</text>\n";
    f << "</svg>\n";
}

void write_stats_csv(const std::string& path, const ArtifactStamp& stamp,
                     const std::vector<PromptExample>& prompts, const SubspaceStats& stats) {
    auto f = open_out(path);
    f << csv_stamp(stamp);
    f << "prompt_id,intent,value\n";
    size_t ci = 0, pi = 0;
    for (const auto& ex : prompts) {
        double v = ex.intent == Intent::ctx ? stats.values_ctx.at(ci++) : stats.values_pri.at(pi++);
        f << ex.pair_id << ',' << to_string(ex.intent) << ',' << fmt(v) << '\n';
    }
}

void write_violin_svg(const std::string& path, const ArtifactStamp& stamp,
                      const std::string& title, const SubspaceStats& stats) {
    const int W = 480, H = 420, mt = 40, mb = 30;
    const double ph = H - mt - mb;
    double lo = 1e300, hi = -1e300;
    for (double v : stats.values_ctx) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : stats.values_pri) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) {
        hi = lo + 1;
        lo -= 1;
    }
    double pad = 0.1 * (hi - lo);
    lo -= pad;
    hi += pad;

    auto fy = [&](double v) { return mt + ph * (1.0 - (v - lo) / (hi - lo)); };
    // Gaussian kernel density along the value axis.
    auto density = [&](const std::vector<double>& vals, double at) {
        if (vals.empty()) return 0.0;
        double bw = 0.15 * (hi - lo) / std::sqrt(static_cast<double>(vals.size()));
        bw = std::max(bw, 1e-9);
        double s = 0.0;
        for (double v : vals) {
            double z = (at - v) / bw;
            s += std::exp(-0.5 * z * z);
        }
        return s / (static_cast<double>(vals.size()) * bw);
    };

    auto f = open_out(path);
    f << svg_stamp(stamp);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    f << "<rect width='100%' height='100%' fill='white'/>\n";
    f << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
    const std::vector<double>* groups[2] = {&stats.values_ctx, &stats.values_pri};
    const char* labels[2] = {"ctx", "pri"};
    for (int gidx = 0; gidx < 2; ++gidx) {
        double cx = gidx == 0 ? W * 0.33 : W * 0.67;
        double dmax = 1e-12;
        const int steps = 60;
        for (int s = 0; s <= steps; ++s)
            dmax = std::max(dmax, density(*groups[gidx], lo + (hi - lo) * s / steps));
        std::string pts;
        for (int s = 0; s <= steps; ++s) {
            double v = lo + (hi - lo) * s / steps;
            double wd = 60.0 * density(*groups[gidx], v) / dmax;
            pts += fmt(cx - wd) + "," + fmt(fy(v)) + " ";
        }
        for (int s = steps; s >= 0; --s) {
            double v = lo + (hi - lo) * s / steps;
            double wd = 60.0 * density(*groups[gidx], v) / dmax;
            pts += fmt(cx + wd) + "," + fmt(fy(v)) + " ";
        }
        f << "<polygon points='" << pts << "' fill='" << kPalette[gidx] << "' fill-opacity='0.5' stroke='"
          << kPalette[gidx] << "'/>\n";
        double mean = gidx == 0 ? stats.mean_ctx : stats.mean_pri;
        f << "<line x1='" << cx - 60 << "' y1='" << fy(mean) << "' x2='" << cx + 60 << "' y2='"
          << fy(mean) << "' stroke='black' stroke-dasharray='4 2'/>\n";
        f << "<text x='" << cx << "' y='" << H - 8 << "' text-anchor='middle' font-size='12'>"
          << labels[gidx] << "</text>\n";
    }
    f << "<text x='" << W / 2 << "' y='" << 34
      << "' text-anchor='middle' font-size='11'>separation " << fmt(stats.separation)
      << "</text>\n";
    f << "</svg>\n";
}

void write_direction_json(const std::string& path, const ArtifactStamp& stamp,
                          const ProjectionDirection& dir, double held_out_loss,
                          const std::string& train_config_json) {
    json j;
    stamp_json(j, stamp);
    j["layer"] = dir.layer;
    j["d_model"] = static_cast<int>(dir.u.size());
    j["u"] = dir.u;
    j["norm"] = dir.norm();
    j["held_out_loss"] = held_out_loss;
    j["train_config"] = train_config_json;
    auto f = open_out(path);
    f << j.dump(2) << '\n';
}

ProjectionDirection read_direction_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail_schema("cannot open direction file: " + path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) fail_schema("invalid direction JSON: " + path);
    ProjectionDirection dir;
    dir.layer = j.at("layer").get<int>();
    dir.u = j.at("u").get<std::vector<float>>();
    if (static_cast<int>(dir.u.size()) != j.at("d_model").get<int>())
        fail_schema("direction length mismatch in " + path);
    return dir;
}

void write_run_manifest(const std::string& path, const std::string& command,
                        const std::string& config_json) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["command"] = command;
    j["config"] = json::parse(config_json, nullptr, false).is_discarded()
                      ? json(config_json)
                      : json::parse(config_json);
    j["config_hash"] = hash_hex(config_json);
    auto f = open_out(path);
    f << j.dump(2) << '\n';
}

}  // namespace ccs
