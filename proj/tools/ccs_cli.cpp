// Command-line workbench: dataset generation, model training, evaluation,
// interchange-patching layer search, subspace learning, and steering, wired
// into reproducible runs. Exit codes: 0 ok, 2 usage, 3 schema, 4 numerical.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ccs/checkpoint.hpp"
#include "ccs/common.hpp"
#include "ccs/data.hpp"
#include "ccs/eval.hpp"
#include "ccs/export.hpp"
#include "ccs/jsonl.hpp"
#include "ccs/model.hpp"
#include "ccs/patch.hpp"
#include "ccs/rng.hpp"
#include "ccs/search.hpp"
#include "ccs/subspace.hpp"
#include "ccs/tensor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ccs;

namespace {

ArithmeticSpec arith_spec_from(const std::string& ops, int contexts_per_query,
                               double explicit_fraction) {
    ArithmeticSpec spec;
    spec.operators.clear();
    for (char c : ops) {
        switch (c) {
            case '+': spec.operators.push_back(ArithOp::add); break;
            case '-': spec.operators.push_back(ArithOp::sub); break;
            case '*': spec.operators.push_back(ArithOp::mul); break;
            case '/': spec.operators.push_back(ArithOp::div); break;
            case '^': spec.operators.push_back(ArithOp::pow); break;
            default: fail_usage(std::string("unknown operator: ") + c);
        }
    }
    spec.contexts_per_query = contexts_per_query;
    spec.explicit_answer_fraction = explicit_fraction;
    return spec;
}

std::vector<IntentFormat> parse_formats(const std::string& csv) {
    std::vector<IntentFormat> out;
    std::string cur;
    for (char c : csv + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(format_from_string(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (out.empty()) fail_usage("no intent formats given");
    return out;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail_schema("cannot create output directory: " + dir);
}

std::string path_in(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// --------------------------------------------------------------------------
// gen-data
// --------------------------------------------------------------------------

struct GenDataArgs {
    std::string kind;
    bool multihop = false;
    int n = 4096;
    uint64_t seed = 7;
    std::string out_dir = ".";
    double test_fraction = 0.2;
    int countries = 100;
    std::string kb_path;
    std::string ops = "+-*/^";
    int contexts_per_query = 2;
    double explicit_fraction = 0.25;
    std::string patch_format = "weight";
    bool no_patch = false;
};

int cmd_gen_data(const GenDataArgs& a) {
    ensure_dir(a.out_dir);
    DatasetKind kind = kind_from_string(a.multihop && a.kind == "fact" ? "fact-multihop" : a.kind);

    json cfg_echo{{"kind", to_string(kind)},
                  {"n", a.n},
                  {"seed", a.seed},
                  {"test_fraction", a.test_fraction},
                  {"countries", a.countries},
                  {"ops", a.ops},
                  {"contexts_per_query", a.contexts_per_query},
                  {"explicit_fraction", a.explicit_fraction}};
    FileHeader header;
    header.seed = a.seed;
    header.generator_config = cfg_echo.dump();
    header.config_hash = hash_hex(header.generator_config);

    ArithmeticSpec spec = arith_spec_from(a.ops, a.contexts_per_query, a.explicit_fraction);
    std::vector<QueryContextPair> pairs;
    if (kind == DatasetKind::arithmetic) {
        pairs = gen_arithmetic(spec, a.n, a.seed);
    } else {
        FactKB kb = a.kb_path.empty() ? FactKB::synth(a.countries, a.seed)
                                      : read_kb_json(a.kb_path);
        pairs = gen_fact_dataset(kb, a.n, kind == DatasetKind::fact_multihop, a.seed);
        write_kb_json(path_in(a.out_dir, "kb.json"), header, kb);
    }

    std::string stem = std::string(to_string(kind));
    write_pairs_jsonl(path_in(a.out_dir, stem + ".jsonl"), header, pairs);
    Split sp = split(pairs, a.test_fraction, a.seed + 1);
    write_pairs_jsonl(path_in(a.out_dir, stem + "_train.jsonl"), header, sp.train);
    write_pairs_jsonl(path_in(a.out_dir, stem + "_test.jsonl"), header, sp.test);

    if (!a.no_patch) {
        IntentFormat pf = format_from_string(a.patch_format);
        for (PatchSetup setup :
             {PatchSetup::w_p2c, PatchSetup::w_c2p, PatchSetup::pri, PatchSetup::ctx}) {
            auto tuples = build_patch_dataset(sp.test, setup, pf, a.seed + 2, spec);
            write_patch_jsonl(
                path_in(a.out_dir, stem + "_patch_" + std::string(to_string(setup)) + ".jsonl"),
                header, tuples);
        }
    }
    write_run_manifest(path_in(a.out_dir, "manifest_gen_" + stem + ".json"), "gen-data",
                       header.generator_config);
    std::cout << "wrote " << pairs.size() << " pairs (" << sp.train.size() << " train / "
              << sp.test.size() << " test) to " << a.out_dir << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// train
// --------------------------------------------------------------------------

struct TrainArgs {
    std::string stage;
    std::string out;
    std::string kb_path;
    std::string init_ckpt;
    std::vector<std::string> train_files;
    std::vector<std::string> arith_from;  // pretrain arithmetic on these pairs' queries
    std::string formats = "weight,instruction";
    uint64_t seed = 11;
    int steps = 2000;
    int batch = 32;
    double lr = 1e-3;
    int eval_every = 200;
    double stop_fact_acc = 0.97;
    double stop_arith_acc = 0.97;
    int identity_sequences = 1200;
    int max_offset = 12;
    int fact_repeat = 4;
    int arith_repeat = 1;
    int statement_repeat = 1;
    bool arith_equations = true;  // bare "( a op b ) op c = r" sequences
    std::string ops = "+-*/^";
    bool answer_only_loss = true;
    std::string snapshot_dir;
    int snapshots = 0;
    bool cosine = true;
    int n_layers = 8, d_model = 128, n_heads = 4, d_mlp = 512, max_seq_len = 128;
};

// Fixed probe of fact and arithmetic recall used for pretraining early stop.
struct RecallProbe {
    std::vector<std::vector<TokenId>> prompts;
    std::vector<TokenId> answers;
    int n_fact = 0;

    static RecallProbe make(const FactKB& kb, const ArithmeticSpec& spec, const Tokenizer& tok,
                            int per_kind, uint64_t seed, std::vector<ArithExpr> exprs = {}) {
        RecallProbe probe;
        Rng rng(seed, 171);
        std::vector<const FactTriple*> triples;
        for (const auto& t : kb.triples) triples.push_back(&t);
        rng.shuffle(triples);
        for (int i = 0; i < per_kind && i < static_cast<int>(triples.size()); ++i) {
            const auto& t = *triples[static_cast<size_t>(i)];
            probe.prompts.push_back(tok.encode(
                "Query: " + render_fact_query(kb.relation(t.relation), t.subject) + " Answer:"));
            probe.answers.push_back(tok.id(t.object));
        }
        probe.n_fact = static_cast<int>(probe.prompts.size());
        if (exprs.empty()) exprs = enumerate_expressions(spec);
        rng.shuffle(exprs);
        for (int i = 0; i < per_kind && i < static_cast<int>(exprs.size()); ++i) {
            const auto& e = exprs[static_cast<size_t>(i)];
            probe.prompts.push_back(tok.encode("Query: " + render_query(e) + " Answer:"));
            probe.answers.push_back(tok.id(std::to_string(e.result)));
        }
        return probe;
    }

    std::pair<double, double> accuracy(const TinyModel& model) const {
        std::vector<char> ok(prompts.size(), 0);
        parallel_for(static_cast<int>(prompts.size()), [&](int i) {
            auto out = greedy_decode(model, prompts[static_cast<size_t>(i)], 1);
            ok[static_cast<size_t>(i)] = out.at(0) == answers[static_cast<size_t>(i)] ? 1 : 0;
        });
        int fact_ok = 0, arith_ok = 0;
        for (int i = 0; i < static_cast<int>(ok.size()); ++i)
            (i < n_fact ? fact_ok : arith_ok) += ok[static_cast<size_t>(i)];
        double fa = n_fact ? static_cast<double>(fact_ok) / n_fact : 1.0;
        int n_arith = static_cast<int>(ok.size()) - n_fact;
        double aa = n_arith ? static_cast<double>(arith_ok) / n_arith : 1.0;
        return {fa, aa};
    }
};

int cmd_train(const TrainArgs& a) {
    if (a.stage != "pretrain" && a.stage != "finetune")
        fail_usage("--stage must be pretrain or finetune");

    json cfg_echo{{"stage", a.stage},   {"seed", a.seed}, {"steps", a.steps},
                  {"batch", a.batch},   {"lr", a.lr},     {"formats", a.formats},
                  {"out", a.out},       {"ops", a.ops},   {"answer_only_loss", a.answer_only_loss}};

    TrainConfig tc;
    tc.batch_size = a.batch;
    tc.learning_rate = static_cast<float>(a.lr);
    tc.steps = a.steps;
    tc.seed = a.seed;
    tc.eval_every = a.eval_every;
    tc.cosine_decay = a.cosine;

    if (!a.snapshot_dir.empty() && a.snapshots > 0) {
        ensure_dir(a.snapshot_dir);
        for (int i = 0; i <= a.snapshots; ++i)
            tc.snapshot_steps.push_back(a.steps * i / a.snapshots);
        std::string dir = a.snapshot_dir;
        tc.on_snapshot = [dir](int step, const TinyModel& m) {
            save_checkpoint(path_in(dir, "step_" + std::to_string(step) + ".ckpt"), m);
        };
    }

    if (a.stage == "pretrain") {
        if (a.kb_path.empty()) fail_usage("pretrain needs --kb");
        FactKB kb = read_kb_json(a.kb_path);
        ArithmeticSpec spec = arith_spec_from(a.ops, 2, 0.25);
        Tokenizer tok = Tokenizer::build(vocabulary_words(spec, kb));

        ModelConfig mc;
        mc.n_layers = a.n_layers;
        mc.d_model = a.d_model;
        mc.n_heads = a.n_heads;
        mc.d_mlp = a.d_mlp;
        mc.max_seq_len = a.max_seq_len;
        mc.seed = a.seed;
        TinyModel model = TinyModel::init(mc, tok);

        PretrainConfig pc;
        pc.identity_sequences = a.identity_sequences;
        pc.max_offset = a.max_offset;
        pc.fact_repeat = a.fact_repeat;
        pc.arithmetic_repeat = a.arith_repeat;
        pc.statement_repeat = a.statement_repeat;
        pc.arithmetic_equations = a.arith_equations;
        pc.arithmetic_qa = true;
        if (!a.arith_from.empty()) {
            std::set<std::string> seen;
            for (const auto& f : a.arith_from) {
                for (const auto& p : read_pairs_jsonl(f)) {
                    if (p.kind != DatasetKind::arithmetic || !seen.insert(p.query).second)
                        continue;
                    auto e = parse_rendered_query(p.query, spec);
                    if (!e) fail_schema("unparseable arithmetic query: " + p.query);
                    pc.arith_exprs.push_back(*e);
                }
            }
        }
        pc.seed = a.seed;
        auto corpus = build_pretrain_corpus(spec, kb, tok, pc);
        RecallProbe probe = RecallProbe::make(kb, spec, tok, 256, a.seed + 3, pc.arith_exprs);
        tc.should_stop = [&](int step, const TinyModel& m) {
            auto [fa, aa] = probe.accuracy(m);
            std::cout << "step " << step << " fact_recall " << fa << " arith_recall " << aa
                      << std::endl;
            return fa >= a.stop_fact_acc && aa >= a.stop_arith_acc;
        };

        auto report = train(model, corpus, tc);
        auto [fa, aa] = probe.accuracy(model);
        save_checkpoint(a.out, model);
        write_run_manifest(a.out + ".manifest.json", "train", cfg_echo.dump());
        std::cout << "pretrained " << report.steps_run << " steps; fact recall " << fa
                  << ", arithmetic recall " << aa << "; saved " << a.out << "\n";
        return 0;
    }

    if (a.init_ckpt.empty()) fail_usage("finetune needs --init");
    if (a.train_files.empty()) fail_usage("finetune needs at least one --train file");
    TinyModel model = load_checkpoint(a.init_ckpt);
    std::vector<QueryContextPair> pairs;
    for (const auto& f : a.train_files) {
        auto part = read_pairs_jsonl(f);
        pairs.insert(pairs.end(), part.begin(), part.end());
    }
    auto corpus = build_finetune_corpus(pairs, parse_formats(a.formats), model.tokenizer,
                                        a.answer_only_loss, a.seed);
    auto report = train(model, corpus, tc);
    save_checkpoint(a.out, model);
    write_run_manifest(a.out + ".manifest.json", "train", cfg_echo.dump());
    std::cout << "finetuned " << report.steps_run << " steps on " << pairs.size()
              << " pairs; saved " << a.out << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// eval
// --------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string test_file;
    std::string mode = "fine_tuned";
    std::string format = "weight";
    std::string out_dir = ".";
    std::string tag = "eval";
    uint64_t seed = 5;
    int icl_k = 10;
    std::string icl_pool;
    std::string direction_file;
    double c_pri = 0.0, c_ctx = 0.0;
};

int cmd_eval(const EvalArgs& a) {
    ensure_dir(a.out_dir);
    TinyModel model = load_checkpoint(a.checkpoint);
    auto pairs = read_pairs_jsonl(a.test_file);

    EvalConfig cfg;
    cfg.mode = eval_mode_from_string(a.mode);
    cfg.intent_format = format_from_string(a.format);
    cfg.seed = a.seed;
    cfg.icl_k = a.icl_k;
    cfg.dataset_id = fs::path(a.test_file).stem().string();

    std::optional<std::vector<QueryContextPair>> pool;
    if (cfg.mode == EvalMode::icl) {
        if (a.icl_pool.empty()) fail_usage("icl mode needs --icl-pool");
        pool = read_pairs_jsonl(a.icl_pool);
    }
    if (cfg.mode == EvalMode::steered) {
        if (a.direction_file.empty()) fail_usage("steered mode needs --direction");
        ProjectionDirection dir = read_direction_json(a.direction_file);
        cfg.direction = dir.u;
        cfg.layer = dir.layer;
        if (a.c_pri == a.c_ctx) fail_usage("steered mode needs distinct --c-pri/--c-ctx");
        cfg.constants = {a.c_pri, a.c_ctx, false};
    }

    json cfg_echo{{"checkpoint", a.checkpoint}, {"test", a.test_file}, {"mode", a.mode},
                  {"format", a.format},         {"seed", a.seed},      {"icl_k", a.icl_k},
                  {"direction", a.direction_file}};
    ArtifactStamp stamp{cfg_echo.dump()};

    EvalReport report = pair_accuracy(model, pairs, cfg, pool ? &*pool : nullptr);
    write_eval_csv(path_in(a.out_dir, a.tag + ".csv"), stamp, report);
    write_eval_json(path_in(a.out_dir, a.tag + ".json"), stamp, report);
    write_run_manifest(path_in(a.out_dir, a.tag + "_manifest.json"), "eval", stamp.config_json);
    std::cout << "pair_accuracy " << report.pair_accuracy << " (ctx " << report.acc_ctx << ", pri "
              << report.acc_pri << ") over " << report.n_pairs << " pairs\n";
    return 0;
}

// --------------------------------------------------------------------------
// search
// --------------------------------------------------------------------------

struct SearchArgs {
    std::string checkpoint;
    std::string tuples_file;
    std::string out_dir = ".";
    std::string tag = "search";
    double thres = 0.88, margin = 0.3, eps = 0.05;
    std::string lens = "tip";
    int max_pairs = 64;
    bool use_median = false;
    int ablate_layer = -1;
};

int cmd_search(const SearchArgs& a) {
    ensure_dir(a.out_dir);
    TinyModel model = load_checkpoint(a.checkpoint);
    auto tuples = read_patch_jsonl(a.tuples_file);

    SearchParams params;
    params.thres = a.thres;
    params.margin = a.margin;
    params.eps = a.eps;
    params.lens = lens_from_string(a.lens);
    params.max_pairs = a.max_pairs;
    params.use_median = a.use_median;

    json cfg_echo{{"checkpoint", a.checkpoint}, {"tuples", a.tuples_file}, {"thres", a.thres},
                  {"margin", a.margin},         {"eps", a.eps},            {"lens", a.lens},
                  {"max_pairs", a.max_pairs}};
    ArtifactStamp stamp{cfg_echo.dump()};

    SearchResult res = search(model, tuples, params);
    write_search_json(path_in(a.out_dir, a.tag + ".json"), stamp, res);
    write_search_svg(path_in(a.out_dir, a.tag + ".svg"), stamp, res);

    std::vector<CurveRow> rows;
    std::string setup = tuples.empty() ? "?" : to_string(tuples[0].setup);
    for (const auto& st : res.trace) {
        if (st.stage != "final") continue;
        for (size_t l = 0; l < st.eval.src_curve.size(); ++l) {
            rows.push_back({static_cast<int>(l), "source_answer", st.eval.src_curve[l], a.lens,
                            setup, std::min<int>(a.max_pairs, static_cast<int>(tuples.size()))});
            rows.push_back({static_cast<int>(l), "target_answer", st.eval.tgt_curve[l], a.lens,
                            setup, std::min<int>(a.max_pairs, static_cast<int>(tuples.size()))});
        }
    }
    write_curve_csv(path_in(a.out_dir, a.tag + "_curves.csv"), stamp, rows);
    write_run_manifest(path_in(a.out_dir, a.tag + "_manifest.json"), "search", stamp.config_json);

    if (a.ablate_layer >= 0) {
        auto rep = ablate(model, tuples, res.layers, a.ablate_layer, params);
        json aj{{"dropped_layer", rep.dropped_layer},
                {"criterion_with", rep.criterion_with},
                {"criterion_without", rep.criterion_without},
                {"out_src_with", rep.with_layer.out_src},
                {"out_src_without", rep.without_layer.out_src}};
        std::ofstream f(path_in(a.out_dir, a.tag + "_ablate.json"));
        f << aj.dump(2) << '\n';
    }

    std::cout << "search status " << to_string(res.status) << "; base range [" << res.base_start
              << "," << res.base_end << ") suppression [";
    for (int l : res.suppression_layers) std::cout << l << ' ';
    std::cout << "] sweeps " << res.sweeps << "\n";
    if (res.status != SearchStatus::ok)
        fail_numeric(std::string("layer search did not converge: ") + to_string(res.status));
    return 0;
}

// --------------------------------------------------------------------------
// learn-subspace
// --------------------------------------------------------------------------

struct LearnSubArgs {
    std::string checkpoint;
    std::vector<std::string> tuple_files;
    std::string from_search;
    int layer = -1;
    std::string out = "direction.json";
    double lr = 0.2;
    int steps = 240;
    int batch = 32;
    uint64_t seed = 17;
};

int cmd_learn_subspace(const LearnSubArgs& a) {
    TinyModel model = load_checkpoint(a.checkpoint);
    if (a.tuple_files.empty()) fail_usage("learn-subspace needs --tuples files");
    std::vector<PatchTuple> tuples;
    for (const auto& f : a.tuple_files) {
        auto part = read_patch_jsonl(f);
        tuples.insert(tuples.end(), part.begin(), part.end());
    }
    int layer = a.layer;
    if (layer < 0 && !a.from_search.empty()) {
        SearchResult sr = read_search_json(a.from_search);
        layer = sr.base_end - 1;  // last layer of the base range
    }
    if (layer < 0) fail_usage("learn-subspace needs --layer or --from-search");

    SubspaceTrainConfig cfg;
    cfg.learning_rate = a.lr;
    cfg.steps = a.steps;
    cfg.batch_size = a.batch;
    cfg.seed = a.seed;

    json cfg_echo{{"checkpoint", a.checkpoint}, {"layer", layer},   {"lr", a.lr},
                  {"steps", a.steps},           {"batch", a.batch}, {"seed", a.seed}};
    ArtifactStamp stamp{cfg_echo.dump()};

    auto result = learn_subspace(model, tuples, layer, cfg);
    write_direction_json(a.out, stamp, result.direction, result.best_holdout_loss,
                         cfg_echo.dump());

    json trace = json::array();
    for (const auto& c : result.checkpoints)
        trace.push_back({{"step", c.step},
                         {"u_norm_err", c.u_norm_err},
                         {"symmetry_err", c.symmetry_err},
                         {"idem_err", c.idem_err},
                         {"trace_err", c.trace_err},
                         {"train_loss", c.train_loss},
                         {"holdout_loss", c.holdout_loss}});
    json tj{{"schema_version", kSchemaVersion},
            {"config_hash", stamp.hash()},
            {"pairs_used", result.pairs_used},
            {"pairs_filtered_out", result.pairs_filtered_out},
            {"checkpoints", trace}};
    std::ofstream f(a.out + ".trace.json");
    f << tj.dump(2) << '\n';

    std::cout << "learned direction at layer " << layer << " over " << result.pairs_used
              << " pairs (filtered " << result.pairs_filtered_out << "); held-out loss "
              << result.best_holdout_loss << "; saved " << a.out << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// steer
// --------------------------------------------------------------------------

struct SteerArgs {
    std::string checkpoint;
    std::string direction_file;
    std::string validation_file;
    std::vector<std::string> test_files;
    std::string out_dir = ".";
    std::string tag = "steer";
    std::string baseline_format = "weight";
    double c_pri = 0.0, c_ctx = 0.0;
    int max_validation = 128;
    uint64_t seed = 5;
};

int cmd_steer(const SteerArgs& a) {
    ensure_dir(a.out_dir);
    TinyModel model = load_checkpoint(a.checkpoint);
    ProjectionDirection dir = read_direction_json(a.direction_file);

    json cfg_echo{{"checkpoint", a.checkpoint},
                  {"direction", a.direction_file},
                  {"validation", a.validation_file},
                  {"baseline_format", a.baseline_format},
                  {"seed", a.seed}};
    ArtifactStamp stamp{cfg_echo.dump()};

    SteeringConstants consts{a.c_pri, a.c_ctx, false};
    if (a.c_pri == a.c_ctx) {
        if (a.validation_file.empty())
            fail_usage("steer needs --validation to fit constants (or explicit --c-pri/--c-ctx)");
        auto validation = read_pairs_jsonl(a.validation_file);
        if (static_cast<int>(validation.size()) > a.max_validation)
            validation.resize(static_cast<size_t>(a.max_validation));
        consts = fit_constants(model, dir.u, dir.layer, validation);
        if (consts.degenerate)
            std::cout << "warning: flat steering grid; falling back to +-1 std constants\n";
    }

    std::vector<std::vector<QueryContextPair>> datasets;
    datasets.reserve(a.test_files.size());
    std::vector<DatasetRef> refs;
    for (const auto& f : a.test_files) datasets.push_back(read_pairs_jsonl(f));
    for (size_t i = 0; i < a.test_files.size(); ++i)
        refs.push_back({fs::path(a.test_files[i]).stem().string(), &datasets[i]});
    if (refs.empty()) fail_usage("steer needs at least one --test file");

    EvalConfig base_cfg;
    base_cfg.intent_format = format_from_string(a.baseline_format);
    base_cfg.seed = a.seed;
    auto comparisons = steering_vs_baseline(model, dir.u, dir.layer, consts, refs, base_cfg);

    std::vector<PromptExample> prompts;
    for (const auto& p : datasets.front()) {
        prompts.push_back(format_prompt(p, Intent::ctx, base_cfg.intent_format));
        prompts.push_back(format_prompt(p, Intent::pri, base_cfg.intent_format));
    }
    SubspaceStats stats = subspace_stats(model, prompts, dir.u, dir.layer);
    write_stats_csv(path_in(a.out_dir, a.tag + "_stats.csv"), stamp, prompts, stats);
    write_violin_svg(path_in(a.out_dir, a.tag + "_stats.svg"), stamp, "subspace values", stats);

    json out{{"schema_version", kSchemaVersion},
             {"config_hash", stamp.hash()},
             {"c_pri", consts.c_pri},
             {"c_ctx", consts.c_ctx},
             {"degenerate", consts.degenerate},
             {"layer", dir.layer},
             {"separation", stats.separation}};
    json per_ds = json::array();
    std::vector<BarGroup> groups;
    for (const auto& cmp : comparisons) {
        write_eval_csv(path_in(a.out_dir, a.tag + "_" + cmp.dataset_id + "_baseline.csv"), stamp,
                       cmp.baseline);
        write_eval_csv(path_in(a.out_dir, a.tag + "_" + cmp.dataset_id + "_steered.csv"), stamp,
                       cmp.steered);
        per_ds.push_back({{"dataset", cmp.dataset_id},
                          {"baseline_pair_acc", cmp.baseline.pair_accuracy},
                          {"steered_pair_acc", cmp.steered.pair_accuracy}});
        groups.push_back({cmp.dataset_id, {cmp.baseline.pair_accuracy, cmp.steered.pair_accuracy}});
    }
    out["datasets"] = per_ds;
    std::ofstream f(path_in(a.out_dir, a.tag + "_summary.json"));
    f << out.dump(2) << '\n';
    write_bar_svg(path_in(a.out_dir, a.tag + ".svg"), stamp, "baseline vs steered pair accuracy",
                  {"baseline", "steered"}, groups);
    write_run_manifest(path_in(a.out_dir, a.tag + "_manifest.json"), "steer", stamp.config_json);

    for (const auto& cmp : comparisons)
        std::cout << cmp.dataset_id << ": baseline " << cmp.baseline.pair_accuracy << " steered "
                  << cmp.steered.pair_accuracy << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// report
// --------------------------------------------------------------------------

struct ReportArgs {
    std::string in_dir;
    std::string out_dir = "report";
};

int cmd_report(const ReportArgs& a) {
    if (a.in_dir.empty()) fail_usage("report needs --in-dir");
    ensure_dir(a.out_dir);
    ArtifactStamp stamp{json{{"in_dir", a.in_dir}}.dump()};

    std::vector<std::pair<std::string, EvalReport>> evals;
    std::vector<json> steers;
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(a.in_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".json")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        std::ifstream f(path);
        json j = json::parse(f, nullptr, false);
        if (j.is_discarded()) continue;
        if (j.contains("pair_accuracy") && j.contains("mode"))
            evals.emplace_back(path.stem().string(), read_eval_json(path.string()));
        else if (j.contains("c_pri") && j.contains("datasets"))
            steers.push_back(j);
    }
    if (evals.empty() && steers.empty()) fail_schema("report: no summaries found in " + a.in_dir);

    std::map<std::string, std::map<std::string, double>> by_ds;
    std::set<std::string> series_set;
    for (const auto& [name, r] : evals) {
        std::string ds = r.config.dataset_id.empty() ? name : r.config.dataset_id;
        std::string series =
            std::string(to_string(r.config.mode)) + "/" + to_string(r.config.intent_format);
        by_ds[ds][series] = r.pair_accuracy;
        series_set.insert(series);
    }
    if (!by_ds.empty()) {
        std::vector<std::string> series(series_set.begin(), series_set.end());
        std::vector<BarGroup> groups;
        for (const auto& [ds, cells] : by_ds) {
            BarGroup g;
            g.label = ds;
            for (const auto& s : series) {
                auto it = cells.find(s);
                g.values.push_back(it == cells.end() ? 0.0 : it->second);
            }
            groups.push_back(std::move(g));
        }
        write_bar_svg(path_in(a.out_dir, "pair_accuracy.svg"), stamp, "pair accuracy", series,
                      groups);
        std::ofstream csv(path_in(a.out_dir, "pair_accuracy.csv"));
        csv << "# schema_version=" << kSchemaVersion << " config_hash=" << stamp.hash() << "\n";
        csv << "dataset,series,pair_accuracy\n";
        for (const auto& [ds, cells] : by_ds)
            for (const auto& [s, v] : cells) csv << ds << ',' << s << ',' << v << '\n';
    }

    if (!steers.empty()) {
        std::vector<BarGroup> groups;
        std::vector<std::pair<double, double>> sep_acc;
        for (size_t i = 0; i < steers.size(); ++i) {
            const json& s = steers[i];
            for (const auto& ds : s.at("datasets"))
                groups.push_back({ds.at("dataset").get<std::string>() + "#" + std::to_string(i),
                                  {ds.at("baseline_pair_acc").get<double>(),
                                   ds.at("steered_pair_acc").get<double>()}});
            if (s.contains("separation"))
                sep_acc.emplace_back(s.at("separation").get<double>(),
                                     s.at("datasets")[0].at("baseline_pair_acc").get<double>());
        }
        write_bar_svg(path_in(a.out_dir, "steering.svg"), stamp, "baseline vs steered",
                      {"baseline", "steered"}, groups);
        if (sep_acc.size() >= 3) {
            double r = separation_accuracy_correlation(sep_acc);
            std::ofstream f(path_in(a.out_dir, "correlation.json"));
            f << json{{"schema_version", kSchemaVersion},
                      {"config_hash", stamp.hash()},
                      {"pearson_r", r},
                      {"points", sep_acc.size()}}
                     .dump(2)
              << '\n';
        }
    }
    std::cout << "report written to " << a.out_dir << " (" << evals.size() << " evals, "
              << steers.size() << " steering summaries)\n";
    return 0;
}

// --------------------------------------------------------------------------
// --config file.json supplies flag values; explicit command-line flags
// override them (flags > config file > built-in defaults).
// --------------------------------------------------------------------------

std::vector<std::string> inject_config(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string config_path;
    for (size_t i = 0; i + 1 < args.size(); ++i)
        if (args[i] == "--config") config_path = args[i + 1];
    if (config_path.empty()) return args;

    std::ifstream f(config_path);
    if (!f) fail_schema("cannot open config file: " + config_path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail_schema("config file must be a JSON object");

    std::vector<std::string> out;
    size_t insert_at = args.empty() ? 0 : 1;  // right after the subcommand
    out.insert(out.end(), args.begin(), args.begin() + static_cast<long>(insert_at));
    for (auto it = j.begin(); it != j.end(); ++it) {
        out.push_back("--" + it.key());
        if (!it.value().is_boolean())
            out.push_back(it.value().is_string() ? it.value().get<std::string>()
                                                 : it.value().dump());
    }
    out.insert(out.end(), args.begin() + static_cast<long>(insert_at), args.end());
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"controllable context sensitivity workbench"};
    app.require_subcommand(1);
    app.option_defaults()->take_last();
    int threads = 0;
    std::string config_path;
    app.add_option("--threads", threads, "worker threads (0 = hardware)");
    app.add_option("--config", config_path, "JSON file with flag defaults");

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "generate a knowledge-conflict dataset");
    gen->option_defaults()->take_last();
    gen->add_option("--kind", gd.kind, "arithmetic|fact")->required();
    gen->add_flag("--multihop", gd.multihop, "two-hop fact items");
    gen->add_option("--n", gd.n);
    gen->add_option("--seed", gd.seed);
    gen->add_option("--out-dir", gd.out_dir);
    gen->add_option("--test-fraction", gd.test_fraction);
    gen->add_option("--countries", gd.countries);
    gen->add_option("--kb", gd.kb_path, "reuse an existing KB file");
    gen->add_option("--ops", gd.ops);
    gen->add_option("--contexts-per-query", gd.contexts_per_query);
    gen->add_option("--explicit-fraction", gd.explicit_fraction,
                    "share of contexts stating the full answer");
    gen->add_option("--patch-format", gd.patch_format);
    gen->add_flag("--no-patch", gd.no_patch, "skip patch tuple files");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "pretrain or finetune the model");
    train_cmd->option_defaults()->take_last();
    train_cmd->add_option("--stage", tr.stage, "pretrain|finetune")->required();
    train_cmd->add_option("--out", tr.out)->required();
    train_cmd->add_option("--kb", tr.kb_path);
    train_cmd->add_option("--init", tr.init_ckpt);
    train_cmd->add_option("--train", tr.train_files)->take_all();
    train_cmd->add_option("--formats", tr.formats);
    train_cmd->add_option("--seed", tr.seed);
    train_cmd->add_option("--steps", tr.steps);
    train_cmd->add_option("--batch", tr.batch);
    train_cmd->add_option("--lr", tr.lr);
    train_cmd->add_option("--eval-every", tr.eval_every);
    train_cmd->add_option("--stop-fact-acc", tr.stop_fact_acc);
    train_cmd->add_option("--stop-arith-acc", tr.stop_arith_acc);
    train_cmd->add_option("--identity-sequences", tr.identity_sequences);
    train_cmd->add_option("--max-offset", tr.max_offset);
    train_cmd->add_option("--fact-repeat", tr.fact_repeat);
    train_cmd->add_option("--arith-repeat", tr.arith_repeat);
    train_cmd->add_option("--statement-repeat", tr.statement_repeat);
    train_cmd->add_option("--arith-equations", tr.arith_equations);
    train_cmd->add_option("--arith-from", tr.arith_from)->take_all();
    train_cmd->add_option("--cosine", tr.cosine);
    train_cmd->add_option("--ops", tr.ops);
    train_cmd->add_option("--answer-only-loss", tr.answer_only_loss);
    train_cmd->add_option("--snapshot-dir", tr.snapshot_dir);
    train_cmd->add_option("--snapshots", tr.snapshots);
    train_cmd->add_option("--n-layers", tr.n_layers);
    train_cmd->add_option("--d-model", tr.d_model);
    train_cmd->add_option("--n-heads", tr.n_heads);
    train_cmd->add_option("--d-mlp", tr.d_mlp);
    train_cmd->add_option("--max-seq-len", tr.max_seq_len);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "pair-accuracy evaluation");
    eval_cmd->option_defaults()->take_last();
    eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
    eval_cmd->add_option("--test", ev.test_file)->required();
    eval_cmd->add_option("--mode", ev.mode, "zero_shot|icl|fine_tuned|steered");
    eval_cmd->add_option("--format", ev.format);
    eval_cmd->add_option("--out-dir", ev.out_dir);
    eval_cmd->add_option("--tag", ev.tag);
    eval_cmd->add_option("--seed", ev.seed);
    eval_cmd->add_option("--icl-k", ev.icl_k);
    eval_cmd->add_option("--icl-pool", ev.icl_pool);
    eval_cmd->add_option("--direction", ev.direction_file);
    eval_cmd->add_option("--c-pri", ev.c_pri);
    eval_cmd->add_option("--c-ctx", ev.c_ctx);

    SearchArgs se;
    auto* search_cmd = app.add_subcommand("search", "iterative layer search");
    search_cmd->option_defaults()->take_last();
    search_cmd->add_option("--checkpoint", se.checkpoint)->required();
    search_cmd->add_option("--tuples", se.tuples_file)->required();
    search_cmd->add_option("--out-dir", se.out_dir);
    search_cmd->add_option("--tag", se.tag);
    search_cmd->add_option("--thres", se.thres);
    search_cmd->add_option("--margin", se.margin);
    search_cmd->add_option("--eps", se.eps);
    search_cmd->add_option("--lens", se.lens, "tip|logit_lens");
    search_cmd->add_option("--max-pairs", se.max_pairs);
    search_cmd->add_flag("--median", se.use_median);
    search_cmd->add_option("--ablate", se.ablate_layer, "rerun with one layer dropped");

    LearnSubArgs ls;
    auto* learn_cmd = app.add_subcommand("learn-subspace", "fit the rank-1 direction");
    learn_cmd->option_defaults()->take_last();
    learn_cmd->add_option("--checkpoint", ls.checkpoint)->required();
    learn_cmd->add_option("--tuples", ls.tuple_files)->take_all();
    learn_cmd->add_option("--from-search", ls.from_search);
    learn_cmd->add_option("--layer", ls.layer);
    learn_cmd->add_option("--out", ls.out);
    learn_cmd->add_option("--lr", ls.lr);
    learn_cmd->add_option("--steps", ls.steps);
    learn_cmd->add_option("--batch", ls.batch);
    learn_cmd->add_option("--seed", ls.seed);

    SteerArgs st;
    auto* steer_cmd = app.add_subcommand("steer", "fit constants and steer without intents");
    steer_cmd->option_defaults()->take_last();
    steer_cmd->add_option("--checkpoint", st.checkpoint)->required();
    steer_cmd->add_option("--direction", st.direction_file)->required();
    steer_cmd->add_option("--validation", st.validation_file);
    steer_cmd->add_option("--test", st.test_files)->take_all();
    steer_cmd->add_option("--out-dir", st.out_dir);
    steer_cmd->add_option("--tag", st.tag);
    steer_cmd->add_option("--baseline-format", st.baseline_format);
    steer_cmd->add_option("--c-pri", st.c_pri);
    steer_cmd->add_option("--c-ctx", st.c_ctx);
    steer_cmd->add_option("--max-validation", st.max_validation);
    steer_cmd->add_option("--seed", st.seed);

    ReportArgs rp;
    auto* report_cmd = app.add_subcommand("report", "aggregate run outputs");
    report_cmd->option_defaults()->take_last();
    report_cmd->add_option("--in-dir", rp.in_dir)->required();
    report_cmd->add_option("--out-dir", rp.out_dir);

    try {
        auto args = inject_config(argc, argv);
        std::vector<const char*> cargv;
        cargv.push_back(argc > 0 ? argv[0] : "ccs");
        for (const auto& s : args) cargv.push_back(s.c_str());
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    }

    set_num_threads(threads);
    try {
        if (*gen) return cmd_gen_data(gd);
        if (*train_cmd) return cmd_train(tr);
        if (*eval_cmd) return cmd_eval(ev);
        if (*search_cmd) return cmd_search(se);
        if (*learn_cmd) return cmd_learn_subspace(ls);
        if (*steer_cmd) return cmd_steer(st);
        if (*report_cmd) return cmd_report(rp);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
