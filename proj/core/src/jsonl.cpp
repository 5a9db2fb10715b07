#include "ccs/jsonl.hpp"

#include <fstream>

#include <json.hpp>

#include "ccs/common.hpp"

namespace ccs {

using nlohmann::json;

namespace {

json header_json(const FileHeader& h) {
    return json{{"schema_version", h.schema_version},
                {"seed", h.seed},
                {"generator_config", h.generator_config},
                {"config_hash", h.config_hash.empty() ? hash_hex(h.generator_config) : h.config_hash}};
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) fail_schema("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail_schema("cannot open for reading: " + path);
    return f;
}

json parse_line(const std::string& line, const std::string& path) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) fail_schema("invalid JSON line in " + path);
    return j;
}

FileHeader read_header(std::ifstream& f, const std::string& path) {
    std::string line;
    if (!std::getline(f, line)) fail_schema("empty dataset file: " + path);
    json j = parse_line(line, path);
    if (!j.contains("schema_version")) fail_schema("missing schema_version header in " + path);
    FileHeader h;
    h.schema_version = j.at("schema_version").get<int>();
    if (h.schema_version != kSchemaVersion)
        fail_schema("unsupported schema_version in " + path);
    h.seed = j.value("seed", 0ull);
    h.generator_config = j.value("generator_config", "");
    h.config_hash = j.value("config_hash", "");
    return h;
}

}  // namespace

void write_pairs_jsonl(const std::string& path, const FileHeader& header,
                       const std::vector<QueryContextPair>& pairs) {
    auto f = open_out(path);
    f << header_json(header).dump() << '\n';
    for (const auto& p : pairs) {
        json j{{"id", p.id},
               {"kind", to_string(p.kind)},
               {"query", p.query},
               {"context", p.context},
               {"prior_answer", p.prior_answer},
               {"context_answer", p.context_answer},
               {"template", p.template_id}};
        f << j.dump() << '\n';
    }
}

std::vector<QueryContextPair> read_pairs_jsonl(const std::string& path, FileHeader* header) {
    auto f = open_in(path);
    FileHeader h = read_header(f, path);
    if (header) *header = h;
    std::vector<QueryContextPair> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = parse_line(line, path);
        QueryContextPair p;
        p.id = j.at("id").get<std::string>();
        p.kind = kind_from_string(j.at("kind").get<std::string>());
        p.query = j.at("query").get<std::string>();
        p.context = j.at("context").get<std::string>();
        p.prior_answer = j.at("prior_answer").get<std::string>();
        p.context_answer = j.at("context_answer").get<std::string>();
        p.template_id = j.value("template", "");
        if (p.prior_answer == p.context_answer)
            fail_schema("pair with equal prior and context answers in " + path);
        out.push_back(std::move(p));
    }
    return out;
}

void write_prompts_jsonl(const std::string& path, const FileHeader& header,
                         const std::vector<PromptExample>& prompts) {
    auto f = open_out(path);
    f << header_json(header).dump() << '\n';
    for (const auto& p : prompts) {
        json j{{"pair_id", p.pair_id},
               {"prompt", p.prompt},
               {"intent", to_string(p.intent)},
               {"intent_format", to_string(p.intent_format)},
               {"expected_answer", p.expected_answer}};
        f << j.dump() << '\n';
    }
}

std::vector<PromptExample> read_prompts_jsonl(const std::string& path, FileHeader* header) {
    auto f = open_in(path);
    FileHeader h = read_header(f, path);
    if (header) *header = h;
    std::vector<PromptExample> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = parse_line(line, path);
        PromptExample p;
        p.pair_id = j.at("pair_id").get<std::string>();
        p.prompt = j.at("prompt").get<std::string>();
        p.intent = intent_from_string(j.at("intent").get<std::string>());
        p.intent_format = format_from_string(j.at("intent_format").get<std::string>());
        p.expected_answer = j.at("expected_answer").get<std::string>();
        out.push_back(std::move(p));
    }
    return out;
}

void write_patch_jsonl(const std::string& path, const FileHeader& header,
                       const std::vector<PatchTuple>& tuples) {
    auto f = open_out(path);
    f << header_json(header).dump() << '\n';
    for (const auto& t : tuples) {
        json j{{"pair_id", t.pair_id},
               {"setup", to_string(t.setup)},
               {"source_prompt", t.source_prompt},
               {"source_answer", t.source_answer},
               {"target_prompt", t.target_prompt},
               {"target_answer", t.target_answer}};
        f << j.dump() << '\n';
    }
}

std::vector<PatchTuple> read_patch_jsonl(const std::string& path, FileHeader* header) {
    auto f = open_in(path);
    FileHeader h = read_header(f, path);
    if (header) *header = h;
    std::vector<PatchTuple> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = parse_line(line, path);
        PatchTuple t;
        t.pair_id = j.at("pair_id").get<std::string>();
        t.setup = setup_from_string(j.at("setup").get<std::string>());
        t.source_prompt = j.at("source_prompt").get<std::string>();
        t.source_answer = j.at("source_answer").get<std::string>();
        t.target_prompt = j.at("target_prompt").get<std::string>();
        t.target_answer = j.at("target_answer").get<std::string>();
        verify_patch_tuple(t);
        out.push_back(std::move(t));
    }
    return out;
}

void write_kb_json(const std::string& path, const FileHeader& header, const FactKB& kb) {
    auto f = open_out(path);
    f << header_json(header).dump() << '\n';
    json rels = json::array();
    for (const auto& r : kb.relations)
        rels.push_back({{"name", r.name}, {"statement", r.statement}, {"query", r.query}});
    json triples = json::array();
    for (const auto& t : kb.triples)
        triples.push_back({{"s", t.subject}, {"r", t.relation}, {"o", t.object}});
    json pools = json::object();
    for (const auto& [name, pool] : kb.answer_pools) pools[name] = pool;
    json j{{"relations", rels},
           {"triples", triples},
           {"answer_pools", pools},
           {"countries", kb.countries},
           {"cities", kb.cities}};
    f << j.dump() << '\n';
}

FactKB read_kb_json(const std::string& path, FileHeader* header) {
    auto f = open_in(path);
    FileHeader h = read_header(f, path);
    if (header) *header = h;
    std::string line;
    if (!std::getline(f, line)) fail_schema("missing KB body in " + path);
    json j = parse_line(line, path);
    FactKB kb;
    for (const auto& r : j.at("relations"))
        kb.relations.push_back({r.at("name").get<std::string>(), r.at("statement").get<std::string>(),
                                r.at("query").get<std::string>()});
    for (const auto& t : j.at("triples"))
        kb.triples.push_back({t.at("s").get<std::string>(), t.at("r").get<std::string>(),
                              t.at("o").get<std::string>()});
    for (auto it = j.at("answer_pools").begin(); it != j.at("answer_pools").end(); ++it)
        kb.answer_pools[it.key()] = it.value().get<std::vector<std::string>>();
    kb.countries = j.value("countries", std::vector<std::string>{});
    kb.cities = j.value("cities", std::vector<std::string>{});
    return kb;
}

}  // namespace ccs
