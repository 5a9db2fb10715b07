#include "ccs/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ccs/common.hpp"

namespace ccs {

using nlohmann::json;

namespace {

json config_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},   {"d_model", c.d_model},
                {"n_heads", c.n_heads},     {"d_mlp", c.d_mlp},
                {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                {"norm_eps", c.norm_eps},   {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.norm_eps = j.at("norm_eps").get<float>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const TinyModel& model) {
    auto tensors = const_cast<TinyModel&>(model).named_tensors();
    json manifest;
    manifest["schema_version"] = kSchemaVersion;
    manifest["config"] = config_json(model.config);
    manifest["vocab"] = model.tokenizer.tokens();
    json tlist = json::array();
    uint64_t offset = 0;
    for (const auto& t : tensors) {
        tlist.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.size * sizeof(float);
    }
    manifest["tensors"] = tlist;
    std::string mtext = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) fail_schema("cannot open checkpoint for writing: " + path);
    uint32_t mlen = static_cast<uint32_t>(mtext.size());
    f.write(reinterpret_cast<const char*>(&mlen), sizeof mlen);
    f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& t : tensors)
        f.write(reinterpret_cast<const char*>(t.cdata),
                static_cast<std::streamsize>(t.size * sizeof(float)));
    if (!f) fail_schema("checkpoint write failed: " + path);
}

TinyModel load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail_schema("cannot open checkpoint: " + path);
    uint32_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), sizeof mlen);
    if (!f || mlen == 0 || mlen > (1u << 26)) fail_schema("corrupt checkpoint manifest: " + path);
    std::string mtext(mlen, '\0');
    f.read(mtext.data(), mlen);
    json manifest = json::parse(mtext, nullptr, false);
    if (manifest.is_discarded()) fail_schema("corrupt checkpoint manifest: " + path);
    if (manifest.at("schema_version").get<int>() != kSchemaVersion)
        fail_schema("unsupported checkpoint schema_version");

    ModelConfig cfg = config_from_json(manifest.at("config"));
    Tokenizer tok(manifest.at("vocab").get<std::vector<std::string>>());
    if (tok.size() != cfg.vocab_size)
        fail_schema("checkpoint vocab size does not match config");
    TinyModel model = TinyModel::init(cfg, std::move(tok));

    auto tensors = model.named_tensors();
    const auto& tlist = manifest.at("tensors");
    if (tlist.size() != tensors.size()) fail_schema("checkpoint tensor count mismatch");
    for (size_t i = 0; i < tensors.size(); ++i) {
        const auto& entry = tlist[i];
        if (entry.at("name").get<std::string>() != tensors[i].name)
            fail_schema("checkpoint tensor order mismatch at " + tensors[i].name);
        auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != tensors[i].shape)
            fail_schema("checkpoint shape mismatch for " + tensors[i].name);
        f.read(reinterpret_cast<char*>(tensors[i].data),
               static_cast<std::streamsize>(tensors[i].size * sizeof(float)));
        if (!f) fail_schema("checkpoint tensor data truncated at " + tensors[i].name);
    }
    return model;
}

}  // namespace ccs
