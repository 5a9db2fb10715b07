#include <doctest.h>

#include <cstdio>
#include <unistd.h>
#include <filesystem>
#include <fstream>

#include "ccs/checkpoint.hpp"
#include "ccs/common.hpp"
#include "ccs/jsonl.hpp"
#include "helpers.hpp"

using namespace ccs;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("ccs_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

}  // namespace

TEST_CASE("pairs jsonl round trip with header") {
    TempDir td;
    ArithmeticSpec spec;
    auto pairs = gen_arithmetic(spec, 50, 77);
    FileHeader h;
    h.seed = 77;
    h.generator_config = R"({"kind":"arithmetic","n":50})";
    std::string path = td.file("pairs.jsonl");
    write_pairs_jsonl(path, h, pairs);

    FileHeader back;
    auto loaded = read_pairs_jsonl(path, &back);
    CHECK(back.schema_version == kSchemaVersion);
    CHECK(back.seed == 77);
    CHECK(back.config_hash == hash_hex(h.generator_config));
    REQUIRE(loaded.size() == pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        CHECK(loaded[i].id == pairs[i].id);
        CHECK(loaded[i].query == pairs[i].query);
        CHECK(loaded[i].context == pairs[i].context);
        CHECK(loaded[i].prior_answer == pairs[i].prior_answer);
        CHECK(loaded[i].context_answer == pairs[i].context_answer);
        CHECK(loaded[i].kind == pairs[i].kind);
    }
}

TEST_CASE("jsonl rejects files without a header") {
    TempDir td;
    std::string path = td.file("bad.jsonl");
    {
        std::ofstream f(path);
        f << R"({"id":"x"})" << "\n";
    }
    CHECK_THROWS_AS(read_pairs_jsonl(path), Error);
    CHECK_THROWS_AS(read_pairs_jsonl(td.file("missing.jsonl")), Error);
}

TEST_CASE("patch tuples and prompts round trip") {
    TempDir td;
    ArithmeticSpec spec;
    auto pairs = gen_arithmetic(spec, 60, 78);
    auto test = split(pairs, 0.4, 1).test;
    auto tuples = build_patch_dataset(test, PatchSetup::w_c2p, IntentFormat::weight, 2, spec);
    FileHeader h;
    h.generator_config = "{}";
    write_patch_jsonl(td.file("t.jsonl"), h, tuples);
    auto back = read_patch_jsonl(td.file("t.jsonl"));
    REQUIRE(back.size() == tuples.size());
    CHECK(back[0].setup == PatchSetup::w_c2p);
    CHECK(back[0].source_prompt == tuples[0].source_prompt);

    std::vector<PromptExample> prompts;
    for (const auto& p : test) prompts.push_back(format_prompt(p, Intent::ctx, IntentFormat::weight));
    write_prompts_jsonl(td.file("p.jsonl"), h, prompts);
    auto back_p = read_prompts_jsonl(td.file("p.jsonl"));
    REQUIRE(back_p.size() == prompts.size());
    CHECK(back_p[3].prompt == prompts[3].prompt);
    CHECK(back_p[3].intent == Intent::ctx);
}

TEST_CASE("kb json round trip") {
    TempDir td;
    FactKB kb = FactKB::synth(6, 9);
    FileHeader h;
    h.generator_config = "{}";
    write_kb_json(td.file("kb.json"), h, kb);
    FactKB back = read_kb_json(td.file("kb.json"));
    CHECK(back.triples.size() == kb.triples.size());
    CHECK(back.relations.size() == kb.relations.size());
    CHECK(back.countries == kb.countries);
    CHECK(back.true_object(kb.countries[0], "capital") ==
          kb.true_object(kb.countries[0], "capital"));
}

TEST_CASE("checkpoint round trip preserves weights and vocabulary") {
    TempDir td;
    auto w = ccs::testing::TestWorld::make(3);
    std::string path = td.file("model.ckpt");
    save_checkpoint(path, w.model);
    TinyModel back = load_checkpoint(path);

    CHECK(back.config.n_layers == w.model.config.n_layers);
    CHECK(back.config.vocab_size == w.model.config.vocab_size);
    CHECK(back.tokenizer.tokens() == w.model.tokenizer.tokens());

    auto prompt = w.tok.encode("Query: The capital of " + w.kb.countries[0] + " is Answer:");
    auto a = forward(w.model, prompt).logits;
    auto b = forward(back, prompt).logits;
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("checkpoint loader validates shapes") {
    TempDir td;
    auto w = ccs::testing::TestWorld::make(4);
    std::string path = td.file("model.ckpt");
    save_checkpoint(path, w.model);

    // Corrupt the manifest: claim a different d_model so shapes mismatch.
    std::ifstream in(path, std::ios::binary);
    uint32_t mlen;
    in.read(reinterpret_cast<char*>(&mlen), sizeof mlen);
    std::string manifest(mlen, '\0');
    in.read(manifest.data(), mlen);
    std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    auto pos = manifest.find("\"d_model\":32");
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, 12, "\"d_model\":64");
    std::ofstream out(path, std::ios::binary);
    uint32_t nlen = static_cast<uint32_t>(manifest.size());
    out.write(reinterpret_cast<const char*>(&nlen), sizeof nlen);
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    out.write(rest.data(), static_cast<std::streamsize>(rest.size()));
    out.close();

    CHECK_THROWS_AS(load_checkpoint(path), Error);
}
