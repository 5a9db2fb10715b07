#pragma once

#include <string>
#include <vector>

#include "ccs/common.hpp"
#include "ccs/data.hpp"

namespace ccs {

// Every dataset file starts with one header object
// {"schema_version":..,"seed":..,"generator_config":..,"config_hash":..}
// followed by one JSON object per line.
struct FileHeader {
    int schema_version = kSchemaVersion;
    uint64_t seed = 0;
    std::string generator_config;  // compact JSON echo of the producing config
    std::string config_hash;       // fnv1a of generator_config
};

void write_pairs_jsonl(const std::string& path, const FileHeader& header,
                       const std::vector<QueryContextPair>& pairs);
std::vector<QueryContextPair> read_pairs_jsonl(const std::string& path, FileHeader* header = nullptr);

void write_prompts_jsonl(const std::string& path, const FileHeader& header,
                         const std::vector<PromptExample>& prompts);
std::vector<PromptExample> read_prompts_jsonl(const std::string& path, FileHeader* header = nullptr);

void write_patch_jsonl(const std::string& path, const FileHeader& header,
                       const std::vector<PatchTuple>& tuples);
std::vector<PatchTuple> read_patch_jsonl(const std::string& path, FileHeader* header = nullptr);

void write_kb_json(const std::string& path, const FileHeader& header, const FactKB& kb);
FactKB read_kb_json(const std::string& path, FileHeader* header = nullptr);

}  // namespace ccs
