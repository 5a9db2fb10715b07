#include "ccs/tokenizer.hpp"

#include <sstream>

#include "ccs/common.hpp"

namespace ccs {

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (size_t i = 0; i < tokens_.size(); ++i) {
        if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
            fail_schema("duplicate token in vocabulary: " + tokens_[i]);
        }
        if (tokens_[i] == "\n") newline_id_ = static_cast<TokenId>(i);
    }
}

Tokenizer Tokenizer::build(const std::vector<std::string>& words) {
    std::vector<std::string> toks;
    toks.reserve(words.size() + 2);
    toks.push_back("<pad>");
    toks.push_back("\n");
    std::unordered_map<std::string, bool> seen;
    seen["<pad>"] = true;
    seen["\n"] = true;
    for (const auto& w : words) {
        if (w.empty()) continue;
        if (seen.emplace(w, true).second) toks.push_back(w);
    }
    return Tokenizer(std::move(toks));
}

TokenId Tokenizer::id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) fail_schema("token not in closed vocabulary: '" + word + "'");
    return it->second;
}

const std::string& Tokenizer::token(TokenId tid) const {
    if (tid < 0 || tid >= size()) fail_schema("token id out of range: " + std::to_string(tid));
    return tokens_[static_cast<size_t>(tid)];
}

std::vector<TokenId> Tokenizer::encode(const std::string& text) const {
    std::vector<TokenId> out;
    std::istringstream ss(text);
    std::string word;
    while (ss >> word) out.push_back(id(word));
    return out;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

}  // namespace ccs
