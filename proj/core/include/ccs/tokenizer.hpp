#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace ccs {

using TokenId = int32_t;

// Word-level tokenizer over a closed vocabulary. Prompts are built from
// whitespace-separated tokens; every answer is exactly one token, so greedy
// decoding of an answer is a single argmax.
class Tokenizer {
public:
    static constexpr TokenId kPad = 0;

    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> tokens);

    // Deterministic vocabulary: pad + separator first, then the given words
    // (deduplicated, order of first appearance).
    static Tokenizer build(const std::vector<std::string>& words);

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    bool contains(const std::string& word) const { return ids_.count(word) != 0; }
    TokenId id(const std::string& word) const;              // throws schema error on OOV
    const std::string& token(TokenId id) const;

    // Splits on any whitespace run; "\n" in text is a separator, not a token.
    std::vector<TokenId> encode(const std::string& text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    TokenId newline_id() const { return newline_id_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
    TokenId newline_id_ = 1;
};

}  // namespace ccs
