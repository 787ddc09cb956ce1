#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "npm/types.hpp"

namespace npm {

/// Bidirectional string<->id map. Ids [0,5) are reserved (PAD, UNK, MASK,
/// MASK_S, MASK_E) and are never produced by encoding raw text.
class Vocab {
public:
    Vocab();

    // Adds a non-reserved token; returns its id. Throws on duplicates.
    TokenId add(const std::string& token);

    TokenId lookup(const std::string& token) const;  // kUnk if absent
    const std::string& token(TokenId id) const;
    std::size_t size() const { return tokens_.size(); }

    TokenSeq encode(const std::string& text) const;
    std::string decode(const TokenSeq& ids) const;

    // Encodes query text where the literal "[MASK]" maps to the MASK id.
    TokenSeq encode_query_text(const std::string& text) const;

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> lookup_;
};

// Splits on whitespace, then splits punctuation off as single-char tokens.
std::vector<std::string> tokenize(const std::string& text);

// Frequency-ranked vocab of at most max_size entries (including the five
// reserved ids), ties broken lexicographically. Throws "empty corpus" if the
// input yields no tokens.
Vocab train_vocab(const std::vector<std::string>& raw_texts, std::size_t max_size);

}  // namespace npm
