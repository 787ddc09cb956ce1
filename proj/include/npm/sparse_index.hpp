#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "npm/corpus.hpp"
#include "npm/types.hpp"

namespace npm {

struct Passage {
    std::uint32_t passage_id = 0;
    std::string doc_id;
    std::uint64_t start_pos = 0;  // global corpus position of the first token
    std::uint64_t length = 0;
};

struct Posting {
    std::uint32_t passage_id;
    std::uint32_t tf;
};

/// Okapi BM25 over fixed-length passages tiling each document.
class Bm25Index {
public:
    static Bm25Index build(const std::vector<Document>& corpus, std::size_t passage_len,
                           double k1 = 0.9, double b = 0.4);

    double score(const TokenSeq& query_terms, std::uint32_t passage_id) const;

    // BM25-ranked top-n with positive score, ties by ascending passage_id.
    std::vector<std::pair<std::uint32_t, double>> top_passages(const TokenSeq& query_terms,
                                                               std::size_t n = 3) const;

    const std::vector<Passage>& passages() const { return passages_; }
    double k1() const { return k1_; }
    double b() const { return b_; }
    double avg_len() const { return avg_len_; }
    double idf(TokenId term) const;

    void save(const std::string& path_prefix) const;  // .json + .post
    static Bm25Index load(const std::string& path_prefix);

private:
    std::vector<Passage> passages_;
    std::unordered_map<TokenId, std::vector<Posting>> postings_;
    double k1_ = 0.9, b_ = 0.4;
    double avg_len_ = 0;
};

// Union of the passages' token positions; throws if passages overlap.
std::unordered_set<std::uint64_t> allowed_positions(const std::vector<Passage>& passages);

// Query formulation for knowledge queries: all non-reserved tokens.
TokenSeq bm25_query_terms(const TokenSeq& query);

}  // namespace npm
