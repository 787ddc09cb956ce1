#pragma once

#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "npm/dense_index.hpp"
#include "npm/encoder.hpp"
#include "npm/masking.hpp"
#include "npm/types.hpp"

namespace npm {

struct CandidateSpan {
    std::uint64_t start_pos = 0;
    std::uint64_t end_pos = 0;  // inclusive
    Scalar score = 0;           // exp sim(q_start, c_start) + exp sim(q_end, c_end)
};

struct Prediction {
    TokenSeq ngram;
    Scalar aggregate = 0;  // sum of support scores
    std::vector<CandidateSpan> support;
};

// Phrase prediction via the candidate-span approximation: top-k starts by
// q_start and top-k ends by q_end, spans of length 1..l_max extending forward
// from starts and backward from ends, clipped at sequence boundaries,
// deduplicated by (start, end), aggregated by identical ngram. Results
// descend by aggregate, ties by lexicographic ngram. When `allowed` is given,
// retrieval is restricted to it and every span must lie inside it.
std::vector<Prediction> predict_phrase(
    const DenseIndex& index, const EncoderParams& encoder, const TokenSeq& query,
    std::size_t k, std::size_t l_max,
    const std::unordered_set<std::uint64_t>* allowed = nullptr);

// Exact form: scores every span of length <= l_max in the corpus. Used as the
// oracle; refuses corpora above 50k tokens.
std::vector<Prediction> predict_phrase_exact(const DenseIndex& index,
                                             const EncoderParams& encoder,
                                             const TokenSeq& query, std::size_t l_max);

// NPM-single: aggregates exp sim over the retrieved top-k per token type;
// tokens outside the top-k contribute nothing.
std::vector<std::pair<TokenId, Scalar>> predict_single(const DenseIndex& index,
                                                       const EncoderParams& encoder,
                                                       const TokenSeq& query,
                                                       std::size_t k);

struct FuzzyVerbalizer {
    std::vector<std::string> labels;
    std::vector<std::unordered_set<TokenId>> token_sets;  // f(y), per label
};

// JSON {"labels": [...], "tokens": {label: [string, ...]}}. Tokens missing
// from the vocab are dropped; a label whose set becomes empty is an error.
FuzzyVerbalizer load_verbalizer(const std::string& path, const Vocab& vocab);

struct ClassifyResult {
    std::string label;
    std::vector<std::pair<std::string, Scalar>> scores;
};

// Closed-set scoring with temperature tau over the retrieved top-k. Single
// mode: score(y) = sum over retrieved c in f(y) of exp(sim(q, E(c)) / tau).
// Phrase mode: retrieves for q_start and q_end, unions by position, and sums
// exp(sim(q_start, E(c))/tau + sim(q_end, E(c))/tau). Ties break by label
// order.
ClassifyResult classify(const DenseIndex& index, const EncoderParams& encoder,
                        const TokenSeq& query, const FuzzyVerbalizer& verbalizer,
                        Scalar tau, std::size_t k, MaskMode mode);

}  // namespace npm
