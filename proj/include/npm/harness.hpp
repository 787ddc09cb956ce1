#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "npm/corpus.hpp"
#include "npm/dense_index.hpp"
#include "npm/encoder.hpp"
#include "npm/types.hpp"

namespace npm {

struct EvalExample {
    std::string query;  // contains one [MASK] placeholder
    std::vector<std::string> answers;
    std::string label;  // optional, for closed-set data
};

// Lowercase, collapse whitespace, strip leading/trailing punctuation.
std::string normalize_answer(const std::string& s);

int exact_match(const std::string& prediction, const std::vector<std::string>& answers);

// Buckets are n-gram length classes {1, 2, 3, 4+} of the shortest answer.
std::size_t answer_bucket(const EvalExample& ex, const Vocab& vocab);

struct PerExample {
    std::string query;
    std::string prediction;
    int em = 0;
    std::size_t bucket = 0;
};

struct EvalReport {
    std::array<double, 4> per_bucket_em{};   // micro EM within each bucket
    std::array<std::size_t, 4> bucket_counts{};
    double bucket_avg_em = 0;  // unweighted mean over non-empty buckets
    double overall_em = 0;     // micro average over all examples
    std::vector<PerExample> examples;
};

using Predictor = std::function<std::string(const TokenSeq& query)>;

// JSON-lines {"query": ..., "answers": [...], "label": ...}. Throws naming
// the line when an example lacks the [MASK] placeholder.
std::vector<EvalExample> load_dataset_jsonl(const std::string& path,
                                            std::size_t limit = 0);

EvalReport evaluate(const std::vector<EvalExample>& dataset, const Vocab& vocab,
                    const Predictor& predictor);

struct SwapConfig {
    std::size_t max_seq_len = 256;
    std::size_t k = 4096;
    std::size_t l_max = 10;
    SearchMode search = SearchMode::kExact;
};

struct SwapReport {
    EvalReport changed_old, changed_new;
    EvalReport unchanged_old, unchanged_new;
};

// Evaluates both datasets against indexes over both corpora; the encoder is
// never touched.
SwapReport corpus_swap_experiment(const EncoderParams& encoder, const Vocab& vocab,
                                  const std::vector<Document>& corpus_old,
                                  const std::vector<Document>& corpus_new,
                                  const std::vector<EvalExample>& dataset_changed,
                                  const std::vector<EvalExample>& dataset_unchanged,
                                  const SwapConfig& config);

struct ProbeReport {
    EvalReport eval;
    std::size_t closure_violations = 0;  // predictions absent from the reference corpus
};

// Verifies each probe answer is absent from the training corpus and present
// in the reference corpus, then reports phrase-prediction EM and output-space
// closure over the reference corpus.
ProbeReport unseen_token_probe(const EncoderParams& encoder, const Vocab& vocab,
                               const std::vector<Document>& training_corpus,
                               const std::vector<Document>& reference_corpus,
                               const std::vector<EvalExample>& probes,
                               const SwapConfig& config);

}  // namespace npm
