#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "npm/types.hpp"
#include "npm/vocab.hpp"

namespace npm {

struct Document {
    std::string doc_id;
    TokenSeq token_ids;
};

struct Sequence {
    std::string doc_id;
    std::uint32_t seq_index = 0;  // ordinal within the document
    TokenSeq token_ids;
};

struct Batch {
    std::vector<Sequence> sequences;
    std::vector<std::string> source_doc_ids;
};

// Reads JSON-lines {"id": ..., "text": ...} and encodes with the vocab.
std::vector<Document> load_corpus_jsonl(const std::string& path, const Vocab& vocab);

// Reads the raw text fields only (for vocab training).
std::vector<std::string> load_corpus_texts(const std::string& path);

// Greedy left-to-right chunking; concatenating the output reproduces the
// document exactly.
std::vector<Sequence> segment(const Document& doc, std::size_t max_seq_len);

// Document-grouped batches: documents contributing at least batch_size
// sequences yield their own batches; leftovers and short documents are pooled
// in corpus order. Throws if the corpus yields fewer than batch_size
// sequences in total.
std::vector<Batch> make_batches(const std::vector<Document>& corpus,
                                std::size_t batch_size, std::size_t max_seq_len,
                                std::uint64_t rng_seed);

}  // namespace npm
