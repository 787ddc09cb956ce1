#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "npm/corpus.hpp"
#include "npm/encoder.hpp"
#include "npm/types.hpp"

namespace npm {

// Scaled inner product: (a . b) / sqrt(h).
Scalar sim(const Vector& a, const Vector& b);

enum class SearchMode : std::uint8_t { kExact = 0, kHnsw = 1 };

struct HnswParams {
    std::size_t M = 16;
    std::size_t ef_construction = 100;
    std::size_t ef_search = 128;
};

struct TokenEntry {
    std::uint64_t corpus_pos = 0;
    TokenId token_id = 0;
    std::uint32_t seq_ref = 0;  // index into the sequence table
    std::uint32_t offset = 0;   // token offset within the sequence
};

struct SequenceRef {
    std::string doc_id;
    std::uint32_t seq_index = 0;
    std::uint64_t start_pos = 0;  // corpus_pos of the first token
    std::uint64_t length = 0;
};

struct Neighbor {
    std::uint64_t corpus_pos = 0;
    Scalar score = 0;  // scaled inner product
};

// Hierarchical navigable small-world graph over the stored vectors,
// maximizing inner product.
struct HnswGraph {
    std::size_t entry_point = 0;
    int max_level = -1;
    // neighbors[node][level] -> adjacency list
    std::vector<std::vector<std::vector<std::uint64_t>>> neighbors;

    bool empty() const { return max_level < 0; }
};

class DenseIndex {
public:
    std::size_t size() const { return entries_.size(); }
    std::uint32_t h() const { return h_; }
    SearchMode mode() const { return mode_; }
    const HnswParams& hnsw_params() const { return hnsw_params_; }
    const std::vector<TokenEntry>& entries() const { return entries_; }
    const std::vector<SequenceRef>& sequences() const { return seqs_; }
    const HnswGraph& graph() const { return graph_; }
    const Matrix& vectors() const { return vectors_; }

    Vector vector_at(std::uint64_t pos) const { return vectors_.row(pos).transpose(); }
    TokenId token_at(std::uint64_t pos) const { return entries_[pos].token_id; }
    const SequenceRef& sequence_of(std::uint64_t pos) const {
        return seqs_[entries_[pos].seq_ref];
    }

    // Maps every corpus token to a contextual vector; builds the HNSW graph
    // when mode is kHnsw. Deterministic under seed.
    static DenseIndex build(const std::vector<Document>& corpus,
                            const EncoderParams& encoder, std::size_t max_seq_len,
                            SearchMode mode, const HnswParams& hnsw = {},
                            std::uint64_t seed = 0);

    // Top-k by scaled inner product, descending score, ties by ascending
    // corpus_pos. Exact mode scans; hnsw mode searches the graph with
    // ef = max(ef_search, k).
    std::vector<Neighbor> topk(const Vector& query, std::size_t k) const;

    // Exact top-k restricted to the allowed positions.
    std::vector<Neighbor> topk_restricted(const Vector& query, std::size_t k,
                                          const std::unordered_set<std::uint64_t>& allowed) const;

    void save(const std::string& path) const;
    static DenseIndex load(const std::string& path);

private:
    std::uint32_t h_ = 0;
    SearchMode mode_ = SearchMode::kExact;
    HnswParams hnsw_params_;
    Matrix vectors_;  // N x h
    std::vector<TokenEntry> entries_;
    std::vector<SequenceRef> seqs_;
    HnswGraph graph_;

    void build_hnsw(std::uint64_t seed);
    std::vector<Neighbor> search_hnsw(const Vector& query, std::size_t k) const;
};

}  // namespace npm
