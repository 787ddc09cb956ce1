#pragma once

#include <cstdint>
#include <vector>

#include "npm/corpus.hpp"
#include "npm/types.hpp"

namespace npm {

enum class MaskMode { kPhrase, kSingle };

struct MaskedSpan {
    std::size_t batch_seq_index = 0;
    std::size_t start = 0;
    std::size_t length = 0;
    TokenSeq original;  // the replaced n-gram
};

struct MaskPlan {
    std::vector<MaskedSpan> spans;
    MaskMode mode = MaskMode::kPhrase;
};

struct SpanRef {
    std::size_t start;
    std::size_t length;
};

// Spans of length 1..max_len whose token-id sequence occurs verbatim in at
// least one other sequence of the batch. Spans containing UNK or reserved ids
// are excluded. One list per batch sequence.
std::vector<std::vector<SpanRef>> find_candidate_spans(const Batch& batch,
                                                       std::size_t max_len);

struct MaskSampleConfig {
    double ratio = 0.15;        // per-sequence budget = ceil(ratio * L)
    double p_geom = 0.5;        // span-length distribution
    std::size_t max_len = 10;
    std::size_t max_spans_per_seq = 128;
    std::size_t max_repeats_per_ngram = 10;  // per batch
};

MaskPlan sample_mask_plan(const Batch& batch,
                          const std::vector<std::vector<SpanRef>>& candidates,
                          std::uint64_t rng_seed, MaskMode mode,
                          const MaskSampleConfig& cfg = {});

struct MaskedSequence {
    TokenSeq tokens;
    // Per span of this sequence (in plan order): position of MASK_S in the
    // masked token stream (phrase mode) or of the first MASK (single mode).
    std::vector<std::size_t> span_positions;
};

// Applies the spans belonging to `seq_index` in plan order. Phrase mode
// replaces each span with [MASK_S, MASK_E]; single mode replaces each span
// token with MASK in place.
MaskedSequence apply_mask(const Sequence& seq, const MaskPlan& plan,
                          std::size_t seq_index);

std::vector<MaskedSequence> apply_mask_batch(const Batch& batch, const MaskPlan& plan);

}  // namespace npm
