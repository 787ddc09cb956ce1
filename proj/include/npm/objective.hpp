#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "npm/corpus.hpp"
#include "npm/encoder.hpp"
#include "npm/masking.hpp"
#include "npm/types.hpp"

namespace npm {

struct BatchPosition {
    std::size_t seq;
    std::size_t offset;
};

struct PosNegSets {
    std::vector<BatchPosition> start_pos, start_neg, end_pos, end_neg;
};

// Start positives: positions m in other sequences where the |g|-gram starting
// at m equals g; end positives analogously; negatives are the complements
// over the other sequences' valid positions. Throws if start_pos is empty
// (the masking module guarantees an in-batch occurrence).
PosNegSets collect_pos_neg(const Batch& batch, const MaskedSpan& span);

struct SpanLoss {
    MaskedSpan span;
    Scalar start_loss = 0;
    Scalar end_loss = 0;
};

struct LossReport {
    Scalar total = 0;  // sum over spans
    std::vector<SpanLoss> per_span;
    std::size_t n_spans = 0;
    Scalar mean() const { return n_spans ? total / static_cast<Scalar>(n_spans) : 0; }
};

// Per-position gradients of the loss w.r.t. the encodings of both views.
struct EncodingGrads {
    std::vector<Matrix> masked;
    std::vector<Matrix> unmasked;
};

// Phrase contrastive loss over a batch. `masked` / `unmasked` hold one
// encoding matrix per sequence (rows = positions); `masked_seqs` carries the
// mask positions produced by apply_mask_batch.
LossReport phrase_loss(const Batch& batch, const std::vector<MaskedSequence>& masked_seqs,
                       const std::vector<Matrix>& masked,
                       const std::vector<Matrix>& unmasked, const MaskPlan& plan,
                       EncodingGrads* grads = nullptr);

// Token-level contrastive loss (single mode): positives are equal tokens in
// other sequences, negatives the rest.
LossReport single_loss(const Batch& batch, const std::vector<MaskedSequence>& masked_seqs,
                       const std::vector<Matrix>& masked,
                       const std::vector<Matrix>& unmasked, const MaskPlan& plan,
                       EncodingGrads* grads = nullptr);

struct TrainConfig {
    Scalar learning_rate = 3e-5;
    Scalar weight_decay = 0.01;
    std::size_t warmup_steps = 4000;
    std::size_t total_steps = 10000;
    std::size_t batch_size = 8;
    std::size_t max_seq_len = 256;
    std::uint64_t seed = 0;
    Scalar adam_beta1 = 0.9;
    Scalar adam_beta2 = 0.999;
    Scalar adam_eps = 1e-8;
    MaskSampleConfig masking;
};

struct StepRecord {
    std::size_t step;
    Scalar loss;  // mean over spans
    std::size_t n_spans;
};

struct TrainResult {
    EncoderParams params;
    std::vector<StepRecord> trajectory;
};

// Adam with linear warmup then constant rate; decoupled weight decay.
// Aborts with the step index on a non-finite loss.
TrainResult train(const std::vector<Document>& corpus, EncoderParams params,
                  const TrainConfig& config, MaskMode mode,
                  const std::function<void(const StepRecord&)>& on_step = nullptr);

void write_trajectory_csv(const std::vector<StepRecord>& traj, const std::string& path);

}  // namespace npm
