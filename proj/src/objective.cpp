#include "npm/objective.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace npm {

namespace {

bool ngram_at(const TokenSeq& ids, std::size_t m, const TokenSeq& g) {
    if (m + g.size() > ids.size()) return false;
    return std::equal(g.begin(), g.end(), ids.begin() + m);
}

}  // namespace

PosNegSets collect_pos_neg(const Batch& batch, const MaskedSpan& span) {
    const TokenSeq& g = span.original;
    const std::size_t n = g.size();
    PosNegSets sets;
    for (std::size_t j = 0; j < batch.sequences.size(); ++j) {
        if (j == span.batch_seq_index) continue;
        const auto& ids = batch.sequences[j].token_ids;
        if (ids.size() < n) continue;
        for (std::size_t m = 0; m + n <= ids.size(); ++m) {
            if (ngram_at(ids, m, g))
                sets.start_pos.push_back({j, m});
            else
                sets.start_neg.push_back({j, m});
        }
        for (std::size_t m = n - 1; m < ids.size(); ++m) {
            if (ngram_at(ids, m - n + 1, g))
                sets.end_pos.push_back({j, m});
            else
                sets.end_neg.push_back({j, m});
        }
    }
    if (sets.start_pos.empty())
        throw std::runtime_error("masking contract violated: no in-batch positive");
    return sets;
}

namespace {

// One side of the contrastive objective:
//   -log( sum_pos exp(sim(q, y)) / sum_all exp(sim(q, y)) ),
// stabilized by max subtraction. Optionally accumulates d/dq into grad_q and
// d/dy into the unmasked-encoding gradients.
Scalar side_loss(const Vector& q, const std::vector<BatchPosition>& pos,
                 const std::vector<BatchPosition>& neg,
                 const std::vector<Matrix>& unmasked, Scalar inv_sqrt_h,
                 Vector* grad_q, std::vector<Matrix>* grad_unmasked) {
    const std::size_t np = pos.size(), nn = neg.size();
    std::vector<Scalar> s(np + nn);
    for (std::size_t i = 0; i < np; ++i)
        s[i] = unmasked[pos[i].seq].row(pos[i].offset).dot(q.transpose()) * inv_sqrt_h;
    for (std::size_t i = 0; i < nn; ++i)
        s[np + i] = unmasked[neg[i].seq].row(neg[i].offset).dot(q.transpose()) * inv_sqrt_h;

    Scalar max_all = *std::max_element(s.begin(), s.end());
    Scalar max_pos = *std::max_element(s.begin(), s.begin() + np);
    Scalar sum_all = 0, sum_pos = 0;
    for (std::size_t i = 0; i < s.size(); ++i) sum_all += std::exp(s[i] - max_all);
    for (std::size_t i = 0; i < np; ++i) sum_pos += std::exp(s[i] - max_pos);
    Scalar lse_all = max_all + std::log(sum_all);
    Scalar lse_pos = max_pos + std::log(sum_pos);
    Scalar loss = lse_all - lse_pos;

    if (grad_q) {
        auto at = [&](std::size_t i) -> const BatchPosition& {
            return i < np ? pos[i] : neg[i - np];
        };
        for (std::size_t i = 0; i < s.size(); ++i) {
            Scalar ds = std::exp(s[i] - lse_all);
            if (i < np) ds -= std::exp(s[i] - lse_pos);
            if (ds == 0) continue;
            const BatchPosition& p = at(i);
            const auto y = unmasked[p.seq].row(p.offset);
            *grad_q += (ds * inv_sqrt_h) * y.transpose();
            (*grad_unmasked)[p.seq].row(p.offset) += (ds * inv_sqrt_h) * q.transpose();
        }
    }
    return loss;
}

EncodingGrads make_grads(const std::vector<Matrix>& masked,
                         const std::vector<Matrix>& unmasked) {
    EncodingGrads g;
    for (const auto& m : masked) g.masked.push_back(Matrix::Zero(m.rows(), m.cols()));
    for (const auto& m : unmasked) g.unmasked.push_back(Matrix::Zero(m.rows(), m.cols()));
    return g;
}

}  // namespace

LossReport phrase_loss(const Batch& batch, const std::vector<MaskedSequence>& masked_seqs,
                       const std::vector<Matrix>& masked,
                       const std::vector<Matrix>& unmasked, const MaskPlan& plan,
                       EncodingGrads* grads) {
    if (plan.mode != MaskMode::kPhrase)
        throw std::invalid_argument("phrase_loss requires a phrase-mode plan");
    if (grads) *grads = make_grads(masked, unmasked);
    const Scalar inv_sqrt_h =
        masked.empty() ? 1 : 1.0 / std::sqrt(static_cast<Scalar>(masked[0].cols()));

    LossReport report;
    std::vector<std::size_t> order(batch.sequences.size(), 0);
    for (const auto& span : plan.spans) {
        std::size_t i = span.batch_seq_index;
        std::size_t mask_pos = masked_seqs[i].span_positions[order[i]++];
        Vector q_start = masked[i].row(mask_pos).transpose();
        Vector q_end = masked[i].row(mask_pos + 1).transpose();

        PosNegSets sets = collect_pos_neg(batch, span);
        Vector gs = Vector::Zero(q_start.size()), ge = Vector::Zero(q_end.size());
        SpanLoss sl;
        sl.span = span;
        sl.start_loss = side_loss(q_start, sets.start_pos, sets.start_neg, unmasked,
                                  inv_sqrt_h, grads ? &gs : nullptr,
                                  grads ? &grads->unmasked : nullptr);
        sl.end_loss = side_loss(q_end, sets.end_pos, sets.end_neg, unmasked, inv_sqrt_h,
                                grads ? &ge : nullptr, grads ? &grads->unmasked : nullptr);
        if (grads) {
            grads->masked[i].row(mask_pos) += gs.transpose();
            grads->masked[i].row(mask_pos + 1) += ge.transpose();
        }
        report.total += sl.start_loss + sl.end_loss;
        report.per_span.push_back(std::move(sl));
    }
    report.n_spans = report.per_span.size();
    return report;
}

LossReport single_loss(const Batch& batch, const std::vector<MaskedSequence>& masked_seqs,
                       const std::vector<Matrix>& masked,
                       const std::vector<Matrix>& unmasked, const MaskPlan& plan,
                       EncodingGrads* grads) {
    if (plan.mode != MaskMode::kSingle)
        throw std::invalid_argument("single_loss requires a single-mode plan");
    if (grads) *grads = make_grads(masked, unmasked);
    const Scalar inv_sqrt_h =
        masked.empty() ? 1 : 1.0 / std::sqrt(static_cast<Scalar>(masked[0].cols()));

    LossReport report;
    std::vector<std::size_t> order(batch.sequences.size(), 0);
    for (const auto& span : plan.spans) {
        std::size_t i = span.batch_seq_index;
        std::size_t base = masked_seqs[i].span_positions[order[i]++];
        for (std::size_t t = 0; t < span.length; ++t) {
            TokenId target = span.original[t];
            std::vector<BatchPosition> pos, neg;
            for (std::size_t j = 0; j < batch.sequences.size(); ++j) {
                if (j == i) continue;
                const auto& ids = batch.sequences[j].token_ids;
                for (std::size_t m = 0; m < ids.size(); ++m)
                    (ids[m] == target ? pos : neg).push_back({j, m});
            }
            if (pos.empty())
                throw std::runtime_error("masking contract violated: no in-batch positive");

            Vector q = masked[i].row(base + t).transpose();
            Vector gq = Vector::Zero(q.size());
            Scalar loss = side_loss(q, pos, neg, unmasked, inv_sqrt_h,
                                    grads ? &gq : nullptr,
                                    grads ? &grads->unmasked : nullptr);
            if (grads) grads->masked[i].row(base + t) += gq.transpose();

            SpanLoss sl;
            sl.span.batch_seq_index = i;
            sl.span.start = span.start + t;
            sl.span.length = 1;
            sl.span.original = {target};
            sl.start_loss = loss;
            report.total += loss;
            report.per_span.push_back(std::move(sl));
        }
    }
    report.n_spans = report.per_span.size();
    return report;
}

TrainResult train(const std::vector<Document>& corpus, EncoderParams params,
                  const TrainConfig& config, MaskMode mode,
                  const std::function<void(const StepRecord&)>& on_step) {
    // Documents are re-pooled every epoch: with a fixed grouping the in-batch
    // contrastive loss only has to separate sequences that share a batch, and
    // the encoder can collapse representations across batches.
    std::vector<Document> docs = corpus;
    std::vector<Batch> batches;
    std::size_t cursor = 0, epoch = 0;

    const std::size_t n_params = param_count(params);
    Vector m = Vector::Zero(n_params), v = Vector::Zero(n_params);

    TrainResult result;
    std::size_t adam_t = 0;
    for (std::size_t step = 0; step < config.total_steps; ++step) {
        if (cursor == batches.size()) {
            std::mt19937_64 erng(config.seed ^ (0xD1B54A32D192ED03ULL * (epoch + 1)));
            std::shuffle(docs.begin(), docs.end(), erng);
            batches = make_batches(docs, config.batch_size, config.max_seq_len,
                                   config.seed ^ epoch);
            cursor = 0;
            ++epoch;
        }
        const Batch& batch = batches[cursor++];
        std::uint64_t step_seed = config.seed ^ (0x9E3779B97F4A7C15ULL * (step + 1));

        auto candidates = find_candidate_spans(batch, config.masking.max_len);
        MaskPlan plan = sample_mask_plan(batch, candidates, step_seed, mode, config.masking);
        auto masked_seqs = apply_mask_batch(batch, plan);

        std::vector<ForwardTrace> masked_tr, unmasked_tr;
        std::vector<Matrix> masked_enc, unmasked_enc;
        for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
            masked_tr.push_back(forward_trace(params, masked_seqs[i].tokens));
            masked_enc.push_back(masked_tr.back().output());
            unmasked_tr.push_back(forward_trace(params, batch.sequences[i].token_ids));
            unmasked_enc.push_back(unmasked_tr.back().output());
        }

        EncodingGrads enc_grads;
        LossReport report =
            mode == MaskMode::kPhrase
                ? phrase_loss(batch, masked_seqs, masked_enc, unmasked_enc, plan, &enc_grads)
                : single_loss(batch, masked_seqs, masked_enc, unmasked_enc, plan, &enc_grads);

        if (!std::isfinite(report.total))
            throw std::runtime_error("non-finite loss at step " + std::to_string(step));

        StepRecord rec{step, report.mean(), report.n_spans};
        result.trajectory.push_back(rec);
        if (on_step) on_step(rec);
        if (report.n_spans == 0) continue;

        // Mean loss over spans drives the update.
        Scalar scale = 1.0 / static_cast<Scalar>(report.n_spans);
        EncoderParams param_grads = zeros_like(params);
        for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
            backward(params, masked_tr[i], (enc_grads.masked[i] * scale).eval(), param_grads);
            backward(params, unmasked_tr[i], (enc_grads.unmasked[i] * scale).eval(), param_grads);
        }

        ++adam_t;
        Scalar lr = config.learning_rate;
        if (config.warmup_steps > 0)
            lr *= std::min<Scalar>(1.0, static_cast<Scalar>(step + 1) /
                                            static_cast<Scalar>(config.warmup_steps));
        Vector g = flatten(param_grads);
        Vector p = flatten(params);
        m = config.adam_beta1 * m + (1 - config.adam_beta1) * g;
        v = (config.adam_beta2 * v.array() + (1 - config.adam_beta2) * g.array().square())
                .matrix();
        Scalar bc1 = 1 - std::pow(config.adam_beta1, static_cast<Scalar>(adam_t));
        Scalar bc2 = 1 - std::pow(config.adam_beta2, static_cast<Scalar>(adam_t));
        p.array() -= lr * config.weight_decay * p.array();
        p.array() -= lr * (m.array() / bc1) /
                     ((v.array() / bc2).sqrt() + config.adam_eps);
        unflatten(p, params);
    }
    result.params = std::move(params);
    return result;
}

void write_trajectory_csv(const std::vector<StepRecord>& traj, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "step,loss,n_spans\n";
    for (const auto& r : traj) f << r.step << ',' << r.loss << ',' << r.n_spans << '\n';
}

}  // namespace npm
