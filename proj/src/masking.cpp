#include "npm/masking.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

namespace npm {

namespace {

bool maskable(TokenId id) { return !is_reserved(id); }

TokenSeq slice(const TokenSeq& ids, std::size_t start, std::size_t len) {
    return TokenSeq(ids.begin() + start, ids.begin() + start + len);
}

}  // namespace

std::vector<std::vector<SpanRef>> find_candidate_spans(const Batch& batch,
                                                       std::size_t max_len) {
    if (batch.sequences.size() < 2)
        throw std::invalid_argument("batch must have at least 2 sequences");

    // ngram -> (number of sequences containing it, one such sequence)
    std::map<TokenSeq, std::pair<std::size_t, std::size_t>> owners;
    for (std::size_t j = 0; j < batch.sequences.size(); ++j) {
        const auto& ids = batch.sequences[j].token_ids;
        std::map<TokenSeq, bool> seen;
        for (std::size_t s = 0; s < ids.size(); ++s) {
            for (std::size_t n = 1; n <= max_len && s + n <= ids.size(); ++n) {
                if (!maskable(ids[s + n - 1])) break;
                auto key = slice(ids, s, n);
                if (seen.emplace(std::move(key), true).second) {
                    auto& o = owners[slice(ids, s, n)];
                    ++o.first;
                    o.second = j;
                }
            }
        }
    }

    std::vector<std::vector<SpanRef>> out(batch.sequences.size());
    for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
        const auto& ids = batch.sequences[i].token_ids;
        for (std::size_t s = 0; s < ids.size(); ++s) {
            for (std::size_t n = 1; n <= max_len && s + n <= ids.size(); ++n) {
                if (!maskable(ids[s + n - 1])) break;
                auto it = owners.find(slice(ids, s, n));
                if (it == owners.end()) continue;
                if (it->second.first > 1 || it->second.second != i)
                    out[i].push_back({s, n});
            }
        }
    }
    return out;
}

MaskPlan sample_mask_plan(const Batch& batch,
                          const std::vector<std::vector<SpanRef>>& candidates,
                          std::uint64_t rng_seed, MaskMode mode,
                          const MaskSampleConfig& cfg) {
    MaskPlan plan;
    plan.mode = mode;
    std::mt19937_64 rng(rng_seed);
    std::geometric_distribution<int> geom(cfg.p_geom);
    std::map<TokenSeq, std::size_t> repeats;  // per batch

    for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
        const auto& ids = batch.sequences[i].token_ids;
        if (i >= candidates.size() || candidates[i].empty()) continue;
        const std::size_t budget = static_cast<std::size_t>(
            std::ceil(cfg.ratio * static_cast<double>(ids.size())));
        std::vector<bool> used(ids.size(), false);
        std::size_t spent = 0, n_spans = 0;

        while (spent < budget && n_spans < cfg.max_spans_per_seq) {
            // Sampled lengths above max_len are resampled.
            std::size_t want = 0;
            do {
                want = static_cast<std::size_t>(geom(rng)) + 1;
            } while (want > cfg.max_len);

            // Fall back to the longest available length <= want.
            std::vector<const SpanRef*> eligible;
            for (std::size_t len = std::min(want, budget - spent); len >= 1 && eligible.empty(); --len) {
                for (const auto& c : candidates[i]) {
                    if (c.length != len) continue;
                    bool overlap = false;
                    for (std::size_t t = c.start; t < c.start + c.length; ++t)
                        if (used[t]) { overlap = true; break; }
                    if (overlap) continue;
                    auto rit = repeats.find(slice(ids, c.start, c.length));
                    if (rit != repeats.end() && rit->second >= cfg.max_repeats_per_ngram)
                        continue;
                    eligible.push_back(&c);
                }
            }
            if (eligible.empty()) break;

            std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
            const SpanRef& c = *eligible[pick(rng)];
            MaskedSpan span;
            span.batch_seq_index = i;
            span.start = c.start;
            span.length = c.length;
            span.original = slice(ids, c.start, c.length);
            ++repeats[span.original];
            for (std::size_t t = c.start; t < c.start + c.length; ++t) used[t] = true;
            spent += c.length;
            ++n_spans;
            plan.spans.push_back(std::move(span));
        }
    }
    return plan;
}

MaskedSequence apply_mask(const Sequence& seq, const MaskPlan& plan,
                          std::size_t seq_index) {
    struct Item {
        const MaskedSpan* span;
        std::size_t order;  // index into this sequence's span list, plan order
    };
    std::vector<Item> items;
    for (const auto& s : plan.spans)
        if (s.batch_seq_index == seq_index) items.push_back({&s, items.size()});

    const auto& ids = seq.token_ids;
    for (const auto& it : items)
        if (it.span->start + it.span->length > ids.size())
            throw std::out_of_range("mask span out of bounds");

    std::sort(items.begin(), items.end(),
              [](const Item& a, const Item& b) { return a.span->start < b.span->start; });
    for (std::size_t k = 1; k < items.size(); ++k)
        if (items[k].span->start < items[k - 1].span->start + items[k - 1].span->length)
            throw std::runtime_error("overlapping mask plan");

    MaskedSequence out;
    out.span_positions.resize(items.size());
    if (plan.mode == MaskMode::kSingle) {
        out.tokens = ids;
        for (const auto& it : items) {
            for (std::size_t t = it.span->start; t < it.span->start + it.span->length; ++t)
                out.tokens[t] = kMask;
            out.span_positions[it.order] = it.span->start;
        }
        return out;
    }

    std::size_t pos = 0;
    for (const auto& it : items) {
        out.tokens.insert(out.tokens.end(), ids.begin() + pos, ids.begin() + it.span->start);
        out.span_positions[it.order] = out.tokens.size();
        out.tokens.push_back(kMaskStart);
        out.tokens.push_back(kMaskEnd);
        pos = it.span->start + it.span->length;
    }
    out.tokens.insert(out.tokens.end(), ids.begin() + pos, ids.end());
    return out;
}

std::vector<MaskedSequence> apply_mask_batch(const Batch& batch, const MaskPlan& plan) {
    std::vector<MaskedSequence> out;
    out.reserve(batch.sequences.size());
    for (std::size_t i = 0; i < batch.sequences.size(); ++i)
        out.push_back(apply_mask(batch.sequences[i], plan, i));
    return out;
}

}  // namespace npm
