#include "npm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace npm {

namespace {

bool span_in_sequence(const DenseIndex& index, std::uint64_t start, std::uint64_t end) {
    if (end >= index.size()) return false;
    const SequenceRef& seq = index.sequence_of(start);
    return end < seq.start_pos + seq.length;
}

bool span_allowed(const std::unordered_set<std::uint64_t>* allowed, std::uint64_t start,
                  std::uint64_t end) {
    if (!allowed) return true;
    for (std::uint64_t p = start; p <= end; ++p)
        if (!allowed->count(p)) return false;
    return true;
}

std::vector<Prediction> aggregate_spans(
    const DenseIndex& index, const QueryEncoding& q,
    const std::vector<std::pair<std::uint64_t, std::uint64_t>>& spans) {
    std::map<TokenSeq, Prediction> by_ngram;
    for (const auto& [s, e] : spans) {
        CandidateSpan cs;
        cs.start_pos = s;
        cs.end_pos = e;
        cs.score = std::exp(sim(q.q_start, index.vector_at(s))) +
                   std::exp(sim(q.q_end, index.vector_at(e)));
        TokenSeq ngram;
        ngram.reserve(e - s + 1);
        for (std::uint64_t p = s; p <= e; ++p) ngram.push_back(index.token_at(p));
        auto& pred = by_ngram[ngram];
        if (pred.ngram.empty()) pred.ngram = std::move(ngram);
        pred.aggregate += cs.score;
        pred.support.push_back(cs);
    }
    std::vector<Prediction> out;
    out.reserve(by_ngram.size());
    for (auto& [ngram, pred] : by_ngram) out.push_back(std::move(pred));
    std::stable_sort(out.begin(), out.end(), [](const Prediction& a, const Prediction& b) {
        if (a.aggregate != b.aggregate) return a.aggregate > b.aggregate;
        return a.ngram < b.ngram;
    });
    return out;
}

}  // namespace

std::vector<Prediction> predict_phrase(const DenseIndex& index,
                                       const EncoderParams& encoder, const TokenSeq& query,
                                       std::size_t k, std::size_t l_max,
                                       const std::unordered_set<std::uint64_t>* allowed) {
    if (k < 1 || l_max < 1) throw std::invalid_argument("k and l_max must be >= 1");
    if (index.size() == 0) throw std::runtime_error("empty corpus");
    QueryEncoding q = encode_query(encoder, query);

    auto starts = allowed ? index.topk_restricted(q.q_start, k, *allowed)
                          : index.topk(q.q_start, k);
    auto ends = allowed ? index.topk_restricted(q.q_end, k, *allowed)
                        : index.topk(q.q_end, k);

    std::unordered_set<std::uint64_t> seen;  // keyed start * N + end
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    auto add = [&](std::uint64_t s, std::uint64_t e) {
        if (!span_in_sequence(index, s, e) || !span_allowed(allowed, s, e)) return;
        if (seen.insert(s * index.size() + e).second) spans.emplace_back(s, e);
    };
    for (const auto& nb : starts)
        for (std::size_t j = 1; j <= l_max; ++j) add(nb.corpus_pos, nb.corpus_pos + j - 1);
    for (const auto& nb : ends)
        for (std::size_t j = 1; j <= l_max && nb.corpus_pos + 1 >= j; ++j)
            add(nb.corpus_pos - j + 1, nb.corpus_pos);

    return aggregate_spans(index, q, spans);
}

std::vector<Prediction> predict_phrase_exact(const DenseIndex& index,
                                             const EncoderParams& encoder,
                                             const TokenSeq& query, std::size_t l_max) {
    if (index.size() > 50000) throw std::runtime_error("corpus too large for exact oracle");
    if (index.size() == 0) throw std::runtime_error("empty corpus");
    QueryEncoding q = encode_query(encoder, query);

    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& seq : index.sequences()) {
        for (std::uint64_t s = seq.start_pos; s < seq.start_pos + seq.length; ++s) {
            std::uint64_t last = std::min(seq.start_pos + seq.length - 1,
                                          s + static_cast<std::uint64_t>(l_max) - 1);
            for (std::uint64_t e = s; e <= last; ++e) spans.emplace_back(s, e);
        }
    }
    return aggregate_spans(index, q, spans);
}

std::vector<std::pair<TokenId, Scalar>> predict_single(const DenseIndex& index,
                                                       const EncoderParams& encoder,
                                                       const TokenSeq& query,
                                                       std::size_t k) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (index.size() == 0) throw std::runtime_error("empty corpus");
    Vector q = encode_query_single(encoder, query);
    auto neighbors = index.topk(q, k);

    std::map<TokenId, Scalar> agg;
    for (const auto& nb : neighbors) agg[index.token_at(nb.corpus_pos)] += std::exp(nb.score);
    std::vector<std::pair<TokenId, Scalar>> out(agg.begin(), agg.end());
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return out;
}

FuzzyVerbalizer load_verbalizer(const std::string& path, const Vocab& vocab) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    nlohmann::json obj = nlohmann::json::parse(f);
    FuzzyVerbalizer v;
    for (const auto& label : obj.at("labels")) {
        std::string name = label.get<std::string>();
        std::unordered_set<TokenId> set;
        for (const auto& tok : obj.at("tokens").at(name)) {
            TokenId id = vocab.lookup(tok.get<std::string>());
            if (id == kUnk) continue;  // dropped: not in vocab
            set.insert(id);
        }
        if (set.empty())
            throw std::runtime_error("verbalizer: label '" + name + "' has no in-vocab tokens");
        v.labels.push_back(std::move(name));
        v.token_sets.push_back(std::move(set));
    }
    return v;
}

ClassifyResult classify(const DenseIndex& index, const EncoderParams& encoder,
                        const TokenSeq& query, const FuzzyVerbalizer& verbalizer,
                        Scalar tau, std::size_t k, MaskMode mode) {
    if (tau <= 0) throw std::invalid_argument("tau must be positive");
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    std::size_t kk = std::min(k, index.size());

    std::vector<Scalar> scores(verbalizer.labels.size(), 0);
    if (mode == MaskMode::kSingle) {
        Vector q = encode_query_single(encoder, query);
        for (const auto& nb : index.topk(q, kk)) {
            TokenId tok = index.token_at(nb.corpus_pos);
            for (std::size_t y = 0; y < verbalizer.labels.size(); ++y)
                if (verbalizer.token_sets[y].count(tok))
                    scores[y] += std::exp(nb.score / tau);
        }
    } else {
        QueryEncoding q = encode_query(encoder, query);
        std::unordered_set<std::uint64_t> retrieved;
        for (const auto& nb : index.topk(q.q_start, kk)) retrieved.insert(nb.corpus_pos);
        for (const auto& nb : index.topk(q.q_end, kk)) retrieved.insert(nb.corpus_pos);
        for (std::uint64_t pos : retrieved) {
            TokenId tok = index.token_at(pos);
            Vector c = index.vector_at(pos);
            Scalar e = std::exp(sim(q.q_start, c) / tau + sim(q.q_end, c) / tau);
            for (std::size_t y = 0; y < verbalizer.labels.size(); ++y)
                if (verbalizer.token_sets[y].count(tok)) scores[y] += e;
        }
    }

    std::size_t best = 0;
    for (std::size_t y = 1; y < scores.size(); ++y)
        if (scores[y] > scores[best]) best = y;

    ClassifyResult result;
    result.label = verbalizer.labels[best];
    for (std::size_t y = 0; y < scores.size(); ++y)
        result.scores.emplace_back(verbalizer.labels[y], scores[y]);
    return result;
}

}  // namespace npm
