#include "npm/harness.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "npm/inference.hpp"

namespace npm {

std::string normalize_answer(const std::string& s) {
    std::string lower;
    lower.reserve(s.size());
    for (unsigned char c : s) lower.push_back(static_cast<char>(std::tolower(c)));

    std::istringstream iss(lower);
    std::string word, out;
    while (iss >> word) {
        if (!out.empty()) out += ' ';
        out += word;
    }
    std::size_t b = 0, e = out.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(out[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(out[e - 1]))) --e;
    std::string core = out.substr(b, e - b);
    // Re-collapse in case stripping exposed inner whitespace.
    std::istringstream iss2(core);
    std::string final_out;
    while (iss2 >> word) {
        if (!final_out.empty()) final_out += ' ';
        final_out += word;
    }
    return final_out;
}

int exact_match(const std::string& prediction, const std::vector<std::string>& answers) {
    std::string p = normalize_answer(prediction);
    for (const auto& a : answers)
        if (p == normalize_answer(a)) return 1;
    return 0;
}

std::size_t answer_bucket(const EvalExample& ex, const Vocab& vocab) {
    std::size_t shortest = SIZE_MAX;
    for (const auto& a : ex.answers) shortest = std::min(shortest, vocab.encode(a).size());
    if (shortest == 0) shortest = 1;
    return std::min<std::size_t>(shortest, 4) - 1;  // 0..3 for {1,2,3,4+}
}

std::vector<EvalExample> load_dataset_jsonl(const std::string& path, std::size_t limit) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<EvalExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (limit && out.size() >= limit) break;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        EvalExample ex;
        ex.query = obj.at("query").get<std::string>();
        if (ex.query.find("[MASK]") == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": query lacks [MASK] placeholder");
        if (obj.contains("answers"))
            for (const auto& a : obj["answers"]) ex.answers.push_back(a.get<std::string>());
        if (obj.contains("label")) ex.label = obj["label"].get<std::string>();
        out.push_back(std::move(ex));
    }
    return out;
}

EvalReport evaluate(const std::vector<EvalExample>& dataset, const Vocab& vocab,
                    const Predictor& predictor) {
    if (dataset.empty()) throw std::invalid_argument("dataset must be non-empty");
    EvalReport report;
    std::array<std::size_t, 4> hits{};
    std::size_t total_hits = 0;
    for (const auto& ex : dataset) {
        if (ex.answers.empty()) throw std::invalid_argument("example without answers");
        PerExample pe;
        pe.query = ex.query;
        pe.bucket = answer_bucket(ex, vocab);
        pe.prediction = predictor(vocab.encode_query_text(ex.query));
        pe.em = exact_match(pe.prediction, ex.answers);
        ++report.bucket_counts[pe.bucket];
        hits[pe.bucket] += pe.em;
        total_hits += pe.em;
        report.examples.push_back(std::move(pe));
    }
    std::size_t non_empty = 0;
    for (std::size_t b = 0; b < 4; ++b) {
        if (!report.bucket_counts[b]) continue;
        report.per_bucket_em[b] =
            static_cast<double>(hits[b]) / static_cast<double>(report.bucket_counts[b]);
        report.bucket_avg_em += report.per_bucket_em[b];
        ++non_empty;
    }
    if (non_empty) report.bucket_avg_em /= static_cast<double>(non_empty);
    report.overall_em = static_cast<double>(total_hits) / static_cast<double>(dataset.size());
    return report;
}

namespace {

Predictor phrase_predictor(const DenseIndex& index, const EncoderParams& encoder,
                           const Vocab& vocab, std::size_t k, std::size_t l_max) {
    return [&index, &encoder, &vocab, k, l_max](const TokenSeq& query) -> std::string {
        auto preds = predict_phrase(index, encoder, query, std::min(k, index.size()), l_max);
        return preds.empty() ? std::string() : vocab.decode(preds.front().ngram);
    };
}

}  // namespace

SwapReport corpus_swap_experiment(const EncoderParams& encoder, const Vocab& vocab,
                                  const std::vector<Document>& corpus_old,
                                  const std::vector<Document>& corpus_new,
                                  const std::vector<EvalExample>& dataset_changed,
                                  const std::vector<EvalExample>& dataset_unchanged,
                                  const SwapConfig& config) {
    DenseIndex idx_old =
        DenseIndex::build(corpus_old, encoder, config.max_seq_len, config.search);
    DenseIndex idx_new =
        DenseIndex::build(corpus_new, encoder, config.max_seq_len, config.search);

    SwapReport report;
    auto run = [&](const DenseIndex& idx, const std::vector<EvalExample>& data) {
        return evaluate(data, vocab, phrase_predictor(idx, encoder, vocab, config.k, config.l_max));
    };
    if (!dataset_changed.empty()) {
        report.changed_old = run(idx_old, dataset_changed);
        report.changed_new = run(idx_new, dataset_changed);
    }
    if (!dataset_unchanged.empty()) {
        report.unchanged_old = run(idx_old, dataset_unchanged);
        report.unchanged_new = run(idx_new, dataset_unchanged);
    }
    return report;
}

namespace {

bool contains_subseq(const TokenSeq& hay, const TokenSeq& needle) {
    if (needle.empty() || needle.size() > hay.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i)
        if (std::equal(needle.begin(), needle.end(), hay.begin() + i)) return true;
    return false;
}

bool corpus_contains(const std::vector<Document>& corpus, const TokenSeq& ngram) {
    for (const auto& d : corpus)
        if (contains_subseq(d.token_ids, ngram)) return true;
    return false;
}

}  // namespace

ProbeReport unseen_token_probe(const EncoderParams& encoder, const Vocab& vocab,
                               const std::vector<Document>& training_corpus,
                               const std::vector<Document>& reference_corpus,
                               const std::vector<EvalExample>& probes,
                               const SwapConfig& config) {
    for (const auto& probe : probes) {
        for (const auto& answer : probe.answers) {
            TokenSeq ids = vocab.encode(answer);
            if (!corpus_contains(reference_corpus, ids))
                throw std::runtime_error("probe not satisfiable: answer '" + answer +
                                         "' absent from reference corpus");
            for (TokenId id : ids)
                for (const auto& d : training_corpus)
                    if (std::find(d.token_ids.begin(), d.token_ids.end(), id) !=
                        d.token_ids.end())
                        throw std::runtime_error("probe answer '" + answer +
                                                 "' occurs in training corpus");
        }
    }

    DenseIndex index =
        DenseIndex::build(reference_corpus, encoder, config.max_seq_len, config.search);

    ProbeReport report;
    auto predictor = [&](const TokenSeq& query) -> std::string {
        auto preds = predict_phrase(index, encoder, query, std::min(config.k, index.size()),
                                    config.l_max);
        if (preds.empty()) return std::string();
        if (!corpus_contains(reference_corpus, preds.front().ngram))
            ++report.closure_violations;
        return vocab.decode(preds.front().ngram);
    };
    report.eval = evaluate(probes, vocab, predictor);
    return report;
}

}  // namespace npm
