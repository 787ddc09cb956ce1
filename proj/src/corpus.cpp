#include "npm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace npm {

std::vector<std::string> load_corpus_texts(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<std::string> texts;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto obj = nlohmann::json::parse(line);
        texts.push_back(obj.at("text").get<std::string>());
    }
    return texts;
}

std::vector<Document> load_corpus_jsonl(const std::string& path, const Vocab& vocab) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<Document> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        Document d;
        d.doc_id = obj.at("id").get<std::string>();
        d.token_ids = vocab.encode(obj.at("text").get<std::string>());
        docs.push_back(std::move(d));
    }
    return docs;
}

std::vector<Sequence> segment(const Document& doc, std::size_t max_seq_len) {
    if (max_seq_len < 2) throw std::invalid_argument("max_seq_len must be >= 2");
    std::vector<Sequence> out;
    std::size_t pos = 0;
    std::uint32_t idx = 0;
    while (pos < doc.token_ids.size()) {
        std::size_t len = std::min(max_seq_len, doc.token_ids.size() - pos);
        Sequence s;
        s.doc_id = doc.doc_id;
        s.seq_index = idx++;
        s.token_ids.assign(doc.token_ids.begin() + pos, doc.token_ids.begin() + pos + len);
        out.push_back(std::move(s));
        pos += len;
    }
    return out;
}

std::vector<Batch> make_batches(const std::vector<Document>& corpus,
                                std::size_t batch_size, std::size_t max_seq_len,
                                std::uint64_t rng_seed) {
    if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");

    std::vector<Batch> batches;
    std::vector<Sequence> pool;  // leftovers, in corpus order
    std::size_t total = 0;
    for (const auto& doc : corpus) {
        auto seqs = segment(doc, max_seq_len);
        total += seqs.size();
        std::size_t i = 0;
        for (; i + batch_size <= seqs.size(); i += batch_size) {
            Batch b;
            b.sequences.assign(seqs.begin() + i, seqs.begin() + i + batch_size);
            b.source_doc_ids.push_back(doc.doc_id);
            batches.push_back(std::move(b));
        }
        for (; i < seqs.size(); ++i) pool.push_back(std::move(seqs[i]));
    }
    if (total < batch_size) throw std::runtime_error("corpus too small for batch size");

    for (std::size_t i = 0; i + batch_size <= pool.size(); i += batch_size) {
        Batch b;
        b.sequences.assign(pool.begin() + i, pool.begin() + i + batch_size);
        for (const auto& s : b.sequences)
            if (b.source_doc_ids.empty() || b.source_doc_ids.back() != s.doc_id)
                b.source_doc_ids.push_back(s.doc_id);
        batches.push_back(std::move(b));
    }

    std::mt19937_64 rng(rng_seed);
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

}  // namespace npm
