#include "npm/sparse_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace npm {

Bm25Index Bm25Index::build(const std::vector<Document>& corpus, std::size_t passage_len,
                           double k1, double b) {
    if (passage_len < 1) throw std::invalid_argument("passage_len must be >= 1");
    Bm25Index idx;
    idx.k1_ = k1;
    idx.b_ = b;

    std::uint64_t pos = 0;
    double total_len = 0;
    for (const auto& doc : corpus) {
        std::size_t off = 0;
        while (off < doc.token_ids.size()) {
            std::size_t len = std::min(passage_len, doc.token_ids.size() - off);
            Passage p;
            p.passage_id = static_cast<std::uint32_t>(idx.passages_.size());
            p.doc_id = doc.doc_id;
            p.start_pos = pos + off;
            p.length = len;

            std::map<TokenId, std::uint32_t> tf;
            for (std::size_t t = off; t < off + len; ++t) ++tf[doc.token_ids[t]];
            for (const auto& [term, count] : tf)
                idx.postings_[term].push_back({p.passage_id, count});

            idx.passages_.push_back(std::move(p));
            total_len += static_cast<double>(len);
            off += len;
        }
        pos += doc.token_ids.size();
    }
    idx.avg_len_ = idx.passages_.empty() ? 0 : total_len / idx.passages_.size();
    return idx;
}

double Bm25Index::idf(TokenId term) const {
    auto it = postings_.find(term);
    double df = it == postings_.end() ? 0.0 : static_cast<double>(it->second.size());
    double n = static_cast<double>(passages_.size());
    return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
}

double Bm25Index::score(const TokenSeq& query_terms, std::uint32_t passage_id) const {
    double norm_len = passages_[passage_id].length / avg_len_;
    double s = 0;
    for (TokenId term : query_terms) {
        auto it = postings_.find(term);
        if (it == postings_.end()) continue;
        auto pit = std::lower_bound(it->second.begin(), it->second.end(), passage_id,
                                    [](const Posting& p, std::uint32_t id) {
                                        return p.passage_id < id;
                                    });
        if (pit == it->second.end() || pit->passage_id != passage_id) continue;
        double tf = pit->tf;
        s += idf(term) * tf * (k1_ + 1.0) / (tf + k1_ * (1.0 - b_ + b_ * norm_len));
    }
    return s;
}

std::vector<std::pair<std::uint32_t, double>> Bm25Index::top_passages(
    const TokenSeq& query_terms, std::size_t n) const {
    if (n < 1) throw std::invalid_argument("n must be >= 1");
    std::map<std::uint32_t, double> scores;
    for (TokenId term : query_terms) {
        auto it = postings_.find(term);
        if (it == postings_.end()) continue;
        double w = idf(term);
        for (const auto& p : it->second) {
            double norm_len = passages_[p.passage_id].length / avg_len_;
            double tf = p.tf;
            scores[p.passage_id] +=
                w * tf * (k1_ + 1.0) / (tf + k1_ * (1.0 - b_ + b_ * norm_len));
        }
    }
    std::vector<std::pair<std::uint32_t, double>> ranked(scores.begin(), scores.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (ranked.size() > n) ranked.resize(n);
    return ranked;
}

std::unordered_set<std::uint64_t> allowed_positions(const std::vector<Passage>& passages) {
    std::unordered_set<std::uint64_t> out;
    for (const auto& p : passages) {
        for (std::uint64_t t = p.start_pos; t < p.start_pos + p.length; ++t)
            if (!out.insert(t).second)
                throw std::runtime_error("overlapping passages");
    }
    return out;
}

TokenSeq bm25_query_terms(const TokenSeq& query) {
    TokenSeq out;
    for (TokenId id : query)
        if (!is_reserved(id)) out.push_back(id);
    return out;
}

void Bm25Index::save(const std::string& path_prefix) const {
    nlohmann::json meta;
    meta["k1"] = k1_;
    meta["b"] = b_;
    meta["avg_len"] = avg_len_;
    meta["passages"] = nlohmann::json::array();
    for (const auto& p : passages_)
        meta["passages"].push_back({{"id", p.passage_id},
                                    {"doc_id", p.doc_id},
                                    {"start_pos", p.start_pos},
                                    {"length", p.length}});
    std::ofstream jf(path_prefix + ".json");
    if (!jf) throw std::runtime_error("cannot open " + path_prefix + ".json");
    jf << meta.dump(2) << '\n';

    std::ofstream pf(path_prefix + ".post", std::ios::binary);
    if (!pf) throw std::runtime_error("cannot open " + path_prefix + ".post");
    std::map<TokenId, const std::vector<Posting>*> ordered;
    for (const auto& [term, plist] : postings_) ordered[term] = &plist;
    for (const auto& [term, plist] : ordered) {
        std::uint32_t t = static_cast<std::uint32_t>(term);
        std::uint32_t len = static_cast<std::uint32_t>(plist->size());
        pf.write(reinterpret_cast<const char*>(&t), 4);
        pf.write(reinterpret_cast<const char*>(&len), 4);
        for (const auto& p : *plist) {
            pf.write(reinterpret_cast<const char*>(&p.passage_id), 4);
            pf.write(reinterpret_cast<const char*>(&p.tf), 4);
        }
    }
}

Bm25Index Bm25Index::load(const std::string& path_prefix) {
    std::ifstream jf(path_prefix + ".json");
    if (!jf) throw std::runtime_error("cannot open " + path_prefix + ".json");
    nlohmann::json meta = nlohmann::json::parse(jf);
    Bm25Index idx;
    idx.k1_ = meta.at("k1").get<double>();
    idx.b_ = meta.at("b").get<double>();
    idx.avg_len_ = meta.at("avg_len").get<double>();
    for (const auto& p : meta.at("passages")) {
        Passage ps;
        ps.passage_id = p.at("id").get<std::uint32_t>();
        ps.doc_id = p.at("doc_id").get<std::string>();
        ps.start_pos = p.at("start_pos").get<std::uint64_t>();
        ps.length = p.at("length").get<std::uint64_t>();
        idx.passages_.push_back(std::move(ps));
    }

    std::ifstream pf(path_prefix + ".post", std::ios::binary);
    if (!pf) throw std::runtime_error("cannot open " + path_prefix + ".post");
    while (true) {
        std::uint32_t term, len;
        pf.read(reinterpret_cast<char*>(&term), 4);
        if (!pf) break;
        pf.read(reinterpret_cast<char*>(&len), 4);
        if (!pf) throw std::runtime_error("truncated postings file");
        auto& plist = idx.postings_[static_cast<TokenId>(term)];
        plist.resize(len);
        for (auto& p : plist) {
            pf.read(reinterpret_cast<char*>(&p.passage_id), 4);
            pf.read(reinterpret_cast<char*>(&p.tf), 4);
        }
        if (!pf) throw std::runtime_error("truncated postings file");
    }
    return idx;
}

}  // namespace npm
