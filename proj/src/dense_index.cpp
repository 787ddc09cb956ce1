#include "npm/dense_index.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <queue>
#include <random>
#include <stdexcept>

namespace npm {

Scalar sim(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw std::invalid_argument("sim: dimension mismatch");
    return a.dot(b) / std::sqrt(static_cast<Scalar>(a.size()));
}

namespace {

struct Scored {
    Scalar ip;  // raw inner product
    std::uint64_t id;
};
// Max order: higher inner product first, ties by ascending id.
bool better(const Scored& a, const Scored& b) {
    if (a.ip != b.ip) return a.ip > b.ip;
    return a.id < b.id;
}

}  // namespace

DenseIndex DenseIndex::build(const std::vector<Document>& corpus,
                             const EncoderParams& encoder, std::size_t max_seq_len,
                             SearchMode mode, const HnswParams& hnsw,
                             std::uint64_t seed) {
    if (corpus.empty()) throw std::runtime_error("empty corpus");
    DenseIndex idx;
    idx.h_ = encoder.config.h;
    idx.mode_ = mode;
    idx.hnsw_params_ = hnsw;

    std::size_t total = 0;
    for (const auto& d : corpus) total += d.token_ids.size();
    if (total == 0) throw std::runtime_error("empty corpus");
    idx.vectors_.resize(total, idx.h_);
    idx.entries_.reserve(total);

    std::uint64_t pos = 0;
    for (const auto& doc : corpus) {
        for (const auto& seq : segment(doc, max_seq_len)) {
            Matrix enc = encode_sequence(encoder, seq.token_ids);
            SequenceRef ref;
            ref.doc_id = seq.doc_id;
            ref.seq_index = seq.seq_index;
            ref.start_pos = pos;
            ref.length = seq.token_ids.size();
            std::uint32_t seq_ref = static_cast<std::uint32_t>(idx.seqs_.size());
            idx.seqs_.push_back(std::move(ref));
            for (std::size_t t = 0; t < seq.token_ids.size(); ++t) {
                idx.vectors_.row(pos) = enc.row(t);
                idx.entries_.push_back({pos, seq.token_ids[t], seq_ref,
                                        static_cast<std::uint32_t>(t)});
                ++pos;
            }
        }
    }
    if (mode == SearchMode::kHnsw) idx.build_hnsw(seed);
    return idx;
}

std::vector<Neighbor> DenseIndex::topk(const Vector& query, std::size_t k) const {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (mode_ == SearchMode::kHnsw && !graph_.empty()) return search_hnsw(query, k);

    Vector scores = vectors_ * query;
    std::vector<std::uint64_t> order(size());
    for (std::size_t i = 0; i < size(); ++i) order[i] = i;
    std::size_t n = std::min(k, size());
    std::partial_sort(order.begin(), order.begin() + n, order.end(),
                      [&scores](std::uint64_t a, std::uint64_t b) {
                          return better({scores[a], a}, {scores[b], b});
                      });
    Scalar scale = std::sqrt(static_cast<Scalar>(h_));
    std::vector<Neighbor> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back({order[i], scores[order[i]] / scale});
    return out;
}

std::vector<Neighbor> DenseIndex::topk_restricted(
    const Vector& query, std::size_t k,
    const std::unordered_set<std::uint64_t>& allowed) const {
    if (allowed.empty()) throw std::invalid_argument("allowed set must be non-empty");
    std::vector<Neighbor> all;
    all.reserve(allowed.size());
    for (std::uint64_t pos : allowed) {
        if (pos >= size()) throw std::out_of_range("allowed position out of range");
        all.push_back({pos, sim(query, vector_at(pos))});
    }
    std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
        return better({a.score, a.corpus_pos}, {b.score, b.corpus_pos});
    });
    if (all.size() > k) all.resize(k);
    return all;
}

// ---- HNSW ----

namespace {

// Best-first search on one level. Returns up to ef results, best first.
std::vector<Scored> search_layer(const Matrix& vectors,
                                 const std::vector<std::vector<std::vector<std::uint64_t>>>& adj,
                                 const Vector& query, std::vector<std::uint64_t> entry,
                                 std::size_t ef, int level) {
    auto ip = [&](std::uint64_t id) { return vectors.row(id).dot(query); };

    auto cand_cmp = [](const Scored& a, const Scored& b) { return !better(a, b); };
    auto res_cmp = [](const Scored& a, const Scored& b) { return better(a, b); };
    std::priority_queue<Scored, std::vector<Scored>, decltype(cand_cmp)> candidates(cand_cmp);
    std::priority_queue<Scored, std::vector<Scored>, decltype(res_cmp)> results(res_cmp);
    std::unordered_set<std::uint64_t> visited;

    for (std::uint64_t e : entry) {
        if (!visited.insert(e).second) continue;
        Scored s{ip(e), e};
        candidates.push(s);
        results.push(s);
        if (results.size() > ef) results.pop();
    }
    while (!candidates.empty()) {
        Scored c = candidates.top();
        candidates.pop();
        if (results.size() >= ef && !better(c, results.top())) break;
        for (std::uint64_t n : adj[c.id][level]) {
            if (!visited.insert(n).second) continue;
            Scored s{ip(n), n};
            if (results.size() < ef || better(s, results.top())) {
                candidates.push(s);
                results.push(s);
                if (results.size() > ef) results.pop();
            }
        }
    }
    std::vector<Scored> out;
    out.reserve(results.size());
    while (!results.empty()) {
        out.push_back(results.top());
        results.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
}

// Diversity heuristic: keep a candidate only if it is closer to the query
// than to every already-selected neighbor.
std::vector<std::uint64_t> select_neighbors(const Matrix& vectors,
                                            const std::vector<Scored>& candidates,
                                            std::size_t m) {
    std::vector<std::uint64_t> out;
    for (const auto& c : candidates) {
        if (out.size() >= m) break;
        bool keep = true;
        for (std::uint64_t r : out) {
            Scalar ip_cr = vectors.row(c.id).dot(vectors.row(r).transpose());
            if (ip_cr > c.ip) {
                keep = false;
                break;
            }
        }
        if (keep) out.push_back(c.id);
    }
    return out;
}

}  // namespace

void DenseIndex::build_hnsw(std::uint64_t seed) {
    const std::size_t n = size();
    graph_.neighbors.assign(n, {});
    graph_.max_level = -1;

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double ml = 1.0 / std::log(static_cast<double>(hnsw_params_.M));

    for (std::uint64_t id = 0; id < n; ++id) {
        double u = unif(rng);
        if (u <= 0.0) u = 1e-300;
        int level = static_cast<int>(-std::log(u) * ml);
        graph_.neighbors[id].assign(level + 1, {});

        if (graph_.max_level < 0) {
            graph_.entry_point = id;
            graph_.max_level = level;
            continue;
        }

        Vector q = vectors_.row(id).transpose();
        std::vector<std::uint64_t> entry{graph_.entry_point};
        for (int l = graph_.max_level; l > level; --l) {
            auto best = search_layer(vectors_, graph_.neighbors, q, entry, 1, l);
            entry = {best.front().id};
        }
        for (int l = std::min(level, graph_.max_level); l >= 0; --l) {
            auto found = search_layer(vectors_, graph_.neighbors, q, entry,
                                      hnsw_params_.ef_construction, l);
            auto selected = select_neighbors(vectors_, found, hnsw_params_.M);
            graph_.neighbors[id][l] = selected;
            const std::size_t cap = l == 0 ? 2 * hnsw_params_.M : hnsw_params_.M;
            for (std::uint64_t nb : selected) {
                auto& back = graph_.neighbors[nb][l];
                back.push_back(id);
                if (back.size() > cap) {
                    // Re-prune with the heuristic.
                    std::vector<Scored> cand;
                    cand.reserve(back.size());
                    for (std::uint64_t b : back)
                        cand.push_back({vectors_.row(nb).dot(vectors_.row(b).transpose()), b});
                    std::sort(cand.begin(), cand.end(), better);
                    back = select_neighbors(vectors_, cand, cap);
                }
            }
            entry.clear();
            for (const auto& s : found) entry.push_back(s.id);
        }
        if (level > graph_.max_level) {
            graph_.max_level = level;
            graph_.entry_point = id;
        }
    }
}

std::vector<Neighbor> DenseIndex::search_hnsw(const Vector& query, std::size_t k) const {
    std::vector<std::uint64_t> entry{graph_.entry_point};
    for (int l = graph_.max_level; l > 0; --l) {
        auto best = search_layer(vectors_, graph_.neighbors, query, entry, 1, l);
        entry = {best.front().id};
    }
    std::size_t ef = std::max(hnsw_params_.ef_search, k);
    auto found = search_layer(vectors_, graph_.neighbors, query, entry, ef, 0);
    if (found.size() > k) found.resize(k);
    Scalar scale = std::sqrt(static_cast<Scalar>(h_));
    std::vector<Neighbor> out;
    out.reserve(found.size());
    for (const auto& s : found) out.push_back({s.id, s.ip / scale});
    return out;
}

// ---- persistence ----

namespace {
constexpr char kMagic[4] = {'N', 'P', 'M', 'I'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("unrecognized index file: truncated");
    return v;
}
}  // namespace

void DenseIndex::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f.write(kMagic, 4);
    write_pod<std::uint32_t>(f, kVersion);
    write_pod<std::uint32_t>(f, h_);
    write_pod<std::uint64_t>(f, size());
    write_pod<std::uint8_t>(f, static_cast<std::uint8_t>(mode_));
    for (const auto& e : entries_) {
        write_pod<std::uint64_t>(f, e.corpus_pos);
        write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(e.token_id));
        write_pod<std::uint32_t>(f, e.seq_ref);
        write_pod<std::uint32_t>(f, e.offset);
        for (std::uint32_t d = 0; d < h_; ++d)
            write_pod<float>(f, static_cast<float>(vectors_(e.corpus_pos, d)));
    }
    if (mode_ == SearchMode::kHnsw) {
        write_pod<std::uint64_t>(f, hnsw_params_.M);
        write_pod<std::uint64_t>(f, hnsw_params_.ef_construction);
        write_pod<std::uint64_t>(f, hnsw_params_.ef_search);
        write_pod<std::uint64_t>(f, graph_.entry_point);
        write_pod<std::int64_t>(f, graph_.max_level);
        for (const auto& levels : graph_.neighbors) {
            write_pod<std::uint64_t>(f, levels.size());
            for (const auto& adj : levels) {
                write_pod<std::uint64_t>(f, adj.size());
                for (std::uint64_t id : adj) write_pod<std::uint64_t>(f, id);
            }
        }
    }
    write_pod<std::uint64_t>(f, seqs_.size());
    for (const auto& s : seqs_) {
        write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(s.doc_id.size()));
        f.write(s.doc_id.data(), s.doc_id.size());
        write_pod<std::uint32_t>(f, s.seq_index);
        write_pod<std::uint64_t>(f, s.start_pos);
        write_pod<std::uint64_t>(f, s.length);
    }
}

DenseIndex DenseIndex::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("unrecognized index file");
    std::uint32_t version = read_pod<std::uint32_t>(f);
    if (version != kVersion)
        throw std::runtime_error("unrecognized index file: expected version " +
                                 std::to_string(kVersion) + ", found " +
                                 std::to_string(version));
    DenseIndex idx;
    idx.h_ = read_pod<std::uint32_t>(f);
    std::uint64_t n = read_pod<std::uint64_t>(f);
    idx.mode_ = static_cast<SearchMode>(read_pod<std::uint8_t>(f));
    idx.vectors_.resize(n, idx.h_);
    idx.entries_.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        auto& e = idx.entries_[i];
        e.corpus_pos = read_pod<std::uint64_t>(f);
        e.token_id = static_cast<TokenId>(read_pod<std::uint32_t>(f));
        e.seq_ref = read_pod<std::uint32_t>(f);
        e.offset = read_pod<std::uint32_t>(f);
        for (std::uint32_t d = 0; d < idx.h_; ++d)
            idx.vectors_(e.corpus_pos, d) = static_cast<Scalar>(read_pod<float>(f));
    }
    if (idx.mode_ == SearchMode::kHnsw) {
        idx.hnsw_params_.M = read_pod<std::uint64_t>(f);
        idx.hnsw_params_.ef_construction = read_pod<std::uint64_t>(f);
        idx.hnsw_params_.ef_search = read_pod<std::uint64_t>(f);
        idx.graph_.entry_point = read_pod<std::uint64_t>(f);
        idx.graph_.max_level = static_cast<int>(read_pod<std::int64_t>(f));
        idx.graph_.neighbors.resize(n);
        for (std::uint64_t i = 0; i < n; ++i) {
            std::uint64_t n_levels = read_pod<std::uint64_t>(f);
            idx.graph_.neighbors[i].resize(n_levels);
            for (std::uint64_t l = 0; l < n_levels; ++l) {
                std::uint64_t count = read_pod<std::uint64_t>(f);
                auto& adj = idx.graph_.neighbors[i][l];
                adj.resize(count);
                for (std::uint64_t j = 0; j < count; ++j) {
                    adj[j] = read_pod<std::uint64_t>(f);
                    if (adj[j] >= n)
                        throw std::runtime_error("unrecognized index file: bad adjacency");
                }
            }
        }
    }
    std::uint64_t n_seqs = read_pod<std::uint64_t>(f);
    idx.seqs_.resize(n_seqs);
    for (auto& s : idx.seqs_) {
        std::uint32_t len = read_pod<std::uint32_t>(f);
        s.doc_id.resize(len);
        f.read(s.doc_id.data(), len);
        if (!f) throw std::runtime_error("unrecognized index file: truncated");
        s.seq_index = read_pod<std::uint32_t>(f);
        s.start_pos = read_pod<std::uint64_t>(f);
        s.length = read_pod<std::uint64_t>(f);
    }
    return idx;
}

}  // namespace npm
