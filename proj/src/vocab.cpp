#include "npm/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace npm {

namespace {
const char* kReservedNames[kNumReserved] = {"<pad>", "<unk>", "<mask>",
                                            "<mask_s>", "<mask_e>"};

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '_'; }
}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        unsigned char c = text[i];
        if (std::isspace(c)) {
            ++i;
        } else if (is_word_char(c)) {
            std::size_t j = i;
            while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
            out.emplace_back(text.substr(i, j - i));
            i = j;
        } else {
            // Punctuation and any other byte become single-char tokens.
            out.emplace_back(1, text[i]);
            ++i;
        }
    }
    return out;
}

Vocab::Vocab() {
    for (TokenId id = 0; id < kNumReserved; ++id) {
        tokens_.emplace_back(kReservedNames[id]);
        lookup_.emplace(kReservedNames[id], id);
    }
}

TokenId Vocab::add(const std::string& token) {
    if (lookup_.count(token)) throw std::runtime_error("duplicate token: " + token);
    TokenId id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
    lookup_.emplace(token, id);
    return id;
}

TokenId Vocab::lookup(const std::string& token) const {
    auto it = lookup_.find(token);
    return it == lookup_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw std::out_of_range("token id out of range");
    return tokens_[id];
}

TokenSeq Vocab::encode(const std::string& text) const {
    TokenSeq out;
    for (const auto& tok : tokenize(text)) {
        TokenId id = lookup(tok);
        out.push_back(is_reserved(id) && id != kUnk ? kUnk : id);
    }
    return out;
}

std::string Vocab::decode(const TokenSeq& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

TokenSeq Vocab::encode_query_text(const std::string& text) const {
    static const std::string placeholder = "[MASK]";
    TokenSeq out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t hit = text.find(placeholder, pos);
        std::string piece = text.substr(pos, hit == std::string::npos ? std::string::npos : hit - pos);
        TokenSeq ids = encode(piece);
        out.insert(out.end(), ids.begin(), ids.end());
        if (hit == std::string::npos) break;
        out.push_back(kMask);
        pos = hit + placeholder.size();
    }
    return out;
}

void Vocab::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    for (const auto& t : tokens_) f << t << '\n';
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    Vocab v;
    std::string line;
    TokenId id = 0;
    while (std::getline(f, line)) {
        if (id < kNumReserved) {
            if (line != kReservedNames[id])
                throw std::runtime_error("vocab file: bad reserved token at line " +
                                         std::to_string(id));
        } else {
            v.add(line);
        }
        ++id;
    }
    if (id < kNumReserved) throw std::runtime_error("vocab file truncated");
    return v;
}

Vocab train_vocab(const std::vector<std::string>& raw_texts, std::size_t max_size) {
    if (max_size < 6) throw std::invalid_argument("max_size must be >= 6");
    std::map<std::string, std::size_t> counts;
    for (const auto& text : raw_texts)
        for (const auto& tok : tokenize(text)) ++counts[tok];
    if (counts.empty()) throw std::runtime_error("empty corpus");

    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    std::size_t capacity = max_size - kNumReserved;
    for (std::size_t i = 0; i < ranked.size() && i < capacity; ++i) v.add(ranked[i].first);
    return v;
}

}  // namespace npm
