#include <cmath>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "npm/corpus.hpp"
#include "npm/dense_index.hpp"
#include "npm/encoder.hpp"
#include "npm/harness.hpp"
#include "npm/inference.hpp"
#include "npm/masking.hpp"
#include "npm/objective.hpp"
#include "npm/sparse_index.hpp"
#include "npm/vocab.hpp"

namespace {

using nlohmann::json;
using namespace npm;

struct GlobalOpts {
    std::uint64_t seed = 0;
    std::size_t k = 4096;
    std::size_t l_max = 10;
    double tau = 5.0;
    std::size_t bm25_top_n = 3;
    std::string search = "exact";
};

SearchMode parse_search(const std::string& s) {
    if (s == "exact") return SearchMode::kExact;
    if (s == "hnsw") return SearchMode::kHnsw;
    throw CLI::ValidationError("--search must be exact or hnsw");
}

MaskMode parse_mode(const std::string& s) {
    if (s == "phrase") return MaskMode::kPhrase;
    if (s == "single") return MaskMode::kSingle;
    throw CLI::ValidationError("--mode must be phrase or single");
}

json report_to_json(const EvalReport& r, bool verbose) {
    json out;
    out["per_bucket_em"] = r.per_bucket_em;
    out["bucket_counts"] = r.bucket_counts;
    out["bucket_avg_em"] = r.bucket_avg_em;
    out["overall_em"] = r.overall_em;
    if (verbose) {
        out["examples"] = json::array();
        for (const auto& e : r.examples)
            out["examples"].push_back({{"query", e.query},
                                       {"prediction", e.prediction},
                                       {"em", e.em},
                                       {"bucket", e.bucket + 1}});
    }
    return out;
}

std::unordered_set<std::uint64_t> sparse_restriction(const std::string& prefix,
                                                     const TokenSeq& query,
                                                     std::size_t top_n) {
    Bm25Index bm = Bm25Index::load(prefix);
    auto top = bm.top_passages(bm25_query_terms(query), top_n);
    std::vector<Passage> selected;
    for (const auto& [pid, score] : top) selected.push_back(bm.passages()[pid]);
    if (selected.empty()) throw std::runtime_error("no BM25 passage matches the query");
    return allowed_positions(selected);
}

int run(int argc, char** argv) {
    CLI::App app{"Nonparametric masked language model over a token-indexed corpus"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    app.add_option("--seed", g.seed, "RNG seed");
    app.add_option("--k", g.k, "retrieval depth")->capture_default_str();
    app.add_option("--l-max", g.l_max, "maximum phrase length")->capture_default_str();
    app.add_option("--tau", g.tau, "classification temperature")->capture_default_str();
    app.add_option("--bm25-top-n", g.bm25_top_n, "BM25 passages kept")
        ->capture_default_str();
    app.add_option("--search", g.search, "dense search mode: exact or hnsw")
        ->capture_default_str();

    // vocab
    auto* cmd_vocab = app.add_subcommand("vocab", "train a vocabulary from a corpus");
    std::string v_corpus, v_out;
    std::size_t v_max = 30000;
    cmd_vocab->add_option("--corpus", v_corpus, "corpus JSONL")->required();
    cmd_vocab->add_option("--out", v_out, "vocabulary output path")->required();
    cmd_vocab->add_option("--max-size", v_max, "vocabulary cap")->capture_default_str();

    // train
    auto* cmd_train = app.add_subcommand("train", "train the encoder");
    std::string t_corpus, t_vocab, t_out, t_mode = "phrase", t_traj;
    TrainConfig tc;
    tc.total_steps = 2000;
    EncoderConfig ec;
    cmd_train->add_option("--corpus", t_corpus)->required();
    cmd_train->add_option("--vocab", t_vocab)->required();
    cmd_train->add_option("--out", t_out, "encoder parameter output")->required();
    cmd_train->add_option("--steps", tc.total_steps)->capture_default_str();
    cmd_train->add_option("--batch-size", tc.batch_size)->capture_default_str();
    cmd_train->add_option("--lr", tc.learning_rate)->capture_default_str();
    cmd_train->add_option("--warmup", tc.warmup_steps)->capture_default_str();
    cmd_train->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
    cmd_train->add_option("--max-seq-len", tc.max_seq_len)->capture_default_str();
    cmd_train->add_option("--hidden", ec.h, "embedding dimension")->capture_default_str();
    cmd_train->add_option("--layers", ec.n_layers)->capture_default_str();
    cmd_train->add_option("--window", ec.window)->capture_default_str();
    cmd_train->add_option("--mode", t_mode, "phrase or single")->capture_default_str();
    cmd_train->add_option("--trajectory", t_traj, "loss trajectory CSV");

    // index-dense
    auto* cmd_dense = app.add_subcommand("index-dense", "build the dense token index");
    std::string d_corpus, d_vocab, d_params, d_out;
    std::size_t d_max_seq = 256;
    HnswParams hnsw;
    cmd_dense->add_option("--corpus", d_corpus)->required();
    cmd_dense->add_option("--vocab", d_vocab)->required();
    cmd_dense->add_option("--params", d_params)->required();
    cmd_dense->add_option("--out", d_out)->required();
    cmd_dense->add_option("--max-seq-len", d_max_seq)->capture_default_str();
    cmd_dense->add_option("--hnsw-m", hnsw.M)->capture_default_str();
    cmd_dense->add_option("--ef-construction", hnsw.ef_construction)
        ->capture_default_str();
    cmd_dense->add_option("--ef-search", hnsw.ef_search)->capture_default_str();

    // index-sparse
    auto* cmd_sparse = app.add_subcommand("index-sparse", "build the BM25 passage index");
    std::string s_corpus, s_vocab, s_out;
    std::size_t s_plen = 128;
    double s_k1 = 0.9, s_b = 0.4;
    cmd_sparse->add_option("--corpus", s_corpus)->required();
    cmd_sparse->add_option("--vocab", s_vocab)->required();
    cmd_sparse->add_option("--out", s_out, "output path prefix (.json/.post)")
        ->required();
    cmd_sparse->add_option("--passage-len", s_plen)->capture_default_str();
    cmd_sparse->add_option("--k1", s_k1)->capture_default_str();
    cmd_sparse->add_option("--b", s_b)->capture_default_str();

    // predict
    auto* cmd_predict = app.add_subcommand("predict", "fill in the [MASK] of a query");
    std::string p_index, p_vocab, p_params, p_query, p_sparse, p_mode = "phrase";
    std::size_t p_top = 5;
    cmd_predict->add_option("--index", p_index)->required();
    cmd_predict->add_option("--vocab", p_vocab)->required();
    cmd_predict->add_option("--params", p_params)->required();
    cmd_predict->add_option("--query", p_query, "text containing [MASK]")->required();
    cmd_predict->add_option("--sparse", p_sparse, "BM25 index prefix for restriction");
    cmd_predict->add_option("--mode", p_mode, "phrase or single")->capture_default_str();
    cmd_predict->add_option("--top", p_top, "predictions printed")->capture_default_str();

    // classify
    auto* cmd_classify = app.add_subcommand("classify", "closed-set classification");
    std::string c_index, c_vocab, c_params, c_query, c_verb, c_mode = "phrase";
    cmd_classify->add_option("--index", c_index)->required();
    cmd_classify->add_option("--vocab", c_vocab)->required();
    cmd_classify->add_option("--params", c_params)->required();
    cmd_classify->add_option("--query", c_query)->required();
    cmd_classify->add_option("--verbalizer", c_verb, "verbalizer JSON")->required();
    cmd_classify->add_option("--mode", c_mode, "phrase or single")->capture_default_str();

    // eval
    auto* cmd_eval = app.add_subcommand("eval", "EM evaluation on a JSONL dataset");
    std::string e_index, e_vocab, e_params, e_dataset;
    std::size_t e_limit = 0;
    bool e_verbose = false;
    cmd_eval->add_option("--index", e_index)->required();
    cmd_eval->add_option("--vocab", e_vocab)->required();
    cmd_eval->add_option("--params", e_params)->required();
    cmd_eval->add_option("--dataset", e_dataset)->required();
    cmd_eval->add_option("--limit", e_limit, "cap on examples (0 = all)");
    cmd_eval->add_flag("--verbose", e_verbose, "emit per-example records");

    // swap-eval
    auto* cmd_swap = app.add_subcommand("swap-eval", "corpus-swap experiment");
    std::string w_old, w_new, w_vocab, w_params, w_changed, w_unchanged;
    std::size_t w_max_seq = 256;
    cmd_swap->add_option("--corpus-old", w_old)->required();
    cmd_swap->add_option("--corpus-new", w_new)->required();
    cmd_swap->add_option("--vocab", w_vocab)->required();
    cmd_swap->add_option("--params", w_params)->required();
    cmd_swap->add_option("--changed", w_changed, "dataset with updated answers");
    cmd_swap->add_option("--unchanged", w_unchanged, "dataset with stable answers");
    cmd_swap->add_option("--max-seq-len", w_max_seq)->capture_default_str();

    // mask-debug
    auto* cmd_mask = app.add_subcommand("mask-debug", "dump a sampled mask plan");
    std::string m_corpus, m_vocab, m_mode = "phrase";
    std::size_t m_batch = 8, m_max_seq = 256;
    cmd_mask->add_option("--corpus", m_corpus)->required();
    cmd_mask->add_option("--vocab", m_vocab)->required();
    cmd_mask->add_option("--batch-size", m_batch)->capture_default_str();
    cmd_mask->add_option("--max-seq-len", m_max_seq)->capture_default_str();
    cmd_mask->add_option("--mode", m_mode, "phrase or single")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    if (cmd_vocab->parsed()) {
        Vocab v = train_vocab(load_corpus_texts(v_corpus), v_max);
        v.save(v_out);
        std::cout << "vocabulary: " << v.size() << " tokens -> " << v_out << "\n";
        return 0;
    }

    if (cmd_train->parsed()) {
        Vocab v = Vocab::load(t_vocab);
        auto docs = load_corpus_jsonl(t_corpus, v);
        tc.seed = g.seed;
        ec.vocab_size = static_cast<std::uint32_t>(v.size());
        ec.seed = static_cast<std::uint32_t>(g.seed);
        // Phrase masking grows sequences by one token per span.
        ec.max_positions = static_cast<std::uint32_t>(
            tc.max_seq_len + static_cast<std::size_t>(
                                 std::ceil(tc.masking.ratio * tc.max_seq_len)) + 1);
        auto result = train(docs, init_params(ec), tc, parse_mode(t_mode),
                            [](const StepRecord& r) {
                                if (r.step % 100 == 0)
                                    std::cerr << "step " << r.step << " loss " << r.loss
                                              << " spans " << r.n_spans << "\n";
                            });
        save_params(result.params, t_out);
        if (!t_traj.empty()) write_trajectory_csv(result.trajectory, t_traj);
        std::cout << "trained " << tc.total_steps << " steps -> " << t_out << "\n";
        return 0;
    }

    if (cmd_dense->parsed()) {
        Vocab v = Vocab::load(d_vocab);
        auto docs = load_corpus_jsonl(d_corpus, v);
        auto params = load_params(d_params);
        auto idx = DenseIndex::build(docs, params, d_max_seq, parse_search(g.search),
                                     hnsw, g.seed);
        idx.save(d_out);
        std::cout << "indexed " << idx.size() << " tokens -> " << d_out << "\n";
        return 0;
    }

    if (cmd_sparse->parsed()) {
        Vocab v = Vocab::load(s_vocab);
        auto docs = load_corpus_jsonl(s_corpus, v);
        auto idx = Bm25Index::build(docs, s_plen, s_k1, s_b);
        idx.save(s_out);
        std::cout << "indexed " << idx.passages().size() << " passages -> " << s_out
                  << ".json\n";
        return 0;
    }

    if (cmd_predict->parsed()) {
        Vocab v = Vocab::load(p_vocab);
        auto params = load_params(p_params);
        auto idx = DenseIndex::load(p_index);
        TokenSeq query = v.encode_query_text(p_query);
        json out;
        if (parse_mode(p_mode) == MaskMode::kSingle) {
            auto preds = predict_single(idx, params, query, std::min(g.k, idx.size()));
            out["predictions"] = json::array();
            for (std::size_t i = 0; i < preds.size() && i < p_top; ++i)
                out["predictions"].push_back(
                    {{"token", v.token(preds[i].first)}, {"score", preds[i].second}});
        } else {
            std::unordered_set<std::uint64_t> allowed;
            const std::unordered_set<std::uint64_t>* restrict = nullptr;
            if (!p_sparse.empty()) {
                allowed = sparse_restriction(p_sparse, query, g.bm25_top_n);
                restrict = &allowed;
            }
            auto preds = predict_phrase(idx, params, query, std::min(g.k, idx.size()),
                                        g.l_max, restrict);
            out["predictions"] = json::array();
            for (std::size_t i = 0; i < preds.size() && i < p_top; ++i)
                out["predictions"].push_back({{"ngram", v.decode(preds[i].ngram)},
                                              {"aggregate", preds[i].aggregate},
                                              {"support", preds[i].support.size()}});
        }
        std::cout << out.dump(2) << "\n";
        return 0;
    }

    if (cmd_classify->parsed()) {
        Vocab v = Vocab::load(c_vocab);
        auto params = load_params(c_params);
        auto idx = DenseIndex::load(c_index);
        auto verb = load_verbalizer(c_verb, v);
        auto res = classify(idx, params, v.encode_query_text(c_query), verb, g.tau, g.k,
                            parse_mode(c_mode));
        json out;
        out["label"] = res.label;
        out["scores"] = json::object();
        for (const auto& [label, score] : res.scores) out["scores"][label] = score;
        std::cout << out.dump(2) << "\n";
        return 0;
    }

    if (cmd_eval->parsed()) {
        Vocab v = Vocab::load(e_vocab);
        auto params = load_params(e_params);
        auto idx = DenseIndex::load(e_index);
        auto dataset = load_dataset_jsonl(e_dataset, e_limit);
        auto predictor = [&](const TokenSeq& query) -> std::string {
            auto preds =
                predict_phrase(idx, params, query, std::min(g.k, idx.size()), g.l_max);
            return preds.empty() ? std::string() : v.decode(preds.front().ngram);
        };
        auto report = evaluate(dataset, v, predictor);
        std::cout << report_to_json(report, e_verbose).dump(2) << "\n";
        return 0;
    }

    if (cmd_swap->parsed()) {
        Vocab v = Vocab::load(w_vocab);
        auto params = load_params(w_params);
        auto corpus_old = load_corpus_jsonl(w_old, v);
        auto corpus_new = load_corpus_jsonl(w_new, v);
        std::vector<EvalExample> changed, unchanged;
        if (!w_changed.empty()) changed = load_dataset_jsonl(w_changed);
        if (!w_unchanged.empty()) unchanged = load_dataset_jsonl(w_unchanged);
        SwapConfig cfg;
        cfg.max_seq_len = w_max_seq;
        cfg.k = g.k;
        cfg.l_max = g.l_max;
        cfg.search = parse_search(g.search);
        auto rep = corpus_swap_experiment(params, v, corpus_old, corpus_new, changed,
                                          unchanged, cfg);
        json out;
        if (!changed.empty()) {
            out["changed"]["old_corpus"] = report_to_json(rep.changed_old, false);
            out["changed"]["new_corpus"] = report_to_json(rep.changed_new, false);
        }
        if (!unchanged.empty()) {
            out["unchanged"]["old_corpus"] = report_to_json(rep.unchanged_old, false);
            out["unchanged"]["new_corpus"] = report_to_json(rep.unchanged_new, false);
        }
        std::cout << out.dump(2) << "\n";
        return 0;
    }

    if (cmd_mask->parsed()) {
        Vocab v = Vocab::load(m_vocab);
        auto docs = load_corpus_jsonl(m_corpus, v);
        auto batches = make_batches(docs, m_batch, m_max_seq, g.seed);
        MaskMode mode = parse_mode(m_mode);
        const Batch& b = batches.front();
        auto plan = sample_mask_plan(b, find_candidate_spans(b, MaskSampleConfig{}.max_len),
                                     g.seed, mode);
        json out;
        out["mode"] = m_mode;
        out["batch_sequences"] = b.sequences.size();
        out["spans"] = json::array();
        for (const auto& s : plan.spans)
            out["spans"].push_back({{"sequence", s.batch_seq_index},
                                    {"start", s.start},
                                    {"length", s.length},
                                    {"ngram", v.decode(s.original)}});
        std::cout << out.dump(2) << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
