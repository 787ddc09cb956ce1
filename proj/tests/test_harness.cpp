#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "npm/harness.hpp"
#include "npm/inference.hpp"
#include "support/synthetic.hpp"

using namespace npm;
using namespace npm::testsupport;

namespace {

EncoderParams small_encoder(std::uint32_t vocab_size, std::uint32_t seed = 3) {
    EncoderConfig c;
    c.h = 8;
    c.n_layers = 1;
    c.window = 2;
    c.max_positions = 64;
    c.vocab_size = vocab_size;
    c.seed = seed;
    return init_params(c);
}

}  // namespace

TEST_CASE("answer normalization") {
    CHECK(normalize_answer("Seattle") == "seattle");
    CHECK(normalize_answer(" the  answer ") == "the answer");
    CHECK(normalize_answer("\"quoted\"") == "quoted");
    CHECK(normalize_answer("trailing.") == "trailing");
    CHECK(normalize_answer("...") == "");
    CHECK(normalize_answer("") == "");
    // Idempotence.
    for (const char* s : {"A  B.", "  x ", "Mixed CASE!"})
        CHECK(normalize_answer(normalize_answer(s)) == normalize_answer(s));
}

TEST_CASE("exact match") {
    CHECK(exact_match("Seattle", {"seattle"}) == 1);
    CHECK(exact_match("Seattle Seahawks", {"Seahawks"}) == 0);
    CHECK(exact_match(" the  answer ", {"the answer"}) == 1);
    CHECK(exact_match("b", {"a", "b", "c"}) == 1);
    CHECK(exact_match("d", {"a", "b", "c"}) == 0);
    // Symmetric under answer-list permutation.
    CHECK(exact_match("b", {"c", "b", "a"}) == 1);
}

TEST_CASE("answer buckets use the shortest answer") {
    Vocab v = train_vocab({"a b c d e"}, 32);
    CHECK(answer_bucket({"[MASK]", {"a"}, ""}, v) == 0);
    CHECK(answer_bucket({"[MASK]", {"a b"}, ""}, v) == 1);
    CHECK(answer_bucket({"[MASK]", {"a b c"}, ""}, v) == 2);
    CHECK(answer_bucket({"[MASK]", {"a b c d"}, ""}, v) == 3);
    CHECK(answer_bucket({"[MASK]", {"a b c d e"}, ""}, v) == 3);
    CHECK(answer_bucket({"[MASK]", {"a b c", "d"}, ""}, v) == 0);
}

TEST_CASE("evaluate bucket arithmetic") {
    Vocab v = train_vocab({"a b c d q r s"}, 32);
    std::vector<EvalExample> data{
        {"q [MASK]", {"a"}, ""},       // bucket 1, predict right
        {"r [MASK]", {"b"}, ""},       // bucket 1, predict wrong
        {"s [MASK]", {"c d"}, ""},     // bucket 2, predict right
    };
    Predictor p = [&](const TokenSeq& q) -> std::string {
        if (q[0] == v.lookup("q")) return "a";
        if (q[0] == v.lookup("s")) return "c d";
        return "x";
    };
    auto rep = evaluate(data, v, p);
    CHECK(rep.per_bucket_em[0] == doctest::Approx(0.5));
    CHECK(rep.per_bucket_em[1] == doctest::Approx(1.0));
    CHECK(rep.bucket_counts[0] == 2);
    CHECK(rep.bucket_counts[1] == 1);
    CHECK(rep.bucket_counts[2] == 0);
    CHECK(rep.bucket_avg_em == doctest::Approx(0.75));
    CHECK(rep.overall_em == doctest::Approx(2.0 / 3));
    REQUIRE(rep.examples.size() == 3);
    CHECK(rep.examples[0].em == 1);
    CHECK(rep.examples[1].em == 0);

    CHECK_THROWS_AS(evaluate({}, v, p), std::invalid_argument);
}

TEST_CASE("bucket average invariant to within-bucket duplication; overall is not") {
    Vocab v = train_vocab({"a b q s"}, 32);
    std::vector<EvalExample> data{
        {"q [MASK]", {"a"}, ""},
        {"s [MASK]", {"a b"}, ""},
    };
    Predictor p = [&](const TokenSeq& q) -> std::string {
        return q[0] == v.lookup("q") ? "a" : "x";
    };
    auto base = evaluate(data, v, p);
    std::vector<EvalExample> dup = data;
    dup.push_back(data[0]);
    dup.push_back(data[0]);
    auto duped = evaluate(dup, v, p);
    CHECK(duped.bucket_avg_em == doctest::Approx(base.bucket_avg_em));
    CHECK(duped.overall_em != doctest::Approx(base.overall_em));
}

TEST_CASE("dataset loading") {
    std::string path = "dataset_test.jsonl";
    {
        std::ofstream f(path);
        f << R"({"query": "the [MASK] is here", "answers": ["cat"]})" << "\n";
        f << "\n";
        f << R"({"query": "x [MASK]", "answers": ["a", "b"], "label": "L"})" << "\n";
    }
    auto data = load_dataset_jsonl(path);
    REQUIRE(data.size() == 2);
    CHECK(data[0].query == "the [MASK] is here");
    CHECK(data[0].answers == std::vector<std::string>{"cat"});
    CHECK(data[1].label == "L");
    CHECK(load_dataset_jsonl(path, 1).size() == 1);

    {
        std::ofstream f(path);
        f << R"({"query": "ok [MASK]", "answers": ["a"]})" << "\n";
        f << R"({"query": "no mask here", "answers": ["a"]})" << "\n";
    }
    CHECK_THROWS_WITH(load_dataset_jsonl(path),
                      "dataset_test.jsonl:2: query lacks [MASK] placeholder");
    std::remove(path.c_str());
}

TEST_CASE("corpus swap: identical corpora give identical reports") {
    SyntheticSpec spec;
    spec.n_entities = 6;
    spec.n_relations = 2;
    spec.n_objects = 8;
    spec.repeats = 3;
    auto data = make_synthetic(spec);
    Vocab v = train_vocab(data.doc_texts, 256);
    auto docs = encode_docs(data, v);
    auto enc = small_encoder(static_cast<std::uint32_t>(v.size()));

    std::vector<EvalExample> dataset;
    for (std::size_t i = 0; i < 5; ++i) dataset.push_back(fact_example(data.facts[i]));

    SwapConfig cfg;
    cfg.max_seq_len = 32;
    cfg.k = 64;
    cfg.l_max = 3;
    auto rep = corpus_swap_experiment(enc, v, docs, docs, dataset, dataset, cfg);
    CHECK(rep.changed_old.overall_em == rep.changed_new.overall_em);
    CHECK(rep.unchanged_old.overall_em == rep.unchanged_new.overall_em);
    for (std::size_t i = 0; i < rep.changed_old.examples.size(); ++i)
        CHECK(rep.changed_old.examples[i].prediction ==
              rep.changed_new.examples[i].prediction);

    // Empty changed set leaves the changed reports untouched.
    auto partial = corpus_swap_experiment(enc, v, docs, docs, {}, dataset, cfg);
    CHECK(partial.changed_old.examples.empty());
    CHECK_FALSE(partial.unchanged_old.examples.empty());
}

TEST_CASE("corpus swap never mutates encoder parameters") {
    SyntheticSpec spec;
    spec.n_entities = 4;
    spec.n_relations = 2;
    spec.n_objects = 5;
    spec.repeats = 2;
    auto data = make_synthetic(spec);
    Vocab v = train_vocab(data.doc_texts, 256);
    auto docs = encode_docs(data, v);
    auto enc = small_encoder(static_cast<std::uint32_t>(v.size()));
    Vector before = flatten(enc);

    std::vector<EvalExample> dataset{fact_example(data.facts[0])};
    SwapConfig cfg;
    cfg.max_seq_len = 32;
    cfg.k = 32;
    cfg.l_max = 2;
    corpus_swap_experiment(enc, v, docs, docs, dataset, dataset, cfg);
    CHECK(flatten(enc) == before);
}

TEST_CASE("unseen token probe precondition checks") {
    Vocab v = train_vocab({"the city of rome", "the city of kyiv"}, 64);
    std::vector<Document> training{{"t", v.encode("the city of rome")}};
    std::vector<Document> reference{{"r", v.encode("the city of kyiv")}};
    auto enc = small_encoder(static_cast<std::uint32_t>(v.size()));
    SwapConfig cfg;
    cfg.max_seq_len = 32;
    cfg.k = 16;
    cfg.l_max = 2;

    // Answer present in training corpus -> rejected.
    std::vector<EvalExample> bad{{"the city of [MASK]", {"rome"}, ""}};
    CHECK_THROWS_AS(unseen_token_probe(enc, v, training, reference, bad, cfg),
                    std::runtime_error);

    // Answer absent from reference corpus -> rejected.
    std::vector<EvalExample> unsat{{"the city of [MASK]", {"paris"}, ""}};
    CHECK_THROWS_WITH(
        unseen_token_probe(enc, v, training, reference, unsat, cfg),
        "probe not satisfiable: answer 'paris' absent from reference corpus");

    // Valid probe runs and respects output-space closure.
    std::vector<EvalExample> good{{"the city of [MASK]", {"kyiv"}, ""}};
    auto rep = unseen_token_probe(enc, v, training, reference, good, cfg);
    CHECK(rep.closure_violations == 0);
    CHECK(rep.eval.examples.size() == 1);
}
