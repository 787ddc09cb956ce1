#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "npm/objective.hpp"
#include "npm/vocab.hpp"
#include "support/synthetic.hpp"

using namespace npm;

namespace {

Batch make_batch(const Vocab& v, const std::vector<std::string>& texts) {
    Batch b;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        Sequence s;
        s.doc_id = "d";
        s.seq_index = static_cast<std::uint32_t>(i);
        s.token_ids = v.encode(texts[i]);
        b.sequences.push_back(std::move(s));
    }
    return b;
}

// Hand-set encodings: one matrix per sequence, h columns.
std::vector<Matrix> constant_encodings(const Batch& b, int h, Scalar value) {
    std::vector<Matrix> out;
    for (const auto& s : b.sequences)
        out.push_back(Matrix::Constant(s.token_ids.size(), h, value));
    return out;
}

}  // namespace

TEST_CASE("collect_pos_neg direct match") {
    Vocab v = train_vocab({"x a b y z"}, 32);
    Batch b = make_batch(v, {"x a b y", "a b z"});
    MaskedSpan span{0, 1, 2, {v.lookup("a"), v.lookup("b")}};
    auto sets = collect_pos_neg(b, span);
    REQUIRE(sets.start_pos.size() == 1);
    CHECK(sets.start_pos[0].seq == 1);
    CHECK(sets.start_pos[0].offset == 0);
    REQUIRE(sets.end_pos.size() == 1);
    CHECK(sets.end_pos[0].offset == 1);
    // Seq 1 has 3 tokens, |g|=2: 2 valid start positions, 1 positive.
    CHECK(sets.start_neg.size() == 1);
}

TEST_CASE("length-1 span: start and end positives coincide") {
    Vocab v = train_vocab({"x a b y z"}, 32);
    Batch b = make_batch(v, {"x a b y", "a b z"});
    MaskedSpan span{0, 1, 1, {v.lookup("a")}};
    auto sets = collect_pos_neg(b, span);
    REQUIRE(sets.start_pos.size() == 1);
    REQUIRE(sets.end_pos.size() == 1);
    CHECK(sets.start_pos[0].offset == sets.end_pos[0].offset);
}

TEST_CASE("missing positive violates the masking contract") {
    Vocab v = train_vocab({"x a b y z q"}, 32);
    Batch b = make_batch(v, {"x a b y", "z q"});
    MaskedSpan span{0, 1, 2, {v.lookup("a"), v.lookup("b")}};
    CHECK_THROWS_WITH(collect_pos_neg(b, span),
                      "masking contract violated: no in-batch positive");
}

TEST_CASE("phrase loss symmetric one-positive-one-negative gives ln 2") {
    Vocab v = train_vocab({"p n x"}, 32);
    // Seq 0 masks "p"; seq 1 = "p n": one positive, one negative per side.
    Batch b = make_batch(v, {"p x", "p n"});
    MaskPlan plan;
    plan.mode = MaskMode::kPhrase;
    plan.spans.push_back({0, 0, 1, {v.lookup("p")}});
    auto masked_seqs = apply_mask_batch(b, plan);

    int h = 4;
    // All encodings identical: sim(x, pos) = sim(x, neg).
    std::vector<Matrix> unmasked = constant_encodings(b, h, 0.5);
    std::vector<Matrix> masked;
    for (const auto& ms : masked_seqs)
        masked.push_back(Matrix::Constant(ms.tokens.size(), h, 0.5));

    auto report = phrase_loss(b, masked_seqs, masked, unmasked, plan);
    REQUIRE(report.n_spans == 1);
    CHECK(report.per_span[0].start_loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(report.per_span[0].end_loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("phrase loss zero when no negatives") {
    Vocab v = train_vocab({"p x"}, 32);
    Batch b = make_batch(v, {"p x", "p"});  // seq 1 is just the positive
    MaskPlan plan;
    plan.mode = MaskMode::kPhrase;
    plan.spans.push_back({0, 0, 1, {v.lookup("p")}});
    auto masked_seqs = apply_mask_batch(b, plan);
    std::vector<Matrix> unmasked = constant_encodings(b, 4, 0.3);
    std::vector<Matrix> masked;
    for (const auto& ms : masked_seqs)
        masked.push_back(Matrix::Constant(ms.tokens.size(), 4, 0.3));
    auto report = phrase_loss(b, masked_seqs, masked, unmasked, plan);
    CHECK(report.total == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("phrase loss scalar oracle: sims pos=1 neg=0") {
    Vocab v = train_vocab({"p n x"}, 32);
    Batch b = make_batch(v, {"p x", "p n"});
    MaskPlan plan;
    plan.mode = MaskMode::kPhrase;
    plan.spans.push_back({0, 0, 1, {v.lookup("p")}});
    auto masked_seqs = apply_mask_batch(b, plan);

    // h = 4, sim scales by 1/sqrt(4) = 1/2. Query (2,0,0,0); pos (1,0,0,0)
    // gives sim 1; neg orthogonal gives 0.
    int h = 4;
    std::vector<Matrix> unmasked = constant_encodings(b, h, 0.0);
    unmasked[1].row(0) << 1, 0, 0, 0;  // positive "p"
    unmasked[1].row(1) << 0, 1, 0, 0;  // negative "n"
    std::vector<Matrix> masked;
    for (const auto& ms : masked_seqs) masked.push_back(Matrix::Zero(ms.tokens.size(), h));
    masked[0].row(0) << 2, 0, 0, 0;  // MASK_S
    masked[0].row(1) << 2, 0, 0, 0;  // MASK_E

    auto report = phrase_loss(b, masked_seqs, masked, unmasked, plan);
    Scalar expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(report.per_span[0].start_loss == doctest::Approx(expect).epsilon(1e-12));
    CHECK(report.per_span[0].end_loss == doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.31326).epsilon(1e-4));
}

TEST_CASE("single loss ln 2 and all-equal cases") {
    Vocab v = train_vocab({"p n"}, 32);
    MaskPlan plan;
    plan.mode = MaskMode::kSingle;

    Batch b = make_batch(v, {"p", "p n"});
    plan.spans.push_back({0, 0, 1, {v.lookup("p")}});
    auto masked_seqs = apply_mask_batch(b, plan);
    std::vector<Matrix> unmasked = constant_encodings(b, 4, 0.5);
    std::vector<Matrix> masked = constant_encodings(b, 4, 0.5);
    auto report = single_loss(b, masked_seqs, masked, unmasked, plan);
    REQUIRE(report.n_spans == 1);
    CHECK(report.total == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // All other-sequence tokens equal to the target -> loss 0.
    Batch b2 = make_batch(v, {"p", "p p"});
    auto masked2 = apply_mask_batch(b2, plan);
    auto report2 = single_loss(b2, masked2, constant_encodings(b2, 4, 0.5),
                               constant_encodings(b2, 4, 0.5), plan);
    CHECK(report2.total == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("single loss matches independent scalar recomputation") {
    Vocab v = train_vocab({"p n m"}, 32);
    Batch b = make_batch(v, {"p n", "p m", "n m p"});
    MaskPlan plan;
    plan.mode = MaskMode::kSingle;
    plan.spans.push_back({0, 0, 1, {v.lookup("p")}});
    auto masked_seqs = apply_mask_batch(b, plan);

    int h = 2;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<Scalar> unif(-1, 1);
    std::vector<Matrix> unmasked, masked;
    for (const auto& s : b.sequences) {
        Matrix m(s.token_ids.size(), h);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = unif(rng);
        unmasked.push_back(m);
    }
    for (const auto& ms : masked_seqs) {
        Matrix m(ms.tokens.size(), h);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = unif(rng);
        masked.push_back(m);
    }

    auto report = single_loss(b, masked_seqs, masked, unmasked, plan);

    // Scalar recomputation with plain loops.
    Vector q = masked[0].row(0).transpose();
    double num = 0, den = 0;
    for (std::size_t j = 1; j < 3; ++j) {
        for (std::size_t t = 0; t < b.sequences[j].token_ids.size(); ++t) {
            double s = 0;
            for (int d = 0; d < h; ++d) s += q[d] * unmasked[j](t, d);
            s /= std::sqrt(static_cast<double>(h));
            den += std::exp(s);
            if (b.sequences[j].token_ids[t] == v.lookup("p")) num += std::exp(s);
        }
    }
    CHECK(report.total == doctest::Approx(-std::log(num / den)).epsilon(1e-12));
}

TEST_CASE("batch permutation leaves total loss unchanged") {
    Vocab v = train_vocab({"a b c d"}, 32);
    Batch b = make_batch(v, {"a b c", "b c d", "c a b"});
    auto cands = find_candidate_spans(b, 3);
    auto plan = sample_mask_plan(b, cands, 9, MaskMode::kPhrase);
    REQUIRE_FALSE(plan.spans.empty());
    auto masked_seqs = apply_mask_batch(b, plan);

    EncoderConfig cfg;
    cfg.h = 8;
    cfg.n_layers = 1;
    cfg.window = 2;
    cfg.max_positions = 16;
    cfg.vocab_size = static_cast<std::uint32_t>(v.size());
    cfg.seed = 4;
    auto params = init_params(cfg);
    std::vector<Matrix> masked, unmasked;
    for (std::size_t i = 0; i < b.sequences.size(); ++i) {
        masked.push_back(encode_sequence(params, masked_seqs[i].tokens));
        unmasked.push_back(encode_sequence(params, b.sequences[i].token_ids));
    }
    auto base = phrase_loss(b, masked_seqs, masked, unmasked, plan);

    // Permute sequences 0<->2 (remap plan indices accordingly).
    std::vector<std::size_t> perm{2, 1, 0};
    Batch pb;
    for (std::size_t i : perm) pb.sequences.push_back(b.sequences[i]);
    MaskPlan pplan;
    pplan.mode = plan.mode;
    for (auto s : plan.spans) {
        s.batch_seq_index = perm[s.batch_seq_index];  // involution
        pplan.spans.push_back(s);
    }
    std::sort(pplan.spans.begin(), pplan.spans.end(),
              [](const MaskedSpan& a, const MaskedSpan& b) {
                  return a.batch_seq_index < b.batch_seq_index;
              });
    auto pmasked_seqs = apply_mask_batch(pb, pplan);
    std::vector<Matrix> pmasked, punmasked;
    for (std::size_t i = 0; i < pb.sequences.size(); ++i) {
        pmasked.push_back(encode_sequence(params, pmasked_seqs[i].tokens));
        punmasked.push_back(encode_sequence(params, pb.sequences[i].token_ids));
    }
    auto permuted = phrase_loss(pb, pmasked_seqs, pmasked, punmasked, pplan);
    CHECK(permuted.total == doctest::Approx(base.total).epsilon(1e-10));
}

TEST_CASE("duplicating a positive strictly decreases the side loss") {
    Vocab v = train_vocab({"p n x"}, 32);
    MaskPlan plan;
    plan.mode = MaskMode::kPhrase;
    plan.spans.push_back({0, 0, 1, {v.lookup("p")}});

    auto run = [&](const std::vector<std::string>& texts) {
        Batch b = make_batch(v, texts);
        auto masked_seqs = apply_mask_batch(b, plan);
        std::vector<Matrix> unmasked, masked;
        for (const auto& s : b.sequences) {
            Matrix m = Matrix::Zero(s.token_ids.size(), 2);
            for (std::size_t t = 0; t < s.token_ids.size(); ++t)
                m(t, 0) = s.token_ids[t] == v.lookup("p") ? 1.0 : -0.5;
            unmasked.push_back(m);
        }
        for (const auto& ms : masked_seqs) {
            Matrix m = Matrix::Zero(ms.tokens.size(), 2);
            m(0, 0) = 1.0;
            m(1, 0) = 1.0;
            masked.push_back(m);
        }
        return phrase_loss(b, masked_seqs, masked, unmasked, plan).per_span[0].start_loss;
    };
    Scalar one_pos = run({"p x", "p n"});
    Scalar two_pos = run({"p x", "p n p"});
    CHECK(two_pos < one_pos);
}

TEST_CASE("loss gradients match finite differences through the encoder") {
    Vocab v = train_vocab({"a b c d"}, 32);
    Batch b = make_batch(v, {"a b c", "b c d", "c a b"});
    auto cands = find_candidate_spans(b, 3);

    for (auto mode : {MaskMode::kPhrase, MaskMode::kSingle}) {
        auto plan = sample_mask_plan(b, cands, 13, mode);
        REQUIRE_FALSE(plan.spans.empty());
        auto masked_seqs = apply_mask_batch(b, plan);

        EncoderConfig cfg;
        cfg.h = 4;
        cfg.n_layers = 2;
        cfg.window = 1;
        cfg.max_positions = 16;
        cfg.vocab_size = static_cast<std::uint32_t>(v.size());
        cfg.seed = 11;
        auto params = init_params(cfg);

        auto loss_of = [&](const EncoderParams& p) {
            std::vector<Matrix> masked, unmasked;
            for (std::size_t i = 0; i < b.sequences.size(); ++i) {
                masked.push_back(encode_sequence(p, masked_seqs[i].tokens));
                unmasked.push_back(encode_sequence(p, b.sequences[i].token_ids));
            }
            return (mode == MaskMode::kPhrase
                        ? phrase_loss(b, masked_seqs, masked, unmasked, plan)
                        : single_loss(b, masked_seqs, masked, unmasked, plan))
                .total;
        };

        // Analytic gradient via encoding grads + backward.
        std::vector<ForwardTrace> mtr, utr;
        std::vector<Matrix> masked, unmasked;
        for (std::size_t i = 0; i < b.sequences.size(); ++i) {
            mtr.push_back(forward_trace(params, masked_seqs[i].tokens));
            masked.push_back(mtr.back().output());
            utr.push_back(forward_trace(params, b.sequences[i].token_ids));
            unmasked.push_back(utr.back().output());
        }
        EncodingGrads eg;
        (mode == MaskMode::kPhrase
             ? phrase_loss(b, masked_seqs, masked, unmasked, plan, &eg)
             : single_loss(b, masked_seqs, masked, unmasked, plan, &eg));
        EncoderParams pg = zeros_like(params);
        for (std::size_t i = 0; i < b.sequences.size(); ++i) {
            backward(params, mtr[i], eg.masked[i], pg);
            backward(params, utr[i], eg.unmasked[i], pg);
        }
        Vector analytic = flatten(pg);

        // Central finite differences.
        Vector flat = flatten(params);
        Vector numeric(flat.size());
        const Scalar step = 1e-4;
        for (Eigen::Index i = 0; i < flat.size(); ++i) {
            Vector plus = flat, minus = flat;
            plus[i] += step;
            minus[i] -= step;
            unflatten(plus, params);
            Scalar lp = loss_of(params);
            unflatten(minus, params);
            Scalar lm = loss_of(params);
            numeric[i] = (lp - lm) / (2 * step);
        }
        unflatten(flat, params);
        CHECK((analytic - numeric).norm() / std::max<Scalar>(numeric.norm(), 1e-12) < 1e-4);
    }
}

TEST_CASE("train: zero learning rate leaves params unchanged; determinism") {
    using namespace npm::testsupport;
    SyntheticSpec spec;
    spec.n_entities = 4;
    spec.n_relations = 2;
    spec.n_objects = 6;
    spec.repeats = 4;
    auto data = make_synthetic(spec);
    Vocab v = train_vocab(data.doc_texts, 256);
    auto docs = encode_docs(data, v);

    EncoderConfig cfg;
    cfg.h = 8;
    cfg.n_layers = 1;
    cfg.window = 2;
    // Phrase masking can grow a sequence by one token per span.
    cfg.max_positions = 48;
    cfg.vocab_size = static_cast<std::uint32_t>(v.size());
    cfg.seed = 2;
    auto params = init_params(cfg);

    TrainConfig tc;
    tc.learning_rate = 0;
    tc.total_steps = 3;
    tc.warmup_steps = 1;
    tc.batch_size = 4;
    tc.max_seq_len = 32;
    tc.seed = 5;
    auto frozen = train(docs, params, tc, MaskMode::kPhrase);
    CHECK(flatten(frozen.params) == flatten(params));

    tc.learning_rate = 1e-3;
    auto r1 = train(docs, params, tc, MaskMode::kPhrase);
    auto r2 = train(docs, params, tc, MaskMode::kPhrase);
    CHECK(flatten(r1.params) == flatten(r2.params));
    REQUIRE(r1.trajectory.size() == r2.trajectory.size());
    for (std::size_t i = 0; i < r1.trajectory.size(); ++i)
        CHECK(r1.trajectory[i].loss == r2.trajectory[i].loss);
}
