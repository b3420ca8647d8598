#include "lanmt/teacher.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace lanmt;
using namespace lanmt::testing;

namespace {

// Best log-prob among the ids decoding may emit: eos and ordinary tokens.
double row_argmax_value(const Matrix& m, int row) {
    return std::max(m(row, kEosId), m.row(row).tail(m.cols() - kReservedCount).maxCoeff());
}

// Small digit-to-word teacher trained once and shared by the tests below.
struct TrainedDigits {
    Vocab vocab;
    std::vector<SentencePair> train;
    std::vector<SentencePair> heldout;
    TeacherModel model;

    static TrainedDigits make() {
        auto spec = default_task(TaskKind::DigitToWord, 21);
        spec.max_length = 6;
        const auto raw = generate_synthetic(spec, 2200);
        const Vocab vocab = build_vocab(raw, 1);
        auto pairs = encode_pairs(vocab, raw);
        std::vector<SentencePair> heldout(pairs.begin() + 2000, pairs.end());
        pairs.resize(2000);
        TeacherConfig c = tiny_teacher_config(vocab.size());
        c.hidden = 32;
        c.feed_forward = 64;
        c.heads = 4;
        c.max_steps = 500;
        c.warmup_steps = 50;
        c.peak_learning_rate = 3e-3;
        TeacherModel model = train_teacher(pairs, c, 5);
        return {vocab, pairs, heldout, std::move(model)};
    }
};

const TrainedDigits& trained_digits() {
    static const TrainedDigits t = TrainedDigits::make();
    return t;
}

}  // namespace

TEST_CASE("incremental decoding equals the full forward pass") {
    const TeacherModel model(tiny_teacher_config(12), 3);
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        const TokenIds x = random_ids(rng, 1 + trial % 5, 12);
        const TokenIds y = random_ids(rng, 1 + trial % 4, 12);
        const Matrix full = model.position_log_probs(x, y);
        auto state = model.start(x);
        double incremental = 0;
        int prev = kBosId;
        for (std::size_t i = 0; i <= y.size(); ++i) {
            const RowVector lp = model.step(state, prev);
            CHECK((lp - full.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff() < 1e-10);
            const int next = i < y.size() ? y[i] : kEosId;
            incremental += lp(next);
            prev = next;
        }
        CHECK(teacher_log_prob(model, x, y) == doctest::Approx(incremental).epsilon(1e-12));
    }
}

TEST_CASE("teacher log-probs are causal and normalised") {
    const TeacherModel model(tiny_teacher_config(10), 4);
    Rng rng(2);
    const TokenIds x = random_ids(rng, 4, 10);
    TokenIds y = random_ids(rng, 6, 10);
    const Matrix before = model.position_log_probs(x, y);
    for (Eigen::Index i = 0; i < before.rows(); ++i) {
        CHECK(before.row(i).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-5));
    }
    const int j = 3;
    y[j] = y[j] == 4 ? 5 : 4;
    const Matrix after = model.position_log_probs(x, y);
    // Row i predicts y_i from y_<i, so rows 0..j see no change.
    CHECK(before.topRows(j + 1).isApprox(after.topRows(j + 1), 0.0));
    CHECK(!before.bottomRows(before.rows() - j - 1).isApprox(after.bottomRows(after.rows() - j - 1)));
}

TEST_CASE("zeroed output layer gives uniform token probabilities") {
    TeacherModel model(tiny_teacher_config(6), 7);
    model.params().get("output/weight").value.setZero();
    model.params().get("output/bias").value.setZero();
    const TokenIds x = {4, 5};
    const TokenIds y = {4};
    CHECK(std::exp(teacher_log_prob(model, x, y)) == doctest::Approx(1.0 / 36).epsilon(0.1));
}

TEST_CASE("teacher_log_prob rejects ids outside the vocabulary") {
    const TeacherModel model(tiny_teacher_config(6), 1);
    CHECK_THROWS_AS(teacher_log_prob(model, TokenIds{4, 6}, TokenIds{4}), std::out_of_range);
    CHECK_THROWS_AS(teacher_log_prob(model, TokenIds{4}, TokenIds{-1}), std::out_of_range);
}

TEST_CASE("greedy picks maximise every step conditional") {
    const TeacherModel model(tiny_teacher_config(9), 8);
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const TokenIds x = random_ids(rng, 2 + trial % 4, 9);
        const Hypothesis h = greedy_decode(model, x);
        const Matrix lp = model.position_log_probs(x, h.tokens);
        for (std::size_t i = 0; i < h.tokens.size(); ++i) {
            CHECK(lp(static_cast<Eigen::Index>(i), h.tokens[i]) ==
                  row_argmax_value(lp, static_cast<int>(i)));
        }
        if (h.finished) {
            const auto last = static_cast<int>(h.tokens.size());
            CHECK(lp(last, kEosId) == row_argmax_value(lp, last));
        }
    }
}

TEST_CASE("beam size one reproduces greedy decoding") {
    const TeacherModel model(tiny_teacher_config(11), 9);
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const TokenIds x = random_ids(rng, 1 + trial % 6, 11);
        const Hypothesis g = greedy_decode(model, x);
        const Hypothesis b = beam_decode(model, x, 1);
        CHECK(g.tokens == b.tokens);
        CHECK(g.finished == b.finished);
    }
}

TEST_CASE("beam search returns the best unfinished hypothesis when max_len is hit") {
    const TeacherModel model(tiny_teacher_config(8), 2);
    const Hypothesis h = beam_decode(model, TokenIds{4, 5, 6}, 3, 0);
    CHECK(!h.finished);
    CHECK(h.tokens.empty());
}

TEST_CASE("zero training steps leave the initialisation untouched") {
    TeacherConfig c = tiny_teacher_config(8);
    c.max_steps = 0;
    const std::vector<SentencePair> pairs = {{{4, 5}, {6, 7}}};
    const TeacherModel trained = train_teacher(pairs, c, 12);
    const TeacherModel fresh(c, 12);
    for (const auto& [name, p] : fresh.params()) {
        CHECK(trained.params().get(name).value == p->value);
    }
}

TEST_CASE("checkpoint round trip preserves the teacher") {
    const TeacherModel model(tiny_teacher_config(9), 6);
    const auto dir = temp_dir("teacher_ckpt");
    save_teacher(model, dir / "t.ckpt");
    const TeacherModel loaded = load_teacher(dir / "t.ckpt");
    const TokenIds x = {4, 8, 5};
    const TokenIds y = {7, 6};
    CHECK(teacher_log_prob(loaded, x, y) == teacher_log_prob(model, x, y));
}

TEST_CASE("trained digit-to-word teacher") {
    const auto& t = trained_digits();
    int exact = 0;
    for (const auto& p : t.heldout) {
        exact += greedy_decode(t.model, p.source).tokens == p.target ? 1 : 0;
    }
    CHECK(exact >= static_cast<int>(0.99 * static_cast<double>(t.heldout.size())));

    const TokenIds x = t.vocab.encode(Tokens{"3", "1"});
    CHECK(t.vocab.decode(beam_decode(t.model, x, 3).tokens) == Tokens{"three", "one"});

    std::vector<SentencePair> sample(t.train.begin(), t.train.begin() + 100);
    const DistillResult a = distill_corpus(t.model, sample, 1);
    const DistillResult b = distill_corpus(t.model, sample, 1);
    CHECK(a.pairs == b.pairs);
    int same = 0;
    std::size_t k = 0;
    for (const auto& p : sample) {
        const TokenIds greedy = greedy_decode(t.model, p.source).tokens;
        if (greedy.empty()) {
            continue;
        }
        REQUIRE(k < a.pairs.size());
        CHECK(a.pairs[k].source == p.source);
        CHECK(a.pairs[k].target == greedy);
        same += greedy == p.target ? 1 : 0;
        ++k;
    }
    CHECK(k == a.pairs.size());
    CHECK(same >= 99);
}
