#include "lanmt/inference.hpp"

#include "lanmt/objective.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace lanmt;
using namespace lanmt::testing;

namespace {

constexpr int kVocab = 12;

LatentModel small_model(std::uint64_t seed) {
    LatentModelConfig c = tiny_latent_config(kVocab);
    c.length_pooling = LengthPooling::Sum;
    LatentModel model(c, seed);
    // Shift the length head towards offset 0 so decoded lengths resemble |x|.
    model.params().get("length/output/bias").value(0, 50) = 6.0;
    return model;
}

std::vector<TokenIds> random_sources(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenIds> out;
    for (int i = 0; i < n; ++i) {
        out.push_back(random_ids(rng, 1 + i % 7, kVocab));
    }
    return out;
}

}  // namespace

TEST_CASE("init_delta and fit_delta return the encoder means") {
    const LatentModel model = small_model(1);
    const TokenIds x = {4, 5, 6, 7};
    CHECK(init_delta(model, x).mu.vectors == prior_encode(model, x).first.means);
    const TokenIds y = {8, 9, 10};
    CHECK(fit_delta(model, x, y).mu.vectors == posterior_encode(model, x, y).means);
}

TEST_CASE("the delta location is the posterior mode") {
    const LatentModel model = small_model(2);
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const TokenIds x = random_ids(rng, 1 + trial % 5, kVocab);
        const TokenIds y = random_ids(rng, 1 + trial % 4, kVocab);
        const GaussianSequence q = posterior_encode(model, x, y);
        const Matrix mu = fit_delta(model, x, y).mu.vectors;
        const Matrix other = mu + random_matrix(rng, mu.rows(), mu.cols(), 0.1);
        CHECK(gaussian_log_density(q, mu) > gaussian_log_density(q, other));
    }
}

TEST_CASE("gaussian log density closed form") {
    const GaussianSequence g{Matrix::Constant(1, 2, 1.0), Matrix::Constant(1, 2, 2.0)};
    const double one = -0.5 * std::log(2 * std::numbers::pi) - std::log(2.0) - 0.125;
    CHECK(gaussian_log_density(g, Matrix::Constant(1, 2, 2.0)) == doctest::Approx(2 * one));
}

TEST_CASE("uniform outputs break ties towards the lowest id and floor the length") {
    LatentModel model(tiny_latent_config(kVocab), 3);
    model.zero_output_layers();
    const TokenIds x = {4, 5, 6};
    const auto [prior, enc] = prior_encode(model, x);
    const DecodedTarget d = argmax_decode(model, LatentSequence{prior.means}, enc);
    // Uniform offsets pick -50, so |x| - 50 is floored to one token.
    CHECK(d.length == 1);
    CHECK(d.tokens == TokenIds{0});
    CHECK(d.length_log_prob == doctest::Approx(std::log(1.0 / 101)));
    CHECK(d.decoder_log_prob == doctest::Approx(std::log(1.0 / kVocab)));
}

TEST_CASE("zero steps is the single-pass decode") {
    const LatentModel model = small_model(4);
    for (const TokenIds& x : random_sources(20, 4)) {
        const InferenceResult r = deterministic_inference(model, x, 0);
        const auto [prior, enc] = prior_encode(model, x);
        const DecodedTarget d = argmax_decode(model, init_delta(model, x).mu, enc);
        CHECK(r.tokens == d.tokens);
        CHECK(r.trace.iterations() == 0);
        CHECK(r.trace.steps[0].mu == prior.means);
    }
}

TEST_CASE("trace invariants") {
    const LatentModel model = small_model(5);
    for (int steps : {1, 2, 4}) {
        for (const TokenIds& x : random_sources(30, 5 + steps)) {
            const InferenceResult r = deterministic_inference(model, x, steps);
            const auto& s = r.trace.steps;
            REQUIRE(!s.empty());
            CHECK(r.trace.iterations() <= steps);
            CHECK(r.tokens == s.back().tokens);
            for (const auto& step : s) {
                CHECK(step.length == static_cast<int>(step.tokens.size()));
                CHECK(step.length >= 1);
                CHECK(step.mu.rows() == static_cast<Eigen::Index>(x.size()));
            }
            if (r.trace.converged) {
                REQUIRE(s.size() >= 2);
                CHECK(s[s.size() - 1].tokens == s[s.size() - 2].tokens);
            } else {
                CHECK(r.trace.iterations() == steps);
            }
            for (std::size_t t = 1; t + 1 < s.size(); ++t) {
                CHECK(s[t].tokens != s[t - 1].tokens);
            }
            if (!r.trace.converged && s.size() >= 2) {
                CHECK(s[s.size() - 1].tokens != s[s.size() - 2].tokens);
            }
        }
    }
}

TEST_CASE("batched translation equals one sentence at a time") {
    const LatentModel model = small_model(6);
    const auto sources = random_sources(37, 6);
    for (int batch : {1, 5, 32}) {
        const auto batched = translate_batch(model, sources, 2, batch);
        REQUIRE(batched.size() == sources.size());
        for (std::size_t i = 0; i < sources.size(); ++i) {
            const InferenceResult single = deterministic_inference(model, sources[i], 2);
            CHECK(batched[i].tokens == single.tokens);
            CHECK(batched[i].trace.steps.size() == single.trace.steps.size());
            CHECK(batched[i].trace.converged == single.trace.converged);
        }
    }
}

TEST_CASE("latent search") {
    const LatentModel model = small_model(7);
    const TeacherModel teacher(tiny_teacher_config(kVocab), 7);
    const auto sources = random_sources(15, 7);

    SUBCASE("one noiseless candidate is deterministic inference") {
        for (const TokenIds& x : sources) {
            CHECK(latent_search(model, teacher, x, 1, 0.0, 1, 3).tokens ==
                  deterministic_inference(model, x, 1).tokens);
            CHECK(latent_search(model, teacher, x, 1, 0.5, 1, 3).tokens ==
                  deterministic_inference(model, x, 1).tokens);
        }
    }
    SUBCASE("seeded and dominant") {
        for (const TokenIds& x : sources) {
            const SearchResult a = latent_search(model, teacher, x, 8, 1.0, 1, 11);
            const SearchResult b = latent_search(model, teacher, x, 8, 1.0, 1, 11);
            CHECK(a.tokens == b.tokens);
            CHECK(a.chosen == b.chosen);
            REQUIRE(a.candidates.size() == 8);
            CHECK(a.candidates[0].tokens == deterministic_inference(model, x, 1).tokens);
            const double chosen = teacher_log_prob(teacher, x, a.tokens);
            CHECK(chosen >= teacher_log_prob(teacher, x, a.candidates[0].tokens));
            for (std::size_t n = 0; n < a.candidates.size(); ++n) {
                const auto& c = a.candidates[n];
                if (c.duplicate_of >= 0) {
                    CHECK(c.duplicate_of < static_cast<int>(n));
                    CHECK(a.candidates[static_cast<std::size_t>(c.duplicate_of)].tokens == c.tokens);
                    continue;
                }
                CHECK(c.teacher_score == teacher_log_prob(teacher, x, c.tokens));
                CHECK(chosen >= c.teacher_score);
                if (c.teacher_score == chosen) {
                    CHECK(a.chosen <= static_cast<int>(n));
                }
            }
        }
    }
    SUBCASE("argument checks") {
        CHECK_THROWS_AS(latent_search(model, teacher, sources[0], 0, 0.5, 1, 1),
                        std::invalid_argument);
        CHECK_THROWS_AS(latent_search(model, teacher, sources[0], 2, -0.1, 1, 1),
                        std::invalid_argument);
    }
}

TEST_CASE("attach_elbo scores every step with the Monte Carlo ELBO") {
    const LatentModel model = small_model(8);
    const TokenIds x = {4, 5, 6};
    InferenceResult r = deterministic_inference(model, x, 3);
    attach_elbo(model, x, r.trace, 4, 9);
    for (const auto& step : r.trace.steps) {
        REQUIRE(step.elbo.has_value());
        CHECK(*step.elbo == monte_carlo_elbo(model, x, step.tokens, 4, 9));
    }
}
