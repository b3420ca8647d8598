#include "lanmt/objective.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace lanmt;
using namespace lanmt::testing;

namespace {

GaussianSequence gaussian1(double mean, double variance) {
    return {Matrix::Constant(1, 1, mean), Matrix::Constant(1, 1, std::sqrt(variance))};
}

}  // namespace

TEST_CASE("closed-form KL values") {
    CHECK(gaussian_kl(gaussian1(0.3, 2.0), gaussian1(0.3, 2.0))(0) == 0.0);
    CHECK(std::abs(gaussian_kl(gaussian1(1, 1), gaussian1(0, 1))(0) - 0.5) <= 1e-6);
    CHECK(std::abs(gaussian_kl(gaussian1(0, 4), gaussian1(0, 1))(0) - 0.8069) <= 1e-4);
    CHECK(gaussian_kl(gaussian1(0, 4), gaussian1(0, 1))(0) ==
          doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))).epsilon(1e-12));
}

TEST_CASE("KL is non-negative and zero only for equal Gaussians") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix m = random_matrix(rng, 3, 4);
        const Matrix s = random_matrix(rng, 3, 4).cwiseAbs().array() + 0.05;
        const GaussianSequence q{m, s};
        CHECK(gaussian_kl(q, q).cwiseAbs().maxCoeff() <= 1e-9);
        const GaussianSequence p{random_matrix(rng, 3, 4),
                                 random_matrix(rng, 3, 4).cwiseAbs().array() + 0.05};
        const Eigen::VectorXd kl = gaussian_kl(q, p);
        CHECK(kl.minCoeff() >= 0.0);
        CHECK(kl.minCoeff() > 1e-9);
    }
}

TEST_CASE("KL input validation") {
    const GaussianSequence ok{Matrix::Zero(2, 2), Matrix::Ones(2, 2)};
    const GaussianSequence zero_std{Matrix::Zero(2, 2), Matrix::Zero(2, 2)};
    const GaussianSequence wrong{Matrix::Zero(3, 2), Matrix::Ones(3, 2)};
    CHECK_THROWS_AS(gaussian_kl(ok, zero_std), std::invalid_argument);
    CHECK_THROWS_AS(gaussian_kl(ok, wrong), std::invalid_argument);
}

TEST_CASE("budget schedule") {
    CHECK(budget_schedule(0, 100) == 1.0);
    CHECK(budget_schedule(49, 100) == 1.0);
    CHECK(budget_schedule(50, 100) == 1.0);
    CHECK(budget_schedule(75, 100) == 0.5);
    CHECK(budget_schedule(100, 100) == 0.0);
    CHECK(budget_schedule(3, 5) == doctest::Approx(0.8));
    for (int m : {2, 3, 7, 100, 101}) {
        double prev = 1.0;
        for (int s = 0; s <= m; ++s) {
            const double b = budget_schedule(s, m);
            CHECK(b >= 0.0);
            CHECK(b <= prev);
            prev = b;
        }
    }
    CHECK_THROWS(budget_schedule(0, 1));
    CHECK_THROWS(budget_schedule(11, 10));
}

TEST_CASE("budgeted KL") {
    const std::vector<double> kl = {0.3, 2.0};
    CHECK(budgeted_kl(kl, 1.0) == doctest::Approx(3.0));
    CHECK(budgeted_kl(kl, 0.0) == doctest::Approx(2.3));
    CHECK(budgeted_kl(kl, 0.2) == doctest::Approx(2.3));
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> v(5);
        for (double& k : v) {
            k = u(rng);
        }
        const double b = u(rng);
        double plain = 0;
        bool all_below = true;
        for (double k : v) {
            plain += k;
            all_below = all_below && k < b;
        }
        CHECK(budgeted_kl(v, b) >= plain);
        CHECK(budgeted_kl(v, b) >= (all_below ? 5 * b : 0.0));
    }
}

TEST_CASE("offsets are clamped into the class range") {
    bool clamped = true;
    CHECK(clamp_offset(5, 8, 50, &clamped) == 3);
    CHECK(!clamped);
    CHECK(clamp_offset(1, 80, 50, &clamped) == 50);
    CHECK(clamped);
    CHECK(clamp_offset(70, 2, 50, &clamped) == -50);
}

TEST_CASE("ELBO gradients match central differences") {
    LatentModelConfig c = tiny_latent_config(9);
    LatentModel model(c, 3);
    Rng rng(4);
    const std::vector<SentencePair> pairs = {{random_ids(rng, 3, 9), random_ids(rng, 5, 9)},
                                             {random_ids(rng, 4, 9), random_ids(rng, 2, 9)}};
    const std::vector<Matrix> noise = {random_matrix(rng, 3, 4), random_matrix(rng, 4, 4)};
    const std::vector<const SentencePair*> batch = {&pairs[0], &pairs[1]};
    auto loss = [&](Graph& g) {
        return batch_elbo_loss(g, model, batch, 0.05, NoiseSource{noise, nullptr}).total;
    };
    const auto r = check_gradients(loss, parameters_where(model.params(), false), 80, 17);
    CHECK(r.checked == 80);
    CHECK(r.max_relative_error <= 1e-4);

    const auto key_biases = parameters_where(model.params(), true);
    REQUIRE(!key_biases.empty());
    // Analytic gradient is zero; the numeric one is roundoff, far below 1e-6.
    const auto z = check_gradients(loss, key_biases, 40, 18, 1e-5, 1e-6);
    CHECK(z.max_relative_error <= 0.01);
    for (const Parameter* p : key_biases) {
        CHECK(p->grad.cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("elbo_loss is deterministic and consistent") {
    const LatentModel model(tiny_latent_config(8), 5);
    const SentencePair pair{{4, 5, 6}, {7, 6, 5, 4}};
    const Matrix noise = Matrix::Zero(3, 4);
    const TrainSchedule schedule{10, 100};
    const LossBreakdown a = elbo_loss(model, pair, schedule, noise);
    const LossBreakdown b = elbo_loss(model, pair, schedule, noise);
    CHECK(a.total == b.total);
    CHECK(a.kl_raw == b.kl_raw);
    CHECK(a.budget == 1.0);
    CHECK(a.kl_budgeted >= a.kl_raw);
    CHECK(a.total == doctest::Approx(a.kl_budgeted - a.reconstruction - a.length_log_prob));
    CHECK(a.target_tokens == 4);
}

TEST_CASE("uniform decoder gives the uniform reconstruction term") {
    LatentModel model(tiny_latent_config(10), 6);
    model.zero_output_layers();
    const SentencePair pair{{4, 5}, {6, 7, 8}};
    Rng rng(7);
    const LossBreakdown l = elbo_loss(model, pair, {0, 10}, random_matrix(rng, 2, 4));
    CHECK(l.reconstruction == doctest::Approx(3 * std::log(1.0 / 10)).epsilon(1e-9));
    CHECK(l.length_log_prob == doctest::Approx(std::log(1.0 / 101)).epsilon(1e-9));
}

TEST_CASE("monte carlo ELBO is seeded and its variance shrinks with samples") {
    const LatentModel model(tiny_latent_config(9), 8);
    const TokenIds x = {4, 5, 6};
    const TokenIds y = {6, 7, 8, 4};
    CHECK(monte_carlo_elbo(model, x, y, 1, 3) == monte_carlo_elbo(model, x, y, 1, 3));
    auto variance = [&](int k) {
        std::vector<double> v;
        for (std::uint64_t s = 0; s < 10; ++s) {
            v.push_back(monte_carlo_elbo(model, x, y, k, 100 + s));
        }
        double mean = 0;
        for (double e : v) {
            mean += e / 10;
        }
        double var = 0;
        for (double e : v) {
            var += (e - mean) * (e - mean) / 10;
        }
        return var;
    };
    CHECK(variance(20) < variance(1) / 4);
}

TEST_CASE("training lowers the loss on identity copy") {
    auto spec = default_task(TaskKind::IdentityCopy, 3);
    spec.max_length = 5;
    const auto raw = generate_synthetic(spec, 400);
    const Vocab vocab = build_vocab(raw, 1);
    const auto pairs = encode_pairs(vocab, raw);
    LatentModelConfig c = tiny_latent_config(vocab.size());
    c.hidden = 16;
    c.feed_forward = 32;
    c.max_steps = 300;
    c.warmup_steps = 30;
    std::vector<double> losses;
    const LatentModel trained = train_latent_model(
        pairs, c, 9, [&](const LatentTrainLogEntry& e) { losses.push_back(e.loss); }, 100);
    REQUIRE(losses.size() == 3);
    CHECK(losses.back() < losses.front());
    CHECK(trained.sigma() >= 0.05);

    const LatentModel fresh(c, 9);
    double before = 0;
    double after = 0;
    int tokens = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        before += monte_carlo_elbo(fresh, pairs[i].source, pairs[i].target, 5, i);
        after += monte_carlo_elbo(trained, pairs[i].source, pairs[i].target, 5, i);
        tokens += static_cast<int>(pairs[i].target.size());
    }
    CHECK(after / tokens > before / tokens);
}
