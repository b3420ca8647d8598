#include "lanmt/model.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace lanmt;
using namespace lanmt::testing;

namespace {

Eigen::Index row_argmax(const Matrix& m, Eigen::Index row) {
    Eigen::Index best = 0;
    m.row(row).maxCoeff(&best);
    return best;
}

}  // namespace

TEST_CASE("two-position transform weights") {
    const Matrix w = length_transform_weights(2, 2, 1.0);
    const double far = 1.0 / (1.0 + std::exp(0.5));
    CHECK(w(0, 0) == doctest::Approx(1.0 - far).epsilon(1e-12));
    CHECK(w(0, 1) == doctest::Approx(far).epsilon(1e-12));
    CHECK(w(1, 0) == doctest::Approx(far).epsilon(1e-12));
    CHECK(w(1, 1) == doctest::Approx(1.0 - far).epsilon(1e-12));
    CHECK(std::abs(w(0, 0) - 0.6225) < 1e-4);
    CHECK(std::abs(w(0, 1) - 0.3775) < 1e-4);
}

TEST_CASE("single source position is copied to every target row") {
    Rng rng(1);
    const LatentSequence z{random_matrix(rng, 1, 3)};
    for (int ly : {1, 4, 9}) {
        const Matrix out = length_transform(z, ly, 0.7);
        for (int j = 0; j < ly; ++j) {
            CHECK((out.row(j) - z.vectors.row(0)).cwiseAbs().maxCoeff() < 1e-15);
        }
    }
}

TEST_CASE("narrow sigma gives the identity for equal lengths") {
    Rng rng(2);
    for (int n = 1; n <= 8; ++n) {
        const Matrix w = length_transform_weights(n, n, 0.01);
        CHECK((w - Matrix::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-6);
        const LatentSequence z{random_matrix(rng, n, 4)};
        CHECK((length_transform(z, n, 0.01) - z.vectors).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("transform sweep: stochastic rows, monotone, linear") {
    Rng rng(3);
    for (int lx = 1; lx <= 12; ++lx) {
        for (int ly = 1; ly <= 12; ++ly) {
            for (double sigma : {0.25, 1.0, 4.0}) {
                const Matrix w = length_transform_weights(lx, ly, sigma);
                REQUIRE(w.rows() == ly);
                REQUIRE(w.cols() == lx);
                CHECK(w.minCoeff() >= 0.0);
                CHECK((w.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-6);
                for (int j = 1; j < ly; ++j) {
                    CHECK(row_argmax(w, j) >= row_argmax(w, j - 1));
                }
                const LatentSequence a{random_matrix(rng, lx, 3)};
                const LatentSequence b{random_matrix(rng, lx, 3)};
                const LatentSequence mix{1.7 * a.vectors - 0.4 * b.vectors};
                const Matrix lhs = length_transform(mix, ly, sigma);
                const Matrix rhs =
                    1.7 * length_transform(a, ly, sigma) - 0.4 * length_transform(b, ly, sigma);
                CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-6);
            }
        }
    }
}

TEST_CASE("target length outside the allowed range is rejected") {
    const LatentSequence z{Matrix::Zero(3, 2)};
    CHECK_THROWS_AS(length_transform(z, 0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(length_transform(z, 3 + 51, 1.0), std::invalid_argument);
    CHECK_NOTHROW(length_transform(z, 3 + 50, 1.0));
}

TEST_CASE("encoder shapes and determinism") {
    const LatentModel model(tiny_latent_config(10), 4);
    const TokenIds x = {4, 5, 6, 7, 8};
    const auto [prior, enc] = prior_encode(model, x);
    CHECK(prior.means.rows() == 5);
    CHECK(prior.means.cols() == 4);
    CHECK(prior.stds.rows() == 5);
    CHECK(enc.states.rows() == 5);
    CHECK(enc.states.cols() == 8);
    CHECK(prior.stds.minCoeff() >= 1e-3);
    const auto again = prior_encode(model, x);
    CHECK(again.first.means == prior.means);
    CHECK(again.first.stds == prior.stds);
    CHECK(again.second.states == enc.states);

    const TokenIds xs = {4, 5, 6, 7};
    const TokenIds ys = {9, 8, 7, 6, 5, 4, 9};
    const GaussianSequence q = posterior_encode(model, xs, ys);
    CHECK(q.length() == 4);
    CHECK(q.means.cols() == 4);
    CHECK(q.stds.minCoeff() > 0.0);
}

TEST_CASE("reparameterize") {
    GaussianSequence g{Matrix::Zero(2, 3), Matrix::Ones(2, 3)};
    CHECK(reparameterize(g, Matrix::Ones(2, 3)).vectors == Matrix::Ones(2, 3));
    g.means = Matrix::Constant(2, 3, 0.25);
    CHECK(reparameterize(g, Matrix::Zero(2, 3)).vectors == g.means);
    CHECK_THROWS_AS(reparameterize(g, Matrix::Zero(3, 3)), std::invalid_argument);

    Rng rng(5);
    g.means = random_matrix(rng, 2, 3);
    g.stds = random_matrix(rng, 2, 3).cwiseAbs().array() + 0.1;
    const int draws = 100000;
    Matrix total = Matrix::Zero(2, 3);
    std::normal_distribution<double> normal;
    Matrix eps(2, 3);
    for (int i = 0; i < draws; ++i) {
        for (Eigen::Index k = 0; k < eps.size(); ++k) {
            eps.data()[k] = normal(rng);
        }
        total += reparameterize(g, eps).vectors;
    }
    const Matrix mean = total / draws;
    const Matrix bound = 3.0 * g.stds / std::sqrt(static_cast<double>(draws));
    CHECK(((mean - g.means).cwiseAbs().array() <= bound.array()).all());
}

TEST_CASE("length distribution normalises and is uniform with zero weights") {
    LatentModel model(tiny_latent_config(9), 6);
    Rng rng(6);
    const LatentSequence z{random_matrix(rng, 4, 4)};
    const LengthDistribution d = predict_length(model, z);
    CHECK(d.log_probs.size() == 101);
    CHECK(d.log_probs.array().exp().sum() == doctest::Approx(1.0).epsilon(1e-5));
    model.zero_output_layers();
    const LengthDistribution u = predict_length(model, z);
    CHECK((u.log_probs.array().exp() - 1.0 / 101).abs().maxCoeff() < 1e-12);
    CHECK(u.argmax_offset() == -50);
}

TEST_CASE("decoder rows normalise and attend to every latent position") {
    const LatentModel model(tiny_latent_config(11), 7);
    const TokenIds x = {4, 5, 6};
    const auto [prior, enc] = prior_encode(model, x);
    Matrix zbar = length_transform(LatentSequence{prior.means}, 5, model.sigma());
    const Matrix lp = decode_tokens(model, zbar, enc);
    REQUIRE(lp.rows() == 5);
    REQUIRE(lp.cols() == 11);
    for (Eigen::Index i = 0; i < lp.rows(); ++i) {
        CHECK(lp.row(i).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-5));
    }
    zbar.row(4).array() += 3.0;
    const Matrix moved = decode_tokens(model, zbar, enc);
    CHECK((moved.row(0) - lp.row(0)).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("decoder log-likelihood gradients w.r.t. latent means and stds") {
    const LatentModel model(tiny_latent_config(9), 8);
    const TokenIds x = {4, 5, 6};
    const TokenIds y = {7, 8, 4, 5};
    const auto [prior, enc] = prior_encode(model, x);
    Rng rng(8);
    ParamStore store;
    Parameter& means = store.add("means", prior.means);
    Parameter& stds = store.add("stds", prior.stds);
    const Matrix eps = random_matrix(rng, 3, 4);
    const Packing src = Packing::from_lengths(std::vector<int>{3});
    const Packing tgt = Packing::from_lengths(std::vector<int>{4});
    const std::vector<int> lengths = {4};
    auto loss = [&](Graph& g) {
        Var z = add(g.parameter(means), mul(g.parameter(stds), g.constant(eps)));
        Var zbar = model.transform(g, z, src, lengths);
        Var lp = model.decode(g, zbar, tgt, g.constant(enc.states), src);
        return pick_log_prob(lp, y);
    };
    const auto r = check_gradients(loss, {&means, &stds}, 24, 1);
    CHECK(r.checked == 24);
    CHECK(r.max_relative_error <= 1e-4);
}

TEST_CASE("latent model checkpoint round trip") {
    LatentModelConfig c = tiny_latent_config(10);
    c.length_pooling = LengthPooling::Sum;
    const LatentModel model(c, 9);
    const auto dir = temp_dir("latent_ckpt");
    save_latent_model(model, dir / "m.ckpt");
    const LatentModel loaded = load_latent_model(dir / "m.ckpt");
    CHECK(loaded.config().length_pooling == LengthPooling::Sum);
    for (const auto& [name, p] : model.params()) {
        CHECK(loaded.params().get(name).value == p->value);
    }
    CHECK_THROWS(load_teacher(dir / "m.ckpt"));
}
