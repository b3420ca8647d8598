#include "lanmt/objective.hpp"

#include "lanmt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace lanmt {

namespace {

constexpr double kSigmaMin = 0.05;

void check_finite(double v, const char* component) {
    if (!std::isfinite(v)) {
        throw std::runtime_error(std::string("ELBO term '") + component + "' is not finite (" +
                                 std::to_string(v) + ")");
    }
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = normal(rng);
    }
    return m;
}

}  // namespace

Eigen::VectorXd gaussian_kl(const GaussianSequence& q, const GaussianSequence& p) {
    Graph g(false);
    Var kl = gaussian_kl_rows(g.constant(q.means), g.constant(q.stds), g.constant(p.means),
                              g.constant(p.stds));
    // Rounding can leave identical distributions a hair below zero.
    return kl.value().col(0).cwiseMax(0.0);
}

double budget_schedule(int step, int max_steps) {
    if (max_steps < 2 || step < 0 || step > max_steps) {
        throw std::invalid_argument("budget_schedule: need 0 <= s <= M and M >= 2");
    }
    const double half = static_cast<double>(max_steps) / 2.0;
    if (static_cast<double>(step) < half) {
        return 1.0;
    }
    return static_cast<double>(max_steps - step) / half;
}

double budgeted_kl(std::span<const double> kl, double budget) {
    double total = 0.0;
    for (double k : kl) {
        total += std::max(budget, k);
    }
    return total;
}

int clamp_offset(int source_length, int target_length, int max_offset, bool* clamped) {
    const int offset = target_length - source_length;
    const int c = std::clamp(offset, -max_offset, max_offset);
    if (clamped != nullptr) {
        *clamped = c != offset;
    }
    return c;
}

BatchLoss batch_elbo_loss(Graph& g, const LatentModel& model,
                          std::span<const SentencePair* const> batch, double budget,
                          const NoiseSource& noise, const DropoutContext* drop) {
    const int L = model.config().max_offset;
    const int D = model.config().latent_dim;
    std::vector<int> src_len;
    std::vector<int> tgt_len;
    std::vector<int> offset_class;
    TokenIds src_ids;
    TokenIds tgt_ids;
    LossBreakdown sums;
    sums.budget = budget;
    for (const SentencePair* p : batch) {
        if (p->source.empty() || p->target.empty()) {
            throw std::invalid_argument("elbo: empty source or target");
        }
        const int xs = static_cast<int>(p->source.size());
        const int ys = static_cast<int>(p->target.size());
        bool clamped = false;
        offset_class.push_back(clamp_offset(xs, ys, L, &clamped) + L);
        sums.clamped_offsets += clamped ? 1 : 0;
        src_len.push_back(xs);
        tgt_len.push_back(ys);
        src_ids.insert(src_ids.end(), p->source.begin(), p->source.end());
        tgt_ids.insert(tgt_ids.end(), p->target.begin(), p->target.end());
        sums.target_tokens += ys;
    }
    const Packing src = Packing::from_lengths(src_len);
    const Packing tgt = Packing::from_lengths(tgt_len);

    Matrix eps;
    if (!noise.explicit_noise.empty()) {
        if (noise.explicit_noise.size() != batch.size()) {
            throw std::invalid_argument("elbo: one noise matrix per pair required");
        }
        eps.resize(src.total_rows, D);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Matrix& n = noise.explicit_noise[i];
            if (n.rows() != src_len[i] || n.cols() != D) {
                throw std::invalid_argument("elbo: noise shape does not match |x| x D");
            }
            eps.middleRows(src.spans[i].start, src_len[i]) = n;
        }
    } else if (noise.rng != nullptr) {
        eps = normal_matrix(src.total_rows, D, *noise.rng);
    } else {
        eps = Matrix::Zero(src.total_rows, D);
    }

    const GaussianVars q = model.posterior(g, src_ids, src, tgt_ids, tgt, drop);
    const PriorVars p = model.prior(g, src_ids, src, drop);
    Var z = add(q.mean, mul(q.std, g.constant(std::move(eps))));

    Var length_lp = pick_log_prob(model.length_log_probs(g, z, src), offset_class);
    Var transformed = model.transform(g, z, src, tgt_len);
    Var recon = pick_log_prob(model.decode(g, transformed, tgt, p.encoding, src, drop), tgt_ids);
    Var kl_rows = gaussian_kl_rows(q.mean, q.std, p.gaussian.mean, p.gaussian.std);
    Var kl_budgeted = sum(clamp_min(kl_rows, budget));
    Var total = sub(kl_budgeted, add(recon, length_lp));

    sums.reconstruction = recon.scalar();
    sums.length_log_prob = length_lp.scalar();
    sums.kl_raw = kl_rows.value().sum();
    sums.kl_budgeted = kl_budgeted.scalar();
    sums.total = total.scalar();
    check_finite(sums.reconstruction, "decoder reconstruction");
    check_finite(sums.length_log_prob, "length predictor");
    check_finite(sums.kl_raw, "KL(posterior || prior)");
    return {total, sums};
}

LossBreakdown elbo_loss(const LatentModel& model, const SentencePair& pair,
                        const TrainSchedule& schedule, const Matrix& noise) {
    Graph g(false);
    const SentencePair* ptr = &pair;
    const std::vector<Matrix> n = {noise};
    const BatchLoss loss =
        batch_elbo_loss(g, model, std::span<const SentencePair* const>(&ptr, 1),
                        budget_schedule(schedule.step, schedule.max_steps), NoiseSource{n, nullptr});
    return loss.sums;
}

double monte_carlo_elbo(const LatentModel& model, std::span<const int> x, std::span<const int> y,
                        int samples, std::uint64_t seed) {
    if (samples < 1) {
        throw std::invalid_argument("monte_carlo_elbo: need at least one sample");
    }
    if (x.empty() || y.empty()) {
        throw std::invalid_argument("monte_carlo_elbo: empty source or target");
    }
    const int L = model.config().max_offset;
    const int D = model.config().latent_dim;
    const int xs = static_cast<int>(x.size());
    const int ys = static_cast<int>(y.size());

    Graph g(false);
    const std::vector<int> one_src = {xs};
    const std::vector<int> one_tgt = {ys};
    const Packing src1 = Packing::from_lengths(one_src);
    const GaussianVars q = model.posterior(g, x, src1, y, Packing::from_lengths(one_tgt));
    const PriorVars p = model.prior(g, x, src1);
    const double kl = gaussian_kl_rows(q.mean, q.std, p.gaussian.mean, p.gaussian.std).value().sum();

    Rng rng(seed);
    const Matrix eps = normal_matrix(static_cast<Eigen::Index>(samples) * xs, D, rng);
    Matrix z(eps.rows(), D);
    Matrix enc(eps.rows(), model.config().hidden);
    for (int k = 0; k < samples; ++k) {
        z.middleRows(k * xs, xs) =
            q.mean.value() + q.std.value().cwiseProduct(eps.middleRows(k * xs, xs));
        enc.middleRows(k * xs, xs) = p.encoding.value();
    }
    const std::vector<int> src_len(static_cast<std::size_t>(samples), xs);
    const std::vector<int> tgt_len(static_cast<std::size_t>(samples), ys);
    const Packing src = Packing::from_lengths(src_len);
    const Packing tgt = Packing::from_lengths(tgt_len);
    TokenIds targets;
    targets.reserve(static_cast<std::size_t>(samples) * y.size());
    for (int k = 0; k < samples; ++k) {
        targets.insert(targets.end(), y.begin(), y.end());
    }
    const std::vector<int> classes(static_cast<std::size_t>(samples), clamp_offset(xs, ys, L) + L);

    Var zv = g.constant(std::move(z));
    const double length_lp = pick_log_prob(model.length_log_probs(g, zv, src), classes).scalar();
    Var transformed = model.transform(g, zv, src, tgt_len);
    const double recon =
        pick_log_prob(model.decode(g, transformed, tgt, g.constant(std::move(enc)), src), targets)
            .scalar();
    return (recon + length_lp) / samples - kl;
}

LatentModel train_latent_model(std::span<const SentencePair> pairs,
                               const LatentModelConfig& config, std::uint64_t seed,
                               const LatentLogger& log, int log_every) {
    if (pairs.empty()) {
        throw std::invalid_argument("train_latent_model: empty corpus");
    }
    LatentModel model(config, seed);
    Rng rng(seed ^ 0x51ed270b27a3f1c5ULL);
    const DropoutContext drop{config.dropout, &rng};
    const WarmupSchedule schedule{config.peak_learning_rate, config.warmup_steps};
    Adam adam;

    int clamped_total = 0;
    for (const SentencePair& p : pairs) {
        bool clamped = false;
        clamp_offset(static_cast<int>(p.source.size()), static_cast<int>(p.target.size()),
                     config.max_offset, &clamped);
        clamped_total += clamped ? 1 : 0;
    }
    if (clamped_total > 0) {
        std::cerr << "warning: " << clamped_total << " training pairs have |y| - |x| outside [-"
                  << config.max_offset << ", " << config.max_offset
                  << "]; their length class is clamped to the boundary\n";
    }

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    LatentTrainLogEntry window;
    int window_tokens = 0;
    for (int step = 1; step <= config.max_steps; ++step) {
        std::vector<const SentencePair*> batch;
        for (int b = 0; b < config.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(&pairs[order[cursor++]]);
        }
        const double budget = budget_schedule(step - 1, config.max_steps);
        Graph g;
        BatchLoss loss = batch_elbo_loss(g, model, batch, budget, NoiseSource{{}, &rng}, &drop);
        Var objective = scale(loss.total, 1.0 / static_cast<double>(batch.size()));
        g.backward(objective);
        const double lr = schedule.rate(step);
        adam.step(model.params(), lr);
        Parameter& sigma = model.sigma_parameter();
        sigma.value(0, 0) = std::max(sigma.value(0, 0), kSigmaMin);

        window.loss += loss.sums.total;
        window.reconstruction += loss.sums.reconstruction;
        window.length_log_prob += loss.sums.length_log_prob;
        window.kl_raw += loss.sums.kl_raw;
        window.kl_budgeted += loss.sums.kl_budgeted;
        window_tokens += loss.sums.target_tokens;
        if (log && (step % log_every == 0 || step == config.max_steps)) {
            const double t = static_cast<double>(window_tokens);
            log({step, window.loss / t, window.reconstruction / t, window.length_log_prob / t,
                 window.kl_raw / t, window.kl_budgeted / t, budget, lr});
            window = {};
            window_tokens = 0;
        }
    }
    return model;
}

}  // namespace lanmt
