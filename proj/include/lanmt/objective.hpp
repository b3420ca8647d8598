#pragma once

#include "lanmt/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace lanmt {

struct TrainSchedule {
    int step = 0;
    int max_steps = 2;
};

struct LossBreakdown {
    double reconstruction = 0;  // sum_i log p(y_i | x, z, l_y)
    double length_log_prob = 0; // log p(l_y | z)
    double kl_raw = 0;          // sum_k KL(q_k || p_k)
    double kl_budgeted = 0;     // sum_k max(b, KL_k)
    double budget = 0;
    double total = 0;           // -(reconstruction + length) + kl_budgeted
    int target_tokens = 0;
    int clamped_offsets = 0;    // pairs whose |y| - |x| left [-L, L]
};

// KL(q || p) per position, summed over latent dimensions. Throws
// std::invalid_argument on shape mismatch or non-positive stds.
Eigen::VectorXd gaussian_kl(const GaussianSequence& q, const GaussianSequence& p);

// 1 for s < M/2, then (M - s) / (M / 2) down to 0 at s = M.
double budget_schedule(int step, int max_steps);

// sum_k max(b, kl_k).
double budgeted_kl(std::span<const double> kl, double budget);

// Offset class for a pair, clamped to [-max_offset, max_offset].
int clamp_offset(int source_length, int target_length, int max_offset, bool* clamped = nullptr);

// Noise source for reparameterised samples: either an explicit matrix per
// pair or a generator.
struct NoiseSource {
    std::span<const Matrix> explicit_noise;
    Rng* rng = nullptr;
};

struct BatchLoss {
    Var total;  // summed over the batch
    LossBreakdown sums;
};

// Single-sample reparameterised estimate of the budgeted negative ELBO for a
// packed batch. Throws std::runtime_error naming the component when a term
// is NaN.
BatchLoss batch_elbo_loss(Graph& g, const LatentModel& model,
                          std::span<const SentencePair* const> batch, double budget,
                          const NoiseSource& noise, const DropoutContext* drop = nullptr);

// elbo_loss for one pair with explicit noise (|x| x D).
LossBreakdown elbo_loss(const LatentModel& model, const SentencePair& pair,
                        const TrainSchedule& schedule, const Matrix& noise);

// (1/K) sum_k [log p(y | x, z_k, l_y) + log p(l_y | z_k)] - sum KL(q || p)
// with z_k ~ q(z | x, y); no KL budget. Deterministic in `seed`.
double monte_carlo_elbo(const LatentModel& model, std::span<const int> x,
                        std::span<const int> y, int samples, std::uint64_t seed);

struct LatentTrainLogEntry {
    int step = 0;
    double loss = 0;  // per target token, budgeted
    double reconstruction = 0;
    double length_log_prob = 0;
    double kl_raw = 0;
    double kl_budgeted = 0;
    double budget = 0;
    double learning_rate = 0;
};
using LatentLogger = std::function<void(const LatentTrainLogEntry&)>;

// Trains for config.max_steps steps with the annealed KL budget.
// Deterministic in `seed`.
LatentModel train_latent_model(std::span<const SentencePair> pairs,
                               const LatentModelConfig& config, std::uint64_t seed,
                               const LatentLogger& log = {}, int log_every = 100);

}  // namespace lanmt
