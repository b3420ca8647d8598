#pragma once

#include "lanmt/model.hpp"
#include "lanmt/teacher.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace lanmt {

// Point-mass proxy posterior located at mu (|x| x D).
struct DeltaPosterior {
    LatentSequence mu;
};

struct DecodedTarget {
    int length = 0;
    TokenIds tokens;
    double decoder_log_prob = 0;  // sum_i max_v log p(y_i = v | x, z, l)
    double length_log_prob = 0;   // log p(l | z)
};

struct RefinementStep {
    Matrix mu;
    int length = 0;
    TokenIds tokens;
    double decoder_log_prob = 0;
    double length_log_prob = 0;
    double prior_log_density = 0;  // log p(mu | x)
    std::optional<double> elbo;
};

struct RefinementTrace {
    std::vector<RefinementStep> steps;  // step 0 is the prior-mean guess
    bool converged = false;
    // Refinement iterations run; steps.size() == iterations + 1.
    [[nodiscard]] int iterations() const { return static_cast<int>(steps.size()) - 1; }
};

struct InferenceResult {
    TokenIds tokens;
    RefinementTrace trace;
};

DeltaPosterior init_delta(const LatentModel& model, std::span<const int> x);
// Length from the most probable offset (floored at 1), then the per-position
// argmax token. Ties go to the lowest offset / token id.
DecodedTarget argmax_decode(const LatentModel& model, const LatentSequence& mu,
                            const SourceEncoding& encoding);
DeltaPosterior fit_delta(const LatentModel& model, std::span<const int> x,
                         std::span<const int> y_prev);

// Sum of per-position diagonal Gaussian log-densities at `point`.
double gaussian_log_density(const GaussianSequence& g, const Matrix& point);

// Prior-mean initial guess followed by up to `steps` refinement iterations;
// stops early once the output repeats.
InferenceResult deterministic_inference(const LatentModel& model, std::span<const int> x,
                                        int steps);

// deterministic_inference over many sentences, packed `batch_size` at a time.
std::vector<InferenceResult> translate_batch(const LatentModel& model,
                                             std::span<const TokenIds> sources, int steps,
                                             int batch_size = 32);

struct SearchCandidate {
    TokenIds tokens;
    double teacher_score = 0;
    int duplicate_of = -1;  // index of the first identical candidate, or -1
};

struct SearchResult {
    TokenIds tokens;
    int chosen = 0;
    std::vector<SearchCandidate> candidates;
};

// Candidate 0 starts from the prior mean, candidate n > 0 from
// mean + temperature * std * noise_n with noise drawn from `seed`. Every
// candidate is refined for up to `steps` iterations and the teacher picks the
// most probable distinct output (lowest index on ties). Throws
// std::invalid_argument when candidates < 1 or temperature < 0.
SearchResult latent_search(const LatentModel& model, const TeacherModel& teacher,
                           std::span<const int> x, int candidates, double temperature, int steps,
                           std::uint64_t seed);

// Fills step.elbo with monte_carlo_elbo(x, step.tokens) for every step.
void attach_elbo(const LatentModel& model, std::span<const int> x, RefinementTrace& trace,
                 int samples, std::uint64_t seed);

}  // namespace lanmt
