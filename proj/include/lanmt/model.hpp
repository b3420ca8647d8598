#pragma once

#include "lanmt/checkpoint.hpp"
#include "lanmt/corpus.hpp"
#include "lanmt/nn.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lanmt {

enum class LengthPooling { Mean, Sum };

struct LatentModelConfig {
    int vocab_size = 0;
    int latent_dim = 8;
    int hidden = 64;
    int feed_forward = 256;
    int prior_layers = 2;
    int decoder_layers = 2;
    int posterior_layers = 2;
    int heads = 4;
    int max_offset = 50;
    LengthPooling length_pooling = LengthPooling::Mean;
    double std_floor = 1e-3;
    double sigma_init = 1.0;
    double dropout = 0.0;

    // Training schedule; max_steps is M of the KL budget annealing.
    int max_steps = 4000;
    int batch_size = 32;
    double peak_learning_rate = 2e-3;
    int warmup_steps = 200;

    void validate() const;
    [[nodiscard]] int offset_classes() const { return 2 * max_offset + 1; }
    [[nodiscard]] CheckpointHeader to_header() const;
    static LatentModelConfig from_header(const CheckpointHeader& h);
    // D=8, hidden 512, ff 2048, prior/decoder 6 layers, posterior 3 layers.
    static LatentModelConfig paper_profile(int vocab_size);
};

// Per-position diagonal Gaussian over latent vectors (|x| x D each).
struct GaussianSequence {
    Matrix means;
    Matrix stds;
    [[nodiscard]] int length() const { return static_cast<int>(means.rows()); }
};

// Deterministic latent vectors, |x| x D.
struct LatentSequence {
    Matrix vectors;
    [[nodiscard]] int length() const { return static_cast<int>(vectors.rows()); }
};

// Prior encoder states (|x| x hidden) reused by the decoder.
struct SourceEncoding {
    Matrix states;
    [[nodiscard]] int length() const { return static_cast<int>(states.rows()); }
};

// Log-probabilities over offsets l_y - |x| in [-max_offset, max_offset].
struct LengthDistribution {
    RowVector log_probs;
    int max_offset = 50;

    [[nodiscard]] double log_prob(int offset) const { return log_probs(offset + max_offset); }
    // Most probable offset; lowest offset wins ties.
    [[nodiscard]] int argmax_offset() const;
};

struct GaussianVars {
    Var mean;
    Var std;
};

struct PriorVars {
    GaussianVars gaussian;
    Var encoding;
};

// The four components of the latent-variable model: prior p(z|x), posterior
// q(z|x,y), length predictor p(l|z) and decoder p(y|x,z,l). The graph-level
// methods work on packed batches; row spans are given by Packing.
class LatentModel {
public:
    LatentModel(const LatentModelConfig& config, std::uint64_t seed);

    [[nodiscard]] const LatentModelConfig& config() const { return config_; }
    [[nodiscard]] ParamStore& params() { return params_; }
    [[nodiscard]] const ParamStore& params() const { return params_; }
    [[nodiscard]] double sigma() const { return sigma_->value(0, 0); }
    [[nodiscard]] Parameter& sigma_parameter() { return *sigma_; }

    PriorVars prior(Graph& g, std::span<const int> src_ids, const Packing& src,
                    const DropoutContext* drop = nullptr) const;
    GaussianVars posterior(Graph& g, std::span<const int> src_ids, const Packing& src,
                           std::span<const int> tgt_ids, const Packing& tgt,
                           const DropoutContext* drop = nullptr) const;
    // One row of offset log-probs per span of `z`.
    Var length_log_probs(Graph& g, Var z, const Packing& src) const;
    Var transform(Graph& g, Var z, const Packing& src, std::span<const int> target_lengths) const;
    // Token log-probs (sum of target lengths x |V|).
    Var decode(Graph& g, Var transformed, const Packing& tgt, Var encoding, const Packing& src,
               const DropoutContext* drop = nullptr) const;

    // Zeroes the output projections of the decoder and length predictor so
    // both emit uniform distributions.
    void zero_output_layers();

private:
    void check_ids(std::span<const int> ids) const;
    Var embed_tokens(Graph& g, std::span<const int> ids, const Packing& p,
                     const DropoutContext* drop) const;
    GaussianVars gaussian_head(Graph& g, Var h, const Linear& mean, const Linear& std) const;

    LatentModelConfig config_;
    ParamStore params_;
    Parameter* embedding_ = nullptr;
    TransformerStack prior_stack_;
    Linear prior_mean_;
    Linear prior_std_;
    TransformerStack posterior_target_stack_;
    TransformerStack posterior_source_stack_;
    Linear posterior_mean_;
    Linear posterior_std_;
    Linear length_;
    Parameter* sigma_ = nullptr;
    Linear latent_in_;
    TransformerStack decoder_stack_;
    Linear output_;
};

// Single-sentence operations on plain values.
std::pair<GaussianSequence, SourceEncoding> prior_encode(const LatentModel& model,
                                                         std::span<const int> x);
GaussianSequence posterior_encode(const LatentModel& model, std::span<const int> x,
                                  std::span<const int> y);
// mean + std * noise; throws std::invalid_argument on shape mismatch.
LatentSequence reparameterize(const GaussianSequence& g, const Matrix& noise);
LengthDistribution predict_length(const LatentModel& model, const LatentSequence& z);
// Rows of the monotonic length transformation (target_length x D). Throws
// std::invalid_argument when target_length is outside [1, |x| + max_offset].
Matrix length_transform(const LatentSequence& z, int target_length, double sigma,
                        int max_offset = 50);
Matrix decode_tokens(const LatentModel& model, const Matrix& transformed,
                     const SourceEncoding& encoding);

void save_latent_model(const LatentModel& model, const std::filesystem::path& path);
LatentModel load_latent_model(const std::filesystem::path& path);

}  // namespace lanmt
