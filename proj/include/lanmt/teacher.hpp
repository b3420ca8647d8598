#pragma once

#include "lanmt/checkpoint.hpp"
#include "lanmt/corpus.hpp"
#include "lanmt/nn.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace lanmt {

struct TeacherConfig {
    int vocab_size = 0;
    int hidden = 64;
    int feed_forward = 256;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int heads = 4;
    double dropout = 0.0;
    double label_smoothing = 0.1;

    int max_steps = 3000;
    int batch_size = 32;
    double peak_learning_rate = 2e-3;
    int warmup_steps = 200;

    // Beam scoring: score / ((5 + len) / 6)^length_penalty; 0 is the raw
    // sequence log-probability.
    double length_penalty = 0.0;
    // Decoding stops after max_len_ratio * |x| + max_len_extra tokens.
    double max_len_ratio = 3.0;
    int max_len_extra = 10;

    void validate() const;
    [[nodiscard]] CheckpointHeader to_header() const;
    static TeacherConfig from_header(const CheckpointHeader& h);
    // hidden 512, ff 2048, 6+6 layers, 8 heads.
    static TeacherConfig paper_profile(int vocab_size);
};

struct Hypothesis {
    TokenIds tokens;           // without bos/eos
    double decoder_score = 0;  // model log-prob incl. the eos term when finished
    double teacher_score = 0;  // filled by rescoring
    bool finished = false;
};

class TeacherModel {
public:
    TeacherModel(const TeacherConfig& config, std::uint64_t seed);

    [[nodiscard]] const TeacherConfig& config() const { return config_; }
    [[nodiscard]] ParamStore& params() { return params_; }
    [[nodiscard]] const ParamStore& params() const { return params_; }

    // Sum over the batch of (label-smoothed) target log-likelihoods including
    // the eos term, as a 1x1 node on `g`.
    Var batch_log_likelihood(Graph& g, std::span<const SentencePair* const> batch,
                             double smoothing, const DropoutContext* drop) const;

    // Full-sequence forward pass: (|y| + 1) x |V| log-probabilities where row
    // i predicts y_i given y_<i (row |y| predicts eos).
    [[nodiscard]] Matrix position_log_probs(std::span<const int> x, std::span<const int> y) const;

    // Incremental decoding with per-layer key/value caches.
    class DecoderState {
    public:
        [[nodiscard]] int position() const { return position_; }
        [[nodiscard]] int source_length() const { return source_length_; }

    private:
        friend class TeacherModel;
        std::vector<Matrix> cross_keys;
        std::vector<Matrix> cross_values;
        std::vector<Matrix> self_keys;
        std::vector<Matrix> self_values;
        int position_ = 0;
        int source_length_ = 0;
    };
    [[nodiscard]] DecoderState start(std::span<const int> x) const;
    // Feeds `token` at the next position and returns log p(. | prefix, x).
    RowVector step(DecoderState& state, int token) const;

    [[nodiscard]] int max_decode_length(int source_length) const;

private:
    void check_ids(std::span<const int> ids) const;
    Var encode(Graph& g, std::span<const int> ids, const Packing& p,
               const DropoutContext* drop) const;

    TeacherConfig config_;
    ParamStore params_;
    Parameter* embedding_ = nullptr;
    TransformerStack encoder_;
    TransformerStack decoder_;
    Linear output_;
};

// log p(y | x) = sum_i log p(y_i | y_<i, x) including eos. Throws
// std::out_of_range for ids outside the vocabulary.
double teacher_log_prob(const TeacherModel& model, std::span<const int> x, std::span<const int> y);

struct TrainLogEntry {
    int step = 0;
    double loss = 0;  // per target token
    double learning_rate = 0;
};
using TeacherLogger = std::function<void(const TrainLogEntry&)>;

// Deterministic in `seed`. Throws std::runtime_error if the loss becomes NaN.
TeacherModel train_teacher(std::span<const SentencePair> pairs, const TeacherConfig& config,
                           std::uint64_t seed, const TeacherLogger& log = {},
                           int log_every = 100);

Hypothesis greedy_decode(const TeacherModel& model, std::span<const int> x);
Hypothesis beam_decode(const TeacherModel& model, std::span<const int> x, int beam_size,
                       int max_len = -1);

struct DistillResult {
    std::vector<SentencePair> pairs;
    int dropped_empty = 0;
};
DistillResult distill_corpus(const TeacherModel& model, std::span<const SentencePair> pairs,
                             int beam_size);

void save_teacher(const TeacherModel& model, const std::filesystem::path& path);
TeacherModel load_teacher(const std::filesystem::path& path);

}  // namespace lanmt
