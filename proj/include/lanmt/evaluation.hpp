#pragma once

#include "lanmt/corpus.hpp"
#include "lanmt/inference.hpp"
#include "lanmt/model.hpp"
#include "lanmt/teacher.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lanmt {

// Collapses every run of adjacent identical tokens to a single token.
template <typename T>
std::vector<T> remove_repetitions(std::span<const T> tokens) {
    std::vector<T> out;
    for (const T& t : tokens) {
        if (out.empty() || !(out.back() == t)) {
            out.push_back(t);
        }
    }
    return out;
}
inline Tokens remove_repetitions(const Tokens& tokens) {
    return remove_repetitions(std::span<const std::string>(tokens));
}

// Corpus BLEU in percent over 1-4 grams with the brevity penalty. A zero
// n-gram precision for n >= 2 is replaced by 1 / (total + 1). Throws
// std::invalid_argument on an empty corpus or mismatched list sizes.
double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references);

// Percentage of hypotheses identical to their reference.
double exact_match(std::span<const Tokens> hypotheses, std::span<const Tokens> references);

// Repetition removal followed by corpus_bleu.
double evaluation_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references);

struct LatencyStats {
    double mean_ms = 0;
    double std_ms = 0;  // population std over sentences
    std::size_t sentences = 0;
};

// Times `decode(i)` for every input index i. The first `warmup` calls are
// untimed; each sentence's latency is the mean of `repeats` runs.
LatencyStats latency_bench(const std::function<void(std::size_t)>& decode, std::size_t inputs,
                           int warmup, int repeats);

// How many times faster `fast` is than `slow`.
double speedup(const LatencyStats& fast, const LatencyStats& slow);

struct StepRow {
    int step = 0;
    double mean_elbo = 0;
    double bleu = 0;
    double exact_match = 0;
    double converged_fraction = 0;  // sentences whose output stopped changing by this step
};

// One row per refinement step 0..steps. Sentences that converged earlier
// keep their last output.
std::vector<StepRow> per_step_report(const LatentModel& model, const Vocab& vocab,
                                     std::span<const SentencePair> pairs, int steps,
                                     int elbo_samples, std::uint64_t seed);

struct TradeoffRow {
    int candidates = 0;
    int steps = 0;
    double bleu = 0;
    double latency_ms = 0;
    double speedup = 0;  // relative to teacher beam search
};

struct TradeoffOptions {
    std::vector<int> candidates;
    int steps = 1;
    double temperature = 0.5;
    std::uint64_t seed = 1;
    int teacher_beam = 3;
};

struct TradeoffReport {
    LatencyStats teacher;
    std::vector<TradeoffRow> rows;  // `steps` series first, then steps = 0
};

TradeoffReport tradeoff_report(const LatentModel& model, const TeacherModel& teacher,
                               const Vocab& vocab, std::span<const SentencePair> pairs,
                               const TradeoffOptions& options);

struct EvalReport {
    double bleu = 0;
    double exact_match = 0;
    double latency_mean_ms = 0;
    double latency_std_ms = 0;
    std::optional<double> throughput_sentences_per_s;
    std::vector<StepRow> per_step;
    std::vector<TradeoffRow> tradeoff;
    std::optional<LatencyStats> teacher_latency;

    [[nodiscard]] std::string to_json() const;
};

void write_step_csv(std::span<const StepRow> rows, const std::filesystem::path& path);
void write_tradeoff_csv(std::span<const TradeoffRow> rows, const std::filesystem::path& path);
// ELBO and BLEU against refinement step, two panels.
void write_step_plot(std::span<const StepRow> rows, const std::filesystem::path& path);
// BLEU against speedup, one line per refinement setting.
void write_tradeoff_plot(std::span<const TradeoffRow> rows, const std::filesystem::path& path);

}  // namespace lanmt
