#pragma once

#include "lanmt/evaluation.hpp"
#include "lanmt/model.hpp"
#include "lanmt/teacher.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lanmt {

struct DataConfig {
    // Synthetic task name, used when no corpus paths are given.
    std::string task = "expand-contract";
    int train_size = 20000;
    int heldout_size = 1000;
    // Training targets only; held-out references are always canonical.
    double variant_rate = 0.15;
    std::filesystem::path train_path;
    std::filesystem::path heldout_path;
    int min_count = 1;
};

struct DistillConfig {
    int beam = 1;
};

struct InferenceConfig {
    int steps = 1;
    int candidates = 1;
    double temperature = 0.5;
    std::uint64_t search_seed = 1;
    int batch_size = 32;
};

struct EvaluationConfig {
    int elbo_samples = 20;
    int report_steps = 4;
    std::vector<int> tradeoff_candidates = {1, 5, 10, 20};
    int latency_sentences = 200;
    int latency_warmup = 5;
    int teacher_beam = 3;
};

struct ExperimentConfig {
    std::string profile = "desk";
    std::uint64_t seed = 1;
    std::filesystem::path output_dir = "runs/desk";
    DataConfig data;
    TeacherConfig teacher;
    LatentModelConfig nar;
    DistillConfig distill;
    InferenceConfig inference;
    EvaluationConfig evaluation;

    // Throws std::invalid_argument naming the offending field.
    void validate() const;
    // Canonical INI text; parse_config(to_ini()) round-trips.
    [[nodiscard]] std::string to_ini() const;
    // FNV-1a 64 of to_ini(), as 16 hex digits.
    [[nodiscard]] std::string hash() const;
};

// Built-in profiles: "desk" (small synthetic runs) and "paper" (full-size
// architecture). Throws std::invalid_argument for other names.
ExperimentConfig profile_config(const std::string& name);

// Flat "[section]" / "key = value" text, '#' comments. An optional
// "profile" key in [experiment] selects the base profile; every other key
// overrides it. Throws std::invalid_argument naming the section and key on
// unknown keys or malformed values.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Artifact locations under output_dir.
struct RunPaths {
    std::filesystem::path root;
    [[nodiscard]] std::filesystem::path train() const { return root / "data" / "train.tsv"; }
    [[nodiscard]] std::filesystem::path heldout() const { return root / "data" / "heldout.tsv"; }
    [[nodiscard]] std::filesystem::path vocab() const { return root / "vocab.txt"; }
    [[nodiscard]] std::filesystem::path teacher() const { return root / "teacher.ckpt"; }
    [[nodiscard]] std::filesystem::path distilled() const { return root / "distilled.tsv"; }
    [[nodiscard]] std::filesystem::path nar(bool distilled) const {
        return root / (distilled ? "nar.ckpt" : "nar-raw.ckpt");
    }
    [[nodiscard]] std::filesystem::path manifests() const { return root / "manifests"; }
};

// Writes train/held-out corpora and the vocabulary. Synthetic held-out
// sources never occur in the training corpus.
void prepare_data(const ExperimentConfig& config);

struct TeacherRunResult {
    double final_loss = 0;
};
TeacherRunResult cmd_train_teacher(const ExperimentConfig& config);

struct DistillRunResult {
    std::size_t pairs = 0;
    int dropped_empty = 0;
};
DistillRunResult cmd_distill(const ExperimentConfig& config);

struct NarRunResult {
    double final_loss = 0;
    bool distilled = true;
};
NarRunResult cmd_train_nar(const ExperimentConfig& config, bool use_distilled);

struct TranslateOptions {
    std::filesystem::path input;
    std::filesystem::path output;
    std::optional<std::filesystem::path> trace;
    bool use_distilled = true;
};
// One output line per input line. Uses latent search when
// config.inference.candidates > 1.
void cmd_translate(const ExperimentConfig& config, const TranslateOptions& options);

struct EvaluateResult {
    EvalReport report;
    std::optional<double> teacher_bleu;
    std::optional<double> teacher_exact_match;
};
EvaluateResult cmd_evaluate(const ExperimentConfig& config, bool use_distilled);

void cmd_report(const ExperimentConfig& config, bool use_distilled, bool plots);

// Manifest for one command invocation, written to
// output_dir/manifests/<command>.json.
void write_manifest(const ExperimentConfig& config, const std::string& command,
                    double wall_time_s);

[[nodiscard]] std::string version_string();

}  // namespace lanmt
