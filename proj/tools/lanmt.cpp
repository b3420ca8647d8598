#include "lanmt/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <optional>
#include <string>

int main(int argc, char** argv) {
    CLI::App app{"Latent-variable non-autoregressive translation: training, inference, evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
    std::optional<int> steps;
    std::optional<int> candidates;
    std::optional<double> temperature;
    std::optional<int> beam;
    bool no_distill = false;
    app.add_option("--config", config_path, "INI experiment config (default: desk profile)")
        ->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Experiment seed");
    app.add_option("--output-dir", output_dir, "Directory for all artifacts");
    app.add_option("--steps", steps, "Refinement steps T");
    app.add_option("--candidates", candidates, "Latent search candidates N");
    app.add_option("--temperature", temperature, "Latent search sampling temperature");
    app.add_option("--beam", beam, "Teacher beam size (distill, or latency baseline)");
    app.add_flag("--no-distill", no_distill, "Use the NAR model trained on raw targets");

    auto* train_teacher = app.add_subcommand("train-teacher", "Train the autoregressive teacher");
    auto* distill = app.add_subcommand("distill", "Decode the training corpus with the teacher");
    auto* train_nar = app.add_subcommand("train-nar", "Train the latent-variable NAR model");
    auto* translate = app.add_subcommand("translate", "Translate a file, one sentence per line");
    auto* evaluate = app.add_subcommand("evaluate", "BLEU, exact match and latency on held-out data");
    auto* report = app.add_subcommand("report", "Per-step and candidate trade-off tables");

    lanmt::TranslateOptions translate_options;
    std::string trace_path;
    translate->add_option("--input", translate_options.input, "Source sentences")->required();
    translate->add_option("--output", translate_options.output,
                          "Output file (default: <output-dir>/translations.txt)");
    translate->add_option("--trace", trace_path, "Per-sentence refinement trace (JSONL)");
    bool plots = false;
    report->add_flag("--plots", plots, "Also render SVG charts");
    for (CLI::App* sub : app.get_subcommands({})) {
        sub->fallthrough();
    }

    CLI11_PARSE(app, argc, argv);

    try {
        lanmt::ExperimentConfig config =
            config_path.empty() ? lanmt::profile_config("desk") : lanmt::load_config(config_path);
        if (seed) {
            config.seed = *seed;
        }
        if (output_dir) {
            config.output_dir = *output_dir;
        }
        if (steps) {
            config.inference.steps = *steps;
        }
        if (candidates) {
            config.inference.candidates = *candidates;
        }
        if (temperature) {
            config.inference.temperature = *temperature;
        }
        if (beam) {
            if (distill->parsed()) {
                config.distill.beam = *beam;
            } else {
                config.evaluation.teacher_beam = *beam;
            }
        }
        config.validate();

        const auto start = std::chrono::steady_clock::now();
        std::string command;
        if (train_teacher->parsed()) {
            command = "train-teacher";
            const auto r = lanmt::cmd_train_teacher(config);
            std::cout << "teacher trained, final loss " << r.final_loss << '\n';
        } else if (distill->parsed()) {
            command = "distill";
            const auto r = lanmt::cmd_distill(config);
            std::cout << "distilled " << r.pairs << " pairs\n";
        } else if (train_nar->parsed()) {
            command = no_distill ? "train-nar-raw" : "train-nar";
            const auto r = lanmt::cmd_train_nar(config, !no_distill);
            std::cout << "NAR model trained, final loss " << r.final_loss << '\n';
        } else if (translate->parsed()) {
            command = "translate";
            translate_options.use_distilled = !no_distill;
            if (translate_options.output.empty()) {
                translate_options.output = config.output_dir / "translations.txt";
            }
            if (!trace_path.empty()) {
                translate_options.trace = trace_path;
            }
            lanmt::cmd_translate(config, translate_options);
        } else if (evaluate->parsed()) {
            command = no_distill ? "evaluate-raw" : "evaluate";
            const auto r = lanmt::cmd_evaluate(config, !no_distill);
            std::cout << "BLEU " << r.report.bleu << "  exact match " << r.report.exact_match
                      << "%  latency " << r.report.latency_mean_ms << " ms (std "
                      << r.report.latency_std_ms << ")\n";
            if (r.teacher_bleu) {
                std::cout << "teacher greedy BLEU " << *r.teacher_bleu << "  beam latency "
                          << r.report.teacher_latency->mean_ms << " ms\n";
            }
        } else if (report->parsed()) {
            command = no_distill ? "report-raw" : "report";
            lanmt::cmd_report(config, !no_distill, plots);
        }
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
        lanmt::write_manifest(config, command, elapsed.count());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
