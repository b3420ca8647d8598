// End-to-end acceptance run: trains the desk pipeline from scratch and prints
// one PASS/FAIL line per criterion. Exit status is nonzero if any fails.

#include "lanmt/evaluation.hpp"
#include "lanmt/inference.hpp"
#include "lanmt/objective.hpp"
#include "lanmt/pipeline.hpp"

#include "reference_bleu.hpp"
#include "test_support.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace lanmt;
using namespace lanmt::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

struct Verdicts {
    int failed = 0;

    void report(int id, const std::string& name, bool pass, const std::string& detail) {
        failed += pass ? 0 : 1;
        std::cout << (pass ? "PASS" : "FAIL") << "  [" << id << "] " << name << ": " << detail
                  << std::endl;
    }
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

void closed_forms(Verdicts& v) {
    const auto start = Clock::now();
    auto kl1 = [](double mq, double vq, double mp, double vp) {
        return gaussian_kl({Matrix::Constant(1, 1, mq), Matrix::Constant(1, 1, std::sqrt(vq))},
                           {Matrix::Constant(1, 1, mp), Matrix::Constant(1, 1, std::sqrt(vp))})(0);
    };
    const double same = kl1(0.7, 2.0, 0.7, 2.0);
    const double shift = kl1(1, 1, 0, 1);
    const double wide = kl1(0, 4, 0, 1);
    const bool kl_ok = std::abs(same) <= 1e-6 && std::abs(shift - 0.5) <= 1e-6 &&
                       std::abs(wide - 0.5 * (3.0 - std::log(4.0))) <= 1e-6 &&
                       std::abs(wide - 0.8069) <= 1e-4;

    const Matrix w = length_transform_weights(2, 2, 1.0);
    const bool w_ok = std::abs(w(0, 0) - 0.6225) <= 1e-4 && std::abs(w(0, 1) - 0.3775) <= 1e-4 &&
                      std::abs(w(1, 0) - 0.3775) <= 1e-4 && std::abs(w(1, 1) - 0.6225) <= 1e-4;

    const bool b_ok = budget_schedule(0, 100) == 1.0 && budget_schedule(49, 100) == 1.0 &&
                      budget_schedule(75, 100) == 0.5 && budget_schedule(100, 100) == 0.0;
    const double elapsed = seconds_since(start);
    v.report(1, "closed-form values", kl_ok && w_ok && b_ok && elapsed < 1.0,
             "KL " + fmt(same) + "/" + fmt(shift, 8) + "/" + fmt(wide, 8) + ", weights [" +
                 fmt(w(0, 0)) + ", " + fmt(w(0, 1)) + "; " + fmt(w(1, 0)) + ", " + fmt(w(1, 1)) +
                 "], budget 1/1/0.5/0, " + fmt(elapsed * 1000, 3) + " ms");
}

void gradient_check(Verdicts& v) {
    const auto start = Clock::now();
    LatentModelConfig c;
    c.vocab_size = 10;
    c.hidden = 8;
    c.latent_dim = 4;
    c.feed_forward = 16;
    c.prior_layers = 1;
    c.decoder_layers = 1;
    c.posterior_layers = 1;
    c.heads = 2;
    LatentModel model(c, 21);
    Rng rng(22);
    const std::vector<SentencePair> pairs = {{random_ids(rng, 4, 10), random_ids(rng, 6, 10)},
                                             {random_ids(rng, 5, 10), random_ids(rng, 3, 10)}};
    const std::vector<Matrix> noise = {random_matrix(rng, 4, 4), random_matrix(rng, 5, 4)};
    const std::vector<const SentencePair*> batch = {&pairs[0], &pairs[1]};
    auto loss = [&](Graph& g) {
        return batch_elbo_loss(g, model, batch, 0.05, NoiseSource{noise, nullptr}).total;
    };
    const GradientCheck r = check_gradients(loss, parameters_where(model.params(), false), 100, 23);
    const double elapsed = seconds_since(start);
    v.report(2, "ELBO gradient check", r.checked >= 50 && r.max_relative_error <= 1e-4 && elapsed < 60,
             std::to_string(r.checked) + " parameters, max relative error " +
                 fmt(r.max_relative_error, 3) + " (attention key biases excluded: zero gradient by "
                 "construction), " + fmt(elapsed, 3) + " s");
}

void transform_sweep(Verdicts& v) {
    Rng rng(31);
    double worst_sum = 0;
    double worst_linear = 0;
    bool nonneg = true;
    bool monotone = true;
    for (int lx = 1; lx <= 12; ++lx) {
        for (int ly = 1; ly <= 12; ++ly) {
            for (double sigma : {0.25, 1.0, 4.0}) {
                const Matrix w = length_transform_weights(lx, ly, sigma);
                nonneg = nonneg && w.minCoeff() >= 0.0;
                worst_sum = std::max(worst_sum, (w.rowwise().sum().array() - 1.0).abs().maxCoeff());
                Eigen::Index prev = 0;
                for (int j = 0; j < ly; ++j) {
                    Eigen::Index arg = 0;
                    w.row(j).maxCoeff(&arg);
                    monotone = monotone && arg >= prev;
                    prev = arg;
                }
                const LatentSequence a{random_matrix(rng, lx, 8)};
                const LatentSequence b{random_matrix(rng, lx, 8)};
                const LatentSequence mix{0.3 * a.vectors + 2.5 * b.vectors};
                const Matrix diff = length_transform(mix, ly, sigma) -
                                    (0.3 * length_transform(a, ly, sigma) +
                                     2.5 * length_transform(b, ly, sigma));
                worst_linear = std::max(worst_linear, diff.cwiseAbs().maxCoeff());
            }
        }
    }
    v.report(3, "length-transform sweep",
             worst_sum <= 1e-6 && nonneg && monotone && worst_linear <= 1e-6,
             "432 configurations, max |row sum - 1| " + fmt(worst_sum, 3) + ", non-negative " +
                 (nonneg ? "yes" : "no") + ", monotone " + (monotone ? "yes" : "no") +
                 ", max linearity error " + fmt(worst_linear, 3));
}

void bleu_oracle(Verdicts& v) {
    Rng rng(41);
    std::uniform_int_distribution<int> len(1, 20);
    std::uniform_int_distribution<int> sym(0, 14);
    std::uniform_real_distribution<double> u;
    std::vector<Tokens> refs;
    std::vector<Tokens> hyps;
    for (int i = 0; i < 200; ++i) {
        Tokens r(static_cast<std::size_t>(len(rng)));
        for (auto& w : r) {
            w = "w" + std::to_string(sym(rng));
        }
        Tokens h;
        for (const auto& w : r) {
            const double p = u(rng);
            if (p < 0.1) {
                continue;
            }
            h.push_back(p < 0.3 ? "w" + std::to_string(sym(rng)) : w);
        }
        if (h.empty()) {
            h.push_back("w0");
        }
        refs.push_back(r);
        hyps.push_back(h);
    }
    const double ours = corpus_bleu(hyps, refs);
    const double oracle = reference_bleu(hyps, refs);
    const bool fixtures = remove_repetitions(Tokens{"a", "a", "b", "a"}) == Tokens{"a", "b", "a"} &&
                          remove_repetitions(Tokens{}).empty() &&
                          remove_repetitions(Tokens{"the", "the", "the", "cat"}) ==
                              Tokens{"the", "cat"};
    v.report(9, "BLEU oracle equivalence", std::abs(ours - oracle) <= 0.1 && fixtures,
             "200 pairs, ours " + fmt(ours, 6) + " vs oracle " + fmt(oracle, 6) +
                 ", repetition fixtures " + (fixtures ? "exact" : "mismatch"));
}

int run_cli(const std::string& cli, const std::string& args) {
    const std::string cmd = "\"" + cli + "\" " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
}

void determinism(Verdicts& v, const std::string& cli, const ExperimentConfig& config,
                 std::span<const RawPair> heldout) {
    const auto dir = config.output_dir / "determinism";
    std::filesystem::create_directories(dir);
    {
        std::ofstream in(dir / "input.txt");
        for (std::size_t i = 0; i < 200; ++i) {
            in << join_tokens(heldout[i].source) << '\n';
        }
    }
    const std::string common = "translate --output-dir \"" + config.output_dir.string() +
                               "\" --input \"" + (dir / "input.txt").string() + "\" --steps 1";
    bool ok = true;
    std::string detail;
    for (const auto& [label, extra] :
         {std::pair<std::string, std::string>{"deterministic", " --candidates 1"},
          {"search N=10", " --candidates 10 --temperature 0.5"}}) {
        std::string outputs[2];
        for (int run = 0; run < 2; ++run) {
            const auto out = dir / (label.substr(0, 6) + std::to_string(run) + ".txt");
            const int status = run_cli(cli, common + extra + " --output \"" + out.string() + "\"");
            ok = ok && status == 0;
            outputs[run] = slurp(out);
        }
        const auto lines = std::count(outputs[0].begin(), outputs[0].end(), '\n');
        const bool same = !outputs[0].empty() && outputs[0] == outputs[1];
        ok = ok && same && lines == 200;
        detail += (detail.empty() ? "" : ", ") + label + " " + (same ? "identical" : "DIFFERENT") +
                  " (" + std::to_string(lines) + " lines)";
    }
    v.report(4, "cross-process determinism", ok, detail);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance run"};
    std::string cli;
    std::filesystem::path work_dir;
    bool reuse = false;
    app.add_option("--cli", cli, "Path to the lanmt executable")->required();
    app.add_option("--work-dir", work_dir, "Artifact directory")->required();
    app.add_flag("--reuse", reuse, "Reuse trained artifacts from an earlier run");
    CLI11_PARSE(app, argc, argv);

    Verdicts v;
    try {
        closed_forms(v);
        gradient_check(v);
        transform_sweep(v);
        bleu_oracle(v);

        ExperimentConfig config = profile_config("desk");
        config.output_dir = work_dir;
        const RunPaths paths{work_dir};
        const auto pipeline_start = Clock::now();
        if (!reuse || !std::filesystem::exists(paths.nar(false))) {
            std::filesystem::remove_all(work_dir);
            cmd_train_teacher(config);
            cmd_distill(config);
            cmd_train_nar(config, true);
            cmd_train_nar(config, false);
        }
        const EvaluateResult distilled = cmd_evaluate(config, true);
        const EvaluateResult raw = cmd_evaluate(config, false);
        const double pipeline_s = seconds_since(pipeline_start);

        const auto heldout_raw = read_parallel_corpus(paths.heldout());
        const Vocab vocab = Vocab::load(paths.vocab());
        const auto heldout = encode_pairs(vocab, heldout_raw);

        determinism(v, cli, config, heldout_raw);

        {
            const double teacher_bleu = distilled.teacher_bleu.value_or(0.0);
            const double gap = teacher_bleu - distilled.report.bleu;
            const bool pass = distilled.report.exact_match >= 90.0 && gap <= 2.0 &&
                              raw.report.bleu < distilled.report.bleu && pipeline_s <= 1800;
            v.report(5, "end-to-end quality", pass,
                     "distilled T=1 exact " + fmt(distilled.report.exact_match) + "% (>= 90), BLEU " +
                         fmt(distilled.report.bleu) + " vs teacher greedy " + fmt(teacher_bleu) +
                         " (gap " + fmt(gap, 3) + " <= 2), raw-target BLEU " +
                         fmt(raw.report.bleu) + " (< distilled), pipeline " + fmt(pipeline_s, 4) +
                         " s");
        }

        const LatentModel nar = load_latent_model(paths.nar(true));
        {
            const auto rows = per_step_report(nar, vocab, heldout, 3, 20, 1);
            const bool pass = rows[1].mean_elbo > rows[0].mean_elbo && rows[1].bleu >= rows[0].bleu &&
                              rows[3].converged_fraction >= 0.6;
            v.report(6, "refinement improves ELBO and quality", pass,
                     "mean ELBO step0 " + fmt(rows[0].mean_elbo, 6) + " -> step1 " +
                         fmt(rows[1].mean_elbo, 6) + ", BLEU " + fmt(rows[0].bleu) + " -> " +
                         fmt(rows[1].bleu) + ", converged within 3 steps " +
                         fmt(100 * rows[3].converged_fraction) + "% (>= 60%)");
        }

        {
            int wrong = 0;
            int fixed = 0;
            for (const SentencePair& p : heldout) {
                const InferenceResult r = deterministic_inference(nar, p.source, 4);
                const auto target = static_cast<int>(p.target.size());
                if (r.trace.steps[0].length != target) {
                    ++wrong;
                    fixed += r.trace.steps.back().length == target ? 1 : 0;
                }
            }
            v.report(7, "length adaptation", wrong >= 10 && 2 * fixed >= wrong,
                     std::to_string(wrong) + " held-out sentences with a wrong step-0 length, " +
                         std::to_string(fixed) + " corrected after up to 4 refinement steps");
        }

        {
            const TeacherModel teacher = load_teacher(paths.teacher());
            const std::size_t n = 200;
            const LatencyStats nar_t1 = latency_bench(
                [&](std::size_t i) { deterministic_inference(nar, heldout[i].source, 1); }, n, 5, 1);
            const LatencyStats beam = latency_bench(
                [&](std::size_t i) { beam_decode(teacher, heldout[i].source, 3); }, n, 5, 1);
            const LatencyStats search = latency_bench(
                [&](std::size_t i) { latent_search(nar, teacher, heldout[i].source, 10, 0.5, 1, 1); },
                n, 5, 1);
            const bool pass = nar_t1.mean_ms < beam.mean_ms && search.mean_ms > nar_t1.mean_ms;
            v.report(8, "latency ordering", pass,
                     "NAR T=1 " + fmt(nar_t1.mean_ms) + " ms (std " + fmt(nar_t1.std_ms, 3) +
                         "), teacher beam-3 " + fmt(beam.mean_ms) + " ms (std " +
                         fmt(beam.std_ms, 3) + "), search N=10 " + fmt(search.mean_ms) +
                         " ms, 200 sentences");
        }
    } catch (const std::exception& e) {
        std::cout << "FAIL  acceptance run aborted: " << e.what() << std::endl;
        return 1;
    }
    std::cout << (v.failed == 0 ? "all criteria passed" : std::to_string(v.failed) + " failed")
              << std::endl;
    return v.failed == 0 ? 0 : 1;
}
