#include "lanmt/evaluation.hpp"

#include "lanmt/objective.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

namespace lanmt {

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const Tokens& tokens, std::size_t n) {
    NgramCounts counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                          tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return counts;
}

void check_corpus(std::span<const Tokens> hypotheses, std::span<const Tokens> references) {
    if (hypotheses.empty()) {
        throw std::invalid_argument("BLEU: empty corpus");
    }
    if (hypotheses.size() != references.size()) {
        throw std::invalid_argument("BLEU: " + std::to_string(hypotheses.size()) +
                                    " hypotheses but " + std::to_string(references.size()) +
                                    " references");
    }
}

std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out.precision(10);
    return out;
}

Tokens decode_ids(const Vocab& vocab, std::span<const int> ids) { return vocab.decode(ids); }

}  // namespace

double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references) {
    check_corpus(hypotheses, references);
    constexpr std::size_t kMaxOrder = 4;
    std::array<long, kMaxOrder> matches{};
    std::array<long, kMaxOrder> totals{};
    long hyp_len = 0;
    long ref_len = 0;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        hyp_len += static_cast<long>(hypotheses[s].size());
        ref_len += static_cast<long>(references[s].size());
        for (std::size_t n = 1; n <= kMaxOrder; ++n) {
            const NgramCounts hyp = count_ngrams(hypotheses[s], n);
            const NgramCounts ref = count_ngrams(references[s], n);
            for (const auto& [gram, count] : hyp) {
                const auto it = ref.find(gram);
                if (it != ref.end()) {
                    matches[n - 1] += std::min(count, it->second);
                }
                totals[n - 1] += count;
            }
        }
    }
    if (hyp_len == 0 || matches[0] == 0) {
        return 0.0;
    }
    double log_precision = 0.0;
    for (std::size_t n = 0; n < kMaxOrder; ++n) {
        double p = 0.0;
        if (matches[n] > 0) {
            p = static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
        } else {
            p = 1.0 / static_cast<double>(totals[n] + 1);
        }
        log_precision += std::log(p) / static_cast<double>(kMaxOrder);
    }
    const double brevity =
        hyp_len >= ref_len ? 0.0 : 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len);
    return 100.0 * std::exp(log_precision + brevity);
}

double exact_match(std::span<const Tokens> hypotheses, std::span<const Tokens> references) {
    check_corpus(hypotheses, references);
    std::size_t same = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        same += hypotheses[i] == references[i] ? 1 : 0;
    }
    return 100.0 * static_cast<double>(same) / static_cast<double>(hypotheses.size());
}

double evaluation_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references) {
    std::vector<Tokens> cleaned;
    cleaned.reserve(hypotheses.size());
    for (const Tokens& h : hypotheses) {
        cleaned.push_back(remove_repetitions(h));
    }
    return corpus_bleu(cleaned, references);
}

LatencyStats latency_bench(const std::function<void(std::size_t)>& decode, std::size_t inputs,
                           int warmup, int repeats) {
    if (repeats < 1) {
        throw std::invalid_argument("latency_bench: repeats must be >= 1");
    }
    if (inputs == 0) {
        throw std::invalid_argument("latency_bench: no inputs");
    }
    for (int w = 0; w < warmup; ++w) {
        decode(static_cast<std::size_t>(w) % inputs);
    }
    std::vector<double> per_sentence(inputs);
    for (std::size_t i = 0; i < inputs; ++i) {
        const auto start = std::chrono::steady_clock::now();
        for (int r = 0; r < repeats; ++r) {
            decode(i);
        }
        const std::chrono::duration<double, std::milli> elapsed =
            std::chrono::steady_clock::now() - start;
        per_sentence[i] = elapsed.count() / repeats;
    }
    LatencyStats stats;
    stats.sentences = inputs;
    for (double t : per_sentence) {
        stats.mean_ms += t;
    }
    stats.mean_ms /= static_cast<double>(inputs);
    for (double t : per_sentence) {
        stats.std_ms += (t - stats.mean_ms) * (t - stats.mean_ms);
    }
    stats.std_ms = std::sqrt(stats.std_ms / static_cast<double>(inputs));
    return stats;
}

double speedup(const LatencyStats& fast, const LatencyStats& slow) {
    if (!(fast.mean_ms > 0.0)) {
        throw std::invalid_argument("speedup: latency must be positive");
    }
    return slow.mean_ms / fast.mean_ms;
}

std::vector<StepRow> per_step_report(const LatentModel& model, const Vocab& vocab,
                                     std::span<const SentencePair> pairs, int steps,
                                     int elbo_samples, std::uint64_t seed) {
    if (pairs.empty()) {
        throw std::invalid_argument("per_step_report: no evaluation pairs");
    }
    std::vector<RefinementTrace> traces;
    for (const SentencePair& p : pairs) {
        traces.push_back(deterministic_inference(model, p.source, steps).trace);
    }
    std::vector<Tokens> references;
    for (const SentencePair& p : pairs) {
        references.push_back(decode_ids(vocab, p.target));
    }
    std::vector<StepRow> rows;
    std::vector<double> previous_elbo(pairs.size());
    for (int t = 0; t <= steps; ++t) {
        StepRow row;
        row.step = t;
        std::vector<Tokens> hypotheses;
        std::size_t converged = 0;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const RefinementTrace& trace = traces[i];
            const std::size_t index = std::min<std::size_t>(static_cast<std::size_t>(t),
                                                            trace.steps.size() - 1);
            const TokenIds& y = trace.steps[index].tokens;
            hypotheses.push_back(decode_ids(vocab, y));
            // The estimate is a pure function of (x, y, seed), so an unchanged
            // output keeps its value.
            if (t == 0 || static_cast<std::size_t>(t) < trace.steps.size()) {
                previous_elbo[i] =
                    monte_carlo_elbo(model, pairs[i].source, y, elbo_samples, seed + i);
            }
            row.mean_elbo += previous_elbo[i];
            if (trace.converged && trace.iterations() <= t) {
                ++converged;
            }
        }
        row.mean_elbo /= static_cast<double>(pairs.size());
        row.bleu = evaluation_bleu(hypotheses, references);
        row.exact_match = exact_match(hypotheses, references);
        row.converged_fraction = static_cast<double>(converged) / static_cast<double>(pairs.size());
        rows.push_back(row);
    }
    return rows;
}

TradeoffReport tradeoff_report(const LatentModel& model, const TeacherModel& teacher,
                               const Vocab& vocab, std::span<const SentencePair> pairs,
                               const TradeoffOptions& options) {
    if (pairs.empty()) {
        throw std::invalid_argument("tradeoff_report: no evaluation pairs");
    }
    std::vector<Tokens> references;
    for (const SentencePair& p : pairs) {
        references.push_back(decode_ids(vocab, p.target));
    }
    TradeoffReport report;
    report.teacher = latency_bench(
        [&](std::size_t i) { beam_decode(teacher, pairs[i].source, options.teacher_beam); },
        pairs.size(), 5, 1);
    for (int steps : {options.steps, 0}) {
        for (int n : options.candidates) {
            std::vector<Tokens> hypotheses(pairs.size());
            const LatencyStats stats = latency_bench(
                [&](std::size_t i) {
                    const SearchResult r = latent_search(model, teacher, pairs[i].source, n,
                                                         options.temperature, steps, options.seed);
                    hypotheses[i] = decode_ids(vocab, r.tokens);
                },
                pairs.size(), 5, 1);
            report.rows.push_back({n, steps, evaluation_bleu(hypotheses, references),
                                   stats.mean_ms, speedup(stats, report.teacher)});
        }
        if (options.steps == 0) {
            break;
        }
    }
    return report;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["bleu"] = bleu;
    j["exact_match"] = exact_match;
    j["latency_mean_ms"] = latency_mean_ms;
    j["latency_std_ms"] = latency_std_ms;
    if (throughput_sentences_per_s) {
        j["throughput_sentences_per_s"] = *throughput_sentences_per_s;
    }
    if (teacher_latency) {
        j["teacher_latency_mean_ms"] = teacher_latency->mean_ms;
        j["teacher_latency_std_ms"] = teacher_latency->std_ms;
    }
    j["per_step"] = nlohmann::json::array();
    for (const StepRow& r : per_step) {
        j["per_step"].push_back({{"step", r.step},
                                 {"mean_elbo", r.mean_elbo},
                                 {"bleu", r.bleu},
                                 {"exact_match", r.exact_match},
                                 {"converged_fraction", r.converged_fraction}});
    }
    j["tradeoff"] = nlohmann::json::array();
    for (const TradeoffRow& r : tradeoff) {
        j["tradeoff"].push_back({{"candidates", r.candidates},
                                 {"steps", r.steps},
                                 {"bleu", r.bleu},
                                 {"latency_ms", r.latency_ms},
                                 {"speedup", r.speedup}});
    }
    return j.dump(2);
}

void write_step_csv(std::span<const StepRow> rows, const std::filesystem::path& path) {
    std::ofstream out = open_output(path);
    out << "step,mean_elbo,bleu,exact_match,converged_fraction\n";
    for (const StepRow& r : rows) {
        out << r.step << ',' << r.mean_elbo << ',' << r.bleu << ',' << r.exact_match << ','
            << r.converged_fraction << '\n';
    }
}

void write_tradeoff_csv(std::span<const TradeoffRow> rows, const std::filesystem::path& path) {
    std::ofstream out = open_output(path);
    out << "candidates,steps,bleu,latency_ms,speedup\n";
    for (const TradeoffRow& r : rows) {
        out << r.candidates << ',' << r.steps << ',' << r.bleu << ',' << r.latency_ms << ','
            << r.speedup << '\n';
    }
}

namespace {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

// Line chart with markers drawn into the box at (left, top).
void draw_chart(std::ostream& svg, double left, double top, double width, double height,
                const std::string& title, const std::string& x_label, const std::string& y_label,
                const std::vector<Series>& series) {
    double x_min = 1e300, x_max = -1e300, y_min = 1e300, y_max = -1e300;
    for (const Series& s : series) {
        for (double v : s.x) {
            x_min = std::min(x_min, v);
            x_max = std::max(x_max, v);
        }
        for (double v : s.y) {
            y_min = std::min(y_min, v);
            y_max = std::max(y_max, v);
        }
    }
    if (x_min > x_max) {
        x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    }
    if (x_max - x_min < 1e-12) {
        x_min -= 0.5, x_max += 0.5;
    }
    if (y_max - y_min < 1e-12) {
        y_min -= 0.5, y_max += 0.5;
    }
    const double pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;
    const double pl = left + 60, pr = left + width - 10, pt = top + 30, pb = top + height - 40;
    auto px = [&](double v) { return pl + (v - x_min) / (x_max - x_min) * (pr - pl); };
    auto py = [&](double v) { return pb - (v - y_min) / (y_max - y_min) * (pb - pt); };

    svg << "<text x=\"" << (pl + pr) / 2 << "\" y=\"" << top + 18
        << "\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    svg << "<rect x=\"" << pl << "\" y=\"" << pt << "\" width=\"" << pr - pl << "\" height=\""
        << pb - pt << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x_min + (x_max - x_min) * k / 4.0;
        const double yv = y_min + (y_max - y_min) * k / 4.0;
        svg << "<text x=\"" << px(xv) << "\" y=\"" << pb + 14
            << "\" text-anchor=\"middle\" font-size=\"10\">" << std::round(xv * 100) / 100
            << "</text>\n";
        svg << "<text x=\"" << pl - 4 << "\" y=\"" << py(yv) + 3
            << "\" text-anchor=\"end\" font-size=\"10\">" << std::round(yv * 100) / 100
            << "</text>\n";
    }
    svg << "<text x=\"" << (pl + pr) / 2 << "\" y=\"" << pb + 32
        << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
    svg << "<text x=\"" << left + 14 << "\" y=\"" << (pt + pb) / 2
        << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 " << left + 14
        << ' ' << (pt + pb) / 2 << ")\">" << y_label << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kColors[s % std::size(kColors)];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < series[s].x.size(); ++i) {
            svg << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
        }
        svg << "\"/>\n";
        for (std::size_t i = 0; i < series[s].x.size(); ++i) {
            svg << "<circle cx=\"" << px(series[s].x[i]) << "\" cy=\"" << py(series[s].y[i])
                << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        }
        if (!series[s].label.empty()) {
            const double ly = pt + 14 + 14 * static_cast<double>(s);
            svg << "<text x=\"" << pl + 8 << "\" y=\"" << ly << "\" font-size=\"11\" fill=\""
                << color << "\">" << series[s].label << "</text>\n";
        }
    }
}

}  // namespace

void write_step_plot(std::span<const StepRow> rows, const std::filesystem::path& path) {
    Series elbo{"", {}, {}};
    Series bleu{"", {}, {}};
    for (const StepRow& r : rows) {
        elbo.x.push_back(r.step);
        elbo.y.push_back(r.mean_elbo);
        bleu.x.push_back(r.step);
        bleu.y.push_back(r.bleu);
    }
    std::ofstream out = open_output(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"320\" "
           "font-family=\"sans-serif\">\n<rect width=\"800\" height=\"320\" fill=\"white\"/>\n";
    draw_chart(out, 0, 0, 400, 320, "ELBO per refinement step", "step", "mean ELBO", {elbo});
    draw_chart(out, 400, 0, 400, 320, "BLEU per refinement step", "step", "BLEU", {bleu});
    out << "</svg>\n";
}

void write_tradeoff_plot(std::span<const TradeoffRow> rows, const std::filesystem::path& path) {
    std::map<int, Series> by_steps;
    for (const TradeoffRow& r : rows) {
        Series& s = by_steps[r.steps];
        s.label = "T=" + std::to_string(r.steps);
        s.x.push_back(r.speedup);
        s.y.push_back(r.bleu);
    }
    std::vector<Series> series;
    for (auto it = by_steps.rbegin(); it != by_steps.rend(); ++it) {
        series.push_back(it->second);
    }
    std::ofstream out = open_output(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\" "
           "font-family=\"sans-serif\">\n<rect width=\"480\" height=\"360\" fill=\"white\"/>\n";
    draw_chart(out, 0, 0, 480, 360, "BLEU against speedup over teacher beam search",
               "speedup", "BLEU", series);
    out << "</svg>\n";
}

}  // namespace lanmt
