#include "lanmt/pipeline.hpp"

#include "lanmt/corpus.hpp"
#include "lanmt/inference.hpp"
#include "lanmt/objective.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#ifndef LANMT_VERSION
#define LANMT_VERSION "unknown"
#endif

namespace lanmt {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

template <typename T>
T parse_number(const std::string& text, const char* what) {
    const std::string v = trim(text);
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
        throw std::invalid_argument(std::string("expected ") + what + ", got '" + text + "'");
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(parse_number<int>(item, "a comma-separated list of integers"));
    }
    return out;
}

std::string format_int_list(const std::vector<int>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out += (i ? "," : "") + std::to_string(values[i]);
    }
    return out;
}

struct Field {
    std::string section;
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename Access>
Field int_field(const char* section, const char* key, Access access) {
    return {section, key,
            [access](const ExperimentConfig& c) {
                return std::to_string(access(const_cast<ExperimentConfig&>(c)));
            },
            [access](ExperimentConfig& c, const std::string& v) {
                access(c) = parse_number<std::remove_reference_t<decltype(access(c))>>(
                    v, "an integer");
            }};
}

template <typename Access>
Field double_field(const char* section, const char* key, Access access) {
    return {section, key,
            [access](const ExperimentConfig& c) {
                return format_double(access(const_cast<ExperimentConfig&>(c)));
            },
            [access](ExperimentConfig& c, const std::string& v) {
                access(c) = parse_number<double>(v, "a number");
            }};
}

template <typename Access>
Field string_field(const char* section, const char* key, Access access) {
    return {section, key,
            [access](const ExperimentConfig& c) {
                return std::string(access(const_cast<ExperimentConfig&>(c)));
            },
            [access](ExperimentConfig& c, const std::string& v) { access(c) = trim(v); }};
}

const std::vector<Field>& fields() {
    using C = ExperimentConfig;
    static const std::vector<Field> table = {
        int_field("experiment", "seed", [](C& c) -> auto& { return c.seed; }),
        {"experiment", "output_dir", [](const C& c) { return c.output_dir.string(); },
         [](C& c, const std::string& v) { c.output_dir = trim(v); }},

        string_field("data", "task", [](C& c) -> auto& { return c.data.task; }),
        int_field("data", "train_size", [](C& c) -> auto& { return c.data.train_size; }),
        int_field("data", "heldout_size", [](C& c) -> auto& { return c.data.heldout_size; }),
        double_field("data", "variant_rate", [](C& c) -> auto& { return c.data.variant_rate; }),
        {"data", "train_path", [](const C& c) { return c.data.train_path.string(); },
         [](C& c, const std::string& v) { c.data.train_path = trim(v); }},
        {"data", "heldout_path", [](const C& c) { return c.data.heldout_path.string(); },
         [](C& c, const std::string& v) { c.data.heldout_path = trim(v); }},
        int_field("data", "min_count", [](C& c) -> auto& { return c.data.min_count; }),

        int_field("teacher", "hidden", [](C& c) -> auto& { return c.teacher.hidden; }),
        int_field("teacher", "feed_forward", [](C& c) -> auto& { return c.teacher.feed_forward; }),
        int_field("teacher", "encoder_layers",
                  [](C& c) -> auto& { return c.teacher.encoder_layers; }),
        int_field("teacher", "decoder_layers",
                  [](C& c) -> auto& { return c.teacher.decoder_layers; }),
        int_field("teacher", "heads", [](C& c) -> auto& { return c.teacher.heads; }),
        double_field("teacher", "dropout", [](C& c) -> auto& { return c.teacher.dropout; }),
        double_field("teacher", "label_smoothing",
                     [](C& c) -> auto& { return c.teacher.label_smoothing; }),
        int_field("teacher", "max_steps", [](C& c) -> auto& { return c.teacher.max_steps; }),
        int_field("teacher", "batch_size", [](C& c) -> auto& { return c.teacher.batch_size; }),
        double_field("teacher", "learning_rate",
                     [](C& c) -> auto& { return c.teacher.peak_learning_rate; }),
        int_field("teacher", "warmup_steps", [](C& c) -> auto& { return c.teacher.warmup_steps; }),
        double_field("teacher", "length_penalty",
                     [](C& c) -> auto& { return c.teacher.length_penalty; }),
        double_field("teacher", "max_len_ratio",
                     [](C& c) -> auto& { return c.teacher.max_len_ratio; }),
        int_field("teacher", "max_len_extra", [](C& c) -> auto& { return c.teacher.max_len_extra; }),

        int_field("nar", "latent_dim", [](C& c) -> auto& { return c.nar.latent_dim; }),
        int_field("nar", "hidden", [](C& c) -> auto& { return c.nar.hidden; }),
        int_field("nar", "feed_forward", [](C& c) -> auto& { return c.nar.feed_forward; }),
        int_field("nar", "prior_layers", [](C& c) -> auto& { return c.nar.prior_layers; }),
        int_field("nar", "decoder_layers", [](C& c) -> auto& { return c.nar.decoder_layers; }),
        int_field("nar", "posterior_layers", [](C& c) -> auto& { return c.nar.posterior_layers; }),
        int_field("nar", "heads", [](C& c) -> auto& { return c.nar.heads; }),
        int_field("nar", "max_offset", [](C& c) -> auto& { return c.nar.max_offset; }),
        {"nar", "length_pooling",
         [](const C& c) { return std::string(c.nar.length_pooling == LengthPooling::Mean ? "mean" : "sum"); },
         [](C& c, const std::string& v) {
             const std::string t = trim(v);
             if (t != "mean" && t != "sum") {
                 throw std::invalid_argument("expected mean or sum, got '" + v + "'");
             }
             c.nar.length_pooling = t == "mean" ? LengthPooling::Mean : LengthPooling::Sum;
         }},
        double_field("nar", "std_floor", [](C& c) -> auto& { return c.nar.std_floor; }),
        double_field("nar", "sigma_init", [](C& c) -> auto& { return c.nar.sigma_init; }),
        double_field("nar", "dropout", [](C& c) -> auto& { return c.nar.dropout; }),
        // max_steps is also M of the KL budget schedule.
        int_field("nar", "max_steps", [](C& c) -> auto& { return c.nar.max_steps; }),
        int_field("nar", "batch_size", [](C& c) -> auto& { return c.nar.batch_size; }),
        double_field("nar", "learning_rate",
                     [](C& c) -> auto& { return c.nar.peak_learning_rate; }),
        int_field("nar", "warmup_steps", [](C& c) -> auto& { return c.nar.warmup_steps; }),

        int_field("distill", "beam", [](C& c) -> auto& { return c.distill.beam; }),

        int_field("inference", "steps", [](C& c) -> auto& { return c.inference.steps; }),
        int_field("inference", "candidates", [](C& c) -> auto& { return c.inference.candidates; }),
        double_field("inference", "temperature",
                     [](C& c) -> auto& { return c.inference.temperature; }),
        int_field("inference", "search_seed", [](C& c) -> auto& { return c.inference.search_seed; }),
        int_field("inference", "batch_size", [](C& c) -> auto& { return c.inference.batch_size; }),

        int_field("evaluation", "elbo_samples",
                  [](C& c) -> auto& { return c.evaluation.elbo_samples; }),
        int_field("evaluation", "report_steps",
                  [](C& c) -> auto& { return c.evaluation.report_steps; }),
        {"evaluation", "tradeoff_candidates",
         [](const C& c) { return format_int_list(c.evaluation.tradeoff_candidates); },
         [](C& c, const std::string& v) { c.evaluation.tradeoff_candidates = parse_int_list(v); }},
        int_field("evaluation", "latency_sentences",
                  [](C& c) -> auto& { return c.evaluation.latency_sentences; }),
        int_field("evaluation", "latency_warmup",
                  [](C& c) -> auto& { return c.evaluation.latency_warmup; }),
        int_field("evaluation", "teacher_beam",
                  [](C& c) -> auto& { return c.evaluation.teacher_beam; }),
    };
    return table;
}

// Runs `check` and prefixes its error with the config section.
template <typename F>
void check_section(const char* section, F check) {
    try {
        check();
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string("config [") + section + "]: " + e.what());
    }
}

void require(bool ok, const std::string& message) {
    if (!ok) {
        throw std::invalid_argument(message);
    }
}

void require_file(const std::filesystem::path& path, const std::string& what,
                  const std::string& producer) {
    if (!std::filesystem::exists(path)) {
        throw std::runtime_error(what + " " + path.string() + " not found; run `lanmt " +
                                 producer + "` first");
    }
}

std::vector<SentencePair> load_pairs(const std::filesystem::path& path, const Vocab& vocab) {
    const std::vector<RawPair> raw = read_parallel_corpus(path);
    return encode_pairs(vocab, raw);
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read " + path.string());
    }
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        lines.push_back(line);
    }
    return lines;
}

std::ofstream open_for_writing(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    return out;
}

TeacherConfig teacher_config(const ExperimentConfig& c, int vocab_size) {
    TeacherConfig t = c.teacher;
    t.vocab_size = vocab_size;
    return t;
}

LatentModelConfig nar_config(const ExperimentConfig& c, int vocab_size) {
    LatentModelConfig n = c.nar;
    n.vocab_size = vocab_size;
    return n;
}

std::uint64_t teacher_seed(const ExperimentConfig& c) { return c.seed; }
std::uint64_t nar_seed(const ExperimentConfig& c) { return c.seed + 1; }
std::uint64_t heldout_seed(const ExperimentConfig& c) { return c.seed + 7919; }

}  // namespace

void ExperimentConfig::validate() const {
    check_section("experiment", [&] {
        require(profile == "desk" || profile == "paper", "profile must be desk or paper");
        require(!output_dir.empty(), "output_dir must not be empty");
    });
    check_section("data", [&] {
        require(data.train_path.empty() == data.heldout_path.empty(),
                "train_path and heldout_path must be given together");
        if (!data.train_path.empty()) {
            require(std::filesystem::exists(data.train_path),
                    "train_path " + data.train_path.string() + " does not exist");
            require(std::filesystem::exists(data.heldout_path),
                    "heldout_path " + data.heldout_path.string() + " does not exist");
        } else {
            static_cast<void>(parse_task_kind(data.task));
            require(data.train_size >= 1, "train_size must be >= 1");
            require(data.heldout_size >= 1, "heldout_size must be >= 1");
            require(data.variant_rate >= 0.0 && data.variant_rate <= 1.0,
                    "variant_rate must lie in [0, 1]");
        }
        require(data.min_count >= 1, "min_count must be >= 1");
    });
    check_section("teacher", [&] { teacher_config(*this, kReservedCount + 1).validate(); });
    check_section("nar", [&] { nar_config(*this, kReservedCount + 1).validate(); });
    check_section("distill", [&] { require(distill.beam >= 1, "beam must be >= 1"); });
    check_section("inference", [&] {
        require(inference.steps >= 0, "steps must be >= 0");
        require(inference.candidates >= 1, "candidates must be >= 1");
        require(inference.temperature > 0.0, "temperature must be > 0");
        require(inference.batch_size >= 1, "batch_size must be >= 1");
    });
    check_section("evaluation", [&] {
        require(evaluation.elbo_samples >= 1, "elbo_samples must be >= 1");
        require(evaluation.report_steps >= 0, "report_steps must be >= 0");
        require(!evaluation.tradeoff_candidates.empty(), "tradeoff_candidates must not be empty");
        for (int n : evaluation.tradeoff_candidates) {
            require(n >= 1, "tradeoff_candidates entries must be >= 1");
        }
        require(evaluation.latency_sentences >= 1, "latency_sentences must be >= 1");
        require(evaluation.latency_warmup >= 0, "latency_warmup must be >= 0");
        require(evaluation.teacher_beam >= 1, "teacher_beam must be >= 1");
    });
}

std::string ExperimentConfig::to_ini() const {
    std::ostringstream out;
    out << "[experiment]\nprofile = " << profile << '\n';
    std::string section = "experiment";
    for (const Field& f : fields()) {
        if (f.section != section) {
            section = f.section;
            out << "\n[" << section << "]\n";
        }
        out << f.key << " = " << f.get(*this) << '\n';
    }
    return out.str();
}

std::string ExperimentConfig::hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : to_ini()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ExperimentConfig profile_config(const std::string& name) {
    ExperimentConfig c;
    c.profile = name;
    if (name == "desk") {
        c.nar.length_pooling = LengthPooling::Sum;
        // Posterior stacks at half the prior depth, as in the paper profile.
        c.nar.posterior_layers = 1;
        c.nar.max_steps = 8000;
        return c;
    }
    if (name == "paper") {
        c.output_dir = "runs/paper";
        c.teacher = TeacherConfig::paper_profile(0);
        c.nar = LatentModelConfig::paper_profile(0);
        // Inverse-sqrt schedule of the base Transformer: 512^-0.5 * 4000^-0.5.
        c.teacher.peak_learning_rate = 7e-4;
        c.nar.peak_learning_rate = 7e-4;
        c.teacher.warmup_steps = 4000;
        c.nar.warmup_steps = 4000;
        c.teacher.max_steps = 100000;
        c.nar.max_steps = 100000;
        c.inference.candidates = 50;
        c.evaluation.tradeoff_candidates = {10, 20, 50, 100};
        return c;
    }
    throw std::invalid_argument("config [experiment] profile: unknown profile '" + name +
                                "' (expected desk or paper)");
}

ExperimentConfig parse_config(const std::string& text) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw std::invalid_argument("config: line " + std::to_string(e.line()) + ": " +
                                    e.message());
    }
    std::string profile = "desk";
    if (const auto experiment = tree.get_child_optional("experiment")) {
        if (const auto p = experiment->get_optional<std::string>("profile")) {
            profile = trim(*p);
        }
    }
    ExperimentConfig config = profile_config(profile);
    for (const auto& [section, keys] : tree) {
        if (keys.empty() && !keys.data().empty()) {
            throw std::invalid_argument("config: key '" + section + "' outside a [section]");
        }
        for (const auto& [key, value] : keys) {
            if (section == "experiment" && key == "profile") {
                continue;
            }
            const Field* field = nullptr;
            for (const Field& f : fields()) {
                if (f.section == section && f.key == key) {
                    field = &f;
                    break;
                }
            }
            if (field == nullptr) {
                throw std::invalid_argument("config [" + section + "] " + key + ": unknown key");
            }
            try {
                field->set(config, value.data());
            } catch (const std::invalid_argument& e) {
                throw std::invalid_argument("config [" + section + "] " + key + ": " + e.what());
            }
        }
    }
    return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read config " + path.string());
    }
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str());
}

void prepare_data(const ExperimentConfig& config) {
    const RunPaths paths{config.output_dir};
    std::filesystem::create_directories(paths.train().parent_path());
    std::vector<RawPair> train;
    std::vector<RawPair> heldout;
    if (!config.data.train_path.empty()) {
        train = read_parallel_corpus(config.data.train_path);
        heldout = read_parallel_corpus(config.data.heldout_path);
    } else {
        SyntheticTaskSpec spec = default_task(parse_task_kind(config.data.task), config.seed);
        spec.variant_rate = config.data.variant_rate;
        train = generate_synthetic(spec, config.data.train_size);

        std::set<Tokens> seen;
        for (const RawPair& p : train) {
            seen.insert(p.source);
        }
        SyntheticTaskSpec clean = spec;
        clean.variant_rate = 0.0;
        clean.seed = heldout_seed(config);
        const auto wanted = static_cast<std::size_t>(config.data.heldout_size);
        for (int factor = 2; heldout.size() < wanted; factor *= 2) {
            if (factor > 64) {
                throw std::runtime_error(
                    "cannot draw " + std::to_string(wanted) +
                    " held-out sources unseen in training; reduce data.heldout_size");
            }
            heldout.clear();
            for (RawPair& p : generate_synthetic(clean, config.data.heldout_size * factor)) {
                if (!seen.contains(p.source) && heldout.size() < wanted) {
                    heldout.push_back(std::move(p));
                }
            }
        }
    }
    write_parallel_corpus(train, paths.train());
    write_parallel_corpus(heldout, paths.heldout());
    build_vocab(train, config.data.min_count).save(paths.vocab());
}

TeacherRunResult cmd_train_teacher(const ExperimentConfig& config) {
    config.validate();
    prepare_data(config);
    const RunPaths paths{config.output_dir};
    const Vocab vocab = Vocab::load(paths.vocab());
    const std::vector<SentencePair> train = load_pairs(paths.train(), vocab);
    std::ofstream metrics = open_for_writing(config.output_dir / "teacher_metrics.jsonl");
    TeacherRunResult result;
    const TeacherModel model = train_teacher(
        train, teacher_config(config, vocab.size()), teacher_seed(config),
        [&](const TrainLogEntry& e) {
            metrics << nlohmann::json{{"step", e.step}, {"loss", e.loss}, {"lr", e.learning_rate}}
                           .dump()
                    << '\n';
            std::cerr << "teacher step " << e.step << " loss " << e.loss << '\n';
            result.final_loss = e.loss;
        });
    save_teacher(model, paths.teacher());
    return result;
}

DistillRunResult cmd_distill(const ExperimentConfig& config) {
    config.validate();
    const RunPaths paths{config.output_dir};
    require_file(paths.teacher(), "teacher checkpoint", "train-teacher");
    require_file(paths.vocab(), "vocabulary", "train-teacher");
    const Vocab vocab = Vocab::load(paths.vocab());
    const TeacherModel teacher = load_teacher(paths.teacher());
    const std::vector<SentencePair> train = load_pairs(paths.train(), vocab);
    const DistillResult distilled = distill_corpus(teacher, train, config.distill.beam);
    write_parallel_corpus(decode_pairs(vocab, distilled.pairs), paths.distilled());
    if (distilled.dropped_empty > 0) {
        std::cerr << "distill: dropped " << distilled.dropped_empty
                  << " pairs whose teacher output was empty\n";
    }
    return {distilled.pairs.size(), distilled.dropped_empty};
}

NarRunResult cmd_train_nar(const ExperimentConfig& config, bool use_distilled) {
    config.validate();
    const RunPaths paths{config.output_dir};
    if (use_distilled) {
        require_file(paths.distilled(), "distilled corpus", "distill");
    } else {
        prepare_data(config);
    }
    const Vocab vocab = Vocab::load(paths.vocab());
    const std::vector<SentencePair> train =
        load_pairs(use_distilled ? paths.distilled() : paths.train(), vocab);
    const std::string metrics_name = use_distilled ? "nar_metrics.jsonl" : "nar-raw_metrics.jsonl";
    std::ofstream metrics = open_for_writing(config.output_dir / metrics_name);
    NarRunResult result;
    result.distilled = use_distilled;
    const LatentModel model = train_latent_model(
        train, nar_config(config, vocab.size()), nar_seed(config),
        [&](const LatentTrainLogEntry& e) {
            metrics << nlohmann::json{{"step", e.step},
                                      {"loss", e.loss},
                                      {"recon", e.reconstruction},
                                      {"length_lp", e.length_log_prob},
                                      {"kl_raw", e.kl_raw},
                                      {"kl_budgeted", e.kl_budgeted},
                                      {"b", e.budget}}
                           .dump()
                    << '\n';
            std::cerr << "nar step " << e.step << " loss " << e.loss << " kl " << e.kl_raw
                      << " b " << e.budget << '\n';
            result.final_loss = e.loss;
        });
    save_latent_model(model, paths.nar(use_distilled));
    return result;
}

namespace {

nlohmann::json trace_json(const Vocab& vocab, const RefinementTrace& trace) {
    nlohmann::json steps = nlohmann::json::array();
    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
        const RefinementStep& s = trace.steps[t];
        nlohmann::json row{{"step", t},
                           {"length", s.length},
                           {"tokens", join_tokens(vocab.decode(s.tokens))},
                           {"decoder_lp", s.decoder_log_prob},
                           {"length_lp", s.length_log_prob},
                           {"prior_log_density", s.prior_log_density},
                           {"bound_plus_prior", s.decoder_log_prob + s.prior_log_density},
                           {"bound_minus_prior", s.decoder_log_prob - s.prior_log_density}};
        row["elbo"] = s.elbo ? nlohmann::json(*s.elbo) : nlohmann::json(nullptr);
        steps.push_back(std::move(row));
    }
    return {{"converged", trace.converged}, {"steps", std::move(steps)}};
}

struct LoadedModels {
    Vocab vocab;
    LatentModel nar;
    std::optional<TeacherModel> teacher;
};

LoadedModels load_models(const ExperimentConfig& config, bool use_distilled, bool need_teacher) {
    const RunPaths paths{config.output_dir};
    require_file(paths.vocab(), "vocabulary", "train-teacher");
    require_file(paths.nar(use_distilled), "NAR checkpoint",
                 use_distilled ? "train-nar" : "train-nar --no-distill");
    LoadedModels m{Vocab::load(paths.vocab()), load_latent_model(paths.nar(use_distilled)), {}};
    if (need_teacher) {
        require_file(paths.teacher(), "teacher checkpoint", "train-teacher");
        m.teacher.emplace(load_teacher(paths.teacher()));
    }
    return m;
}

// Translation used by both translate and evaluate: deterministic inference
// for one candidate, latent search otherwise.
TokenIds translate_one(const ExperimentConfig& config, const LoadedModels& m,
                       std::span<const int> x) {
    const InferenceConfig& inf = config.inference;
    if (inf.candidates > 1) {
        return latent_search(m.nar, *m.teacher, x, inf.candidates, inf.temperature, inf.steps,
                             inf.search_seed)
            .tokens;
    }
    return deterministic_inference(m.nar, x, inf.steps).tokens;
}

}  // namespace

void cmd_translate(const ExperimentConfig& config, const TranslateOptions& options) {
    config.validate();
    require(std::filesystem::exists(options.input),
            "input file " + options.input.string() + " does not exist");
    const LoadedModels m =
        load_models(config, options.use_distilled, config.inference.candidates > 1);
    const std::vector<std::string> lines = read_lines(options.input);
    std::vector<TokenIds> sources;
    std::vector<std::size_t> line_of;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const Tokens tokens = split_whitespace(lines[i]);
        if (!tokens.empty()) {
            sources.push_back(m.vocab.encode(tokens));
            line_of.push_back(i);
        }
    }
    std::vector<std::string> outputs(lines.size());
    std::optional<std::ofstream> trace_out;
    if (options.trace) {
        trace_out.emplace(open_for_writing(*options.trace));
    }
    if (config.inference.candidates > 1) {
        for (std::size_t k = 0; k < sources.size(); ++k) {
            const InferenceConfig& inf = config.inference;
            const SearchResult r = latent_search(m.nar, *m.teacher, sources[k], inf.candidates,
                                                 inf.temperature, inf.steps, inf.search_seed);
            outputs[line_of[k]] = join_tokens(m.vocab.decode(r.tokens));
            if (trace_out) {
                nlohmann::json candidates = nlohmann::json::array();
                for (const SearchCandidate& c : r.candidates) {
                    candidates.push_back({{"tokens", join_tokens(m.vocab.decode(c.tokens))},
                                          {"teacher_score", c.teacher_score},
                                          {"duplicate_of", c.duplicate_of}});
                }
                *trace_out << nlohmann::json{{"line", line_of[k]},
                                             {"chosen", r.chosen},
                                             {"candidates", std::move(candidates)}}
                                  .dump()
                           << '\n';
            }
        }
    } else {
        const std::vector<InferenceResult> results = translate_batch(
            m.nar, sources, config.inference.steps, config.inference.batch_size);
        for (std::size_t k = 0; k < results.size(); ++k) {
            outputs[line_of[k]] = join_tokens(m.vocab.decode(results[k].tokens));
            if (trace_out) {
                nlohmann::json row = trace_json(m.vocab, results[k].trace);
                row["line"] = line_of[k];
                *trace_out << row.dump() << '\n';
            }
        }
    }
    std::ofstream out = open_for_writing(options.output);
    for (const std::string& line : outputs) {
        out << line << '\n';
    }
}

EvaluateResult cmd_evaluate(const ExperimentConfig& config, bool use_distilled) {
    config.validate();
    const RunPaths paths{config.output_dir};
    require_file(paths.heldout(), "held-out corpus", "train-teacher");
    const bool have_teacher = std::filesystem::exists(paths.teacher());
    const LoadedModels m =
        load_models(config, use_distilled, config.inference.candidates > 1 || have_teacher);
    const std::vector<RawPair> raw = read_parallel_corpus(paths.heldout());
    const std::vector<SentencePair> heldout = encode_pairs(m.vocab, raw);
    std::vector<Tokens> references;
    for (const RawPair& p : raw) {
        references.push_back(p.target);
    }

    EvaluateResult result;
    EvalReport& report = result.report;
    std::vector<Tokens> hypotheses;
    if (config.inference.candidates > 1) {
        for (const SentencePair& p : heldout) {
            hypotheses.push_back(m.vocab.decode(translate_one(config, m, p.source)));
        }
    } else {
        std::vector<TokenIds> sources;
        for (const SentencePair& p : heldout) {
            sources.push_back(p.source);
        }
        const auto start = std::chrono::steady_clock::now();
        const std::vector<InferenceResult> results = translate_batch(
            m.nar, sources, config.inference.steps, config.inference.batch_size);
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
        report.throughput_sentences_per_s = static_cast<double>(sources.size()) / elapsed.count();
        for (const InferenceResult& r : results) {
            hypotheses.push_back(m.vocab.decode(r.tokens));
        }
    }
    report.bleu = evaluation_bleu(hypotheses, references);
    report.exact_match = exact_match(hypotheses, references);

    const std::size_t timed =
        std::min(heldout.size(), static_cast<std::size_t>(config.evaluation.latency_sentences));
    const LatencyStats nar_latency = latency_bench(
        [&](std::size_t i) { translate_one(config, m, heldout[i].source); }, timed,
        config.evaluation.latency_warmup, 1);
    report.latency_mean_ms = nar_latency.mean_ms;
    report.latency_std_ms = nar_latency.std_ms;

    if (m.teacher) {
        std::vector<Tokens> teacher_hyps;
        for (const SentencePair& p : heldout) {
            teacher_hyps.push_back(m.vocab.decode(greedy_decode(*m.teacher, p.source).tokens));
        }
        result.teacher_bleu = evaluation_bleu(teacher_hyps, references);
        result.teacher_exact_match = exact_match(teacher_hyps, references);
        report.teacher_latency = latency_bench(
            [&](std::size_t i) {
                beam_decode(*m.teacher, heldout[i].source, config.evaluation.teacher_beam);
            },
            timed, config.evaluation.latency_warmup, 1);
    }

    nlohmann::json j = nlohmann::json::parse(report.to_json());
    j["model"] = paths.nar(use_distilled).filename().string();
    j["steps"] = config.inference.steps;
    j["candidates"] = config.inference.candidates;
    j["sentences"] = heldout.size();
    if (result.teacher_bleu) {
        j["teacher_greedy_bleu"] = *result.teacher_bleu;
        j["teacher_greedy_exact_match"] = *result.teacher_exact_match;
        j["teacher_beam"] = config.evaluation.teacher_beam;
        j["speedup_over_teacher"] = speedup(nar_latency, *report.teacher_latency);
    }
    const std::string name = use_distilled ? "eval_report.json" : "eval_report-raw.json";
    open_for_writing(config.output_dir / name) << j.dump(2) << '\n';
    return result;
}

void cmd_report(const ExperimentConfig& config, bool use_distilled, bool plots) {
    config.validate();
    const RunPaths paths{config.output_dir};
    require_file(paths.heldout(), "held-out corpus", "train-teacher");
    const LoadedModels m = load_models(config, use_distilled, true);
    const std::vector<SentencePair> heldout = load_pairs(paths.heldout(), m.vocab);

    EvalReport report;
    report.per_step = per_step_report(m.nar, m.vocab, heldout, config.evaluation.report_steps,
                                      config.evaluation.elbo_samples, config.seed);
    const std::size_t timed =
        std::min(heldout.size(), static_cast<std::size_t>(config.evaluation.latency_sentences));
    TradeoffOptions options;
    options.candidates = config.evaluation.tradeoff_candidates;
    options.steps = config.inference.steps;
    options.temperature = config.inference.temperature;
    options.seed = config.inference.search_seed;
    options.teacher_beam = config.evaluation.teacher_beam;
    const TradeoffReport tradeoff = tradeoff_report(
        m.nar, *m.teacher, m.vocab, std::span(heldout).first(timed), options);
    report.tradeoff = tradeoff.rows;
    report.teacher_latency = tradeoff.teacher;
    const StepRow& first = report.per_step.front();
    report.bleu = first.bleu;
    report.exact_match = first.exact_match;
    for (const StepRow& r : report.per_step) {
        if (r.step == config.inference.steps) {
            report.bleu = r.bleu;
            report.exact_match = r.exact_match;
        }
    }

    const std::string suffix = use_distilled ? "" : "-raw";
    open_for_writing(config.output_dir / ("report" + suffix + ".json")) << report.to_json() << '\n';
    write_step_csv(report.per_step, config.output_dir / ("per_step" + suffix + ".csv"));
    write_tradeoff_csv(report.tradeoff, config.output_dir / ("tradeoff" + suffix + ".csv"));
    if (plots) {
        write_step_plot(report.per_step, config.output_dir / ("per_step" + suffix + ".svg"));
        write_tradeoff_plot(report.tradeoff, config.output_dir / ("tradeoff" + suffix + ".svg"));
    }
}

void write_manifest(const ExperimentConfig& config, const std::string& command,
                    double wall_time_s) {
    const RunPaths paths{config.output_dir};
    std::filesystem::create_directories(paths.manifests());
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    const nlohmann::json j{{"command", command},
                           {"config_hash", config.hash()},
                           {"seed", config.seed},
                           {"version", version_string()},
                           {"wall_time_s", wall_time_s},
                           {"finished_at", stamp},
                           {"config", config.to_ini()}};
    open_for_writing(paths.manifests() / (command + ".json")) << j.dump(2) << '\n';
}

std::string version_string() { return LANMT_VERSION; }

}  // namespace lanmt
