#include "lanmt/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <random>
#include <stdexcept>

namespace lanmt {

namespace {

const std::array<std::string, kReservedCount> kReservedTokens = {"<pad>", "<s>", "</s>", "<unk>"};

const std::array<std::string, 10> kDigitWords = {"zero", "one", "two",   "three", "four",
                                                 "five", "six", "seven", "eight", "nine"};

constexpr int kMaxOffset = 50;
constexpr int kMaxFertility = 3;

std::string upper(std::string_view s) {
    std::string out(s);
    for (char& c : out) {
        c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    return out;
}

void append_phrase(Tokens& out, const std::string& symbol, int length, bool variant) {
    const std::string stem = upper(symbol) + (variant ? "v" : "");
    for (int i = 1; i <= length; ++i) {
        out.push_back(stem + std::to_string(i));
    }
}

}  // namespace

Vocab::Vocab() : Vocab(Tokens{}) {}

Vocab::Vocab(const Tokens& ordinary_tokens) {
    tokens_.assign(kReservedTokens.begin(), kReservedTokens.end());
    for (const std::string& t : ordinary_tokens) {
        if (t.empty()) {
            throw std::invalid_argument("vocab: empty token");
        }
        tokens_.push_back(t);
    }
    for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
        if (!index_.emplace(tokens_[i], i).second) {
            throw std::invalid_argument("vocab: duplicate token '" + tokens_[i] + "'");
        }
    }
}

int Vocab::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range("vocab: id " + std::to_string(id) + " outside [0, " +
                                std::to_string(size()) + ")");
    }
    return tokens_[id];
}

bool Vocab::contains(std::string_view token) const { return index_.contains(std::string(token)); }

TokenIds Vocab::encode(std::span<const std::string> tokens) const {
    TokenIds ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) {
        ids.push_back(id(t));
    }
    return ids;
}

Tokens Vocab::decode(std::span<const int> ids) const {
    Tokens out;
    out.reserve(ids.size());
    for (int i : ids) {
        out.push_back(token(i));
    }
    return out;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write vocab: " + path.string());
    }
    for (const std::string& t : tokens_) {
        out << t << '\n';
    }
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open vocab: " + path.string());
    }
    Tokens lines;
    std::string line;
    while (std::getline(in, line)) {
        lines.push_back(line);
    }
    if (lines.size() < kReservedCount ||
        !std::equal(kReservedTokens.begin(), kReservedTokens.end(), lines.begin())) {
        throw std::runtime_error("vocab file " + path.string() +
                                 " does not start with the reserved entries");
    }
    return Vocab(Tokens(lines.begin() + kReservedCount, lines.end()));
}

Vocab build_vocab(std::span<const RawPair> pairs, int min_count) {
    if (pairs.empty()) {
        throw std::invalid_argument("empty corpus");
    }
    std::map<std::string, int> counts;
    for (const RawPair& p : pairs) {
        for (const std::string& t : p.source) {
            ++counts[t];
        }
        for (const std::string& t : p.target) {
            ++counts[t];
        }
    }
    std::vector<std::pair<std::string, int>> kept;
    for (const auto& [tok, c] : counts) {
        const bool reserved =
            std::find(kReservedTokens.begin(), kReservedTokens.end(), tok) != kReservedTokens.end();
        if (c >= min_count && !reserved) {
            kept.emplace_back(tok, c);
        }
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Tokens ordered;
    ordered.reserve(kept.size());
    for (auto& [tok, c] : kept) {
        ordered.push_back(tok);
    }
    return Vocab(ordered);
}

std::string_view task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::DigitToWord:
            return "digit-to-word";
        case TaskKind::ExpandContract:
            return "expand-contract";
        case TaskKind::IdentityCopy:
            return "identity-copy";
    }
    return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
    if (name == "digit-to-word") {
        return TaskKind::DigitToWord;
    }
    if (name == "expand-contract") {
        return TaskKind::ExpandContract;
    }
    if (name == "identity-copy") {
        return TaskKind::IdentityCopy;
    }
    throw std::invalid_argument("unknown task kind '" + std::string(name) +
                                "' (expected digit-to-word, expand-contract or identity-copy)");
}

SyntheticTaskSpec default_task(TaskKind kind, std::uint64_t seed) {
    SyntheticTaskSpec spec;
    spec.kind = kind;
    spec.seed = seed;
    switch (kind) {
        case TaskKind::DigitToWord:
            spec.min_length = 2;
            spec.max_length = 10;
            break;
        case TaskKind::IdentityCopy:
            spec.min_length = 2;
            spec.max_length = 10;
            spec.alphabet = {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"};
            break;
        case TaskKind::ExpandContract: {
            spec.min_length = 2;
            spec.max_length = 8;
            const std::array<int, 12> fert = {0, 1, 2, 3, 1, 2, 0, 3, 1, 2, 2, 1};
            const std::array<int, 12> alt = {1, 2, 1, 2, 2, 1, 1, 2, 2, 3, 1, 0};
            for (int i = 0; i < 12; ++i) {
                const std::string sym(1, static_cast<char>('a' + i));
                spec.fertility[sym] = fert[i];
                spec.variant_fertility[sym] = alt[i];
            }
            break;
        }
    }
    return spec;
}

void validate(const SyntheticTaskSpec& spec) {
    if (spec.min_length < 1 || spec.max_length < spec.min_length) {
        throw std::invalid_argument("synthetic task: invalid source length range [" +
                                    std::to_string(spec.min_length) + ", " +
                                    std::to_string(spec.max_length) + "]");
    }
    if (spec.variant_rate < 0.0 || spec.variant_rate > 1.0) {
        throw std::invalid_argument("synthetic task: variant_rate must lie in [0, 1]");
    }
    switch (spec.kind) {
        case TaskKind::DigitToWord:
            break;
        case TaskKind::IdentityCopy:
            if (spec.alphabet.empty()) {
                throw std::invalid_argument("identity-copy task needs a non-empty alphabet");
            }
            break;
        case TaskKind::ExpandContract: {
            if (spec.fertility.empty()) {
                throw std::invalid_argument("expand-contract task needs a fertility table");
            }
            bool any_positive = false;
            for (const auto& [sym, f] : spec.fertility) {
                if (f < 0 || f > kMaxFertility) {
                    throw std::invalid_argument("fertility of '" + sym + "' outside {0,1,2,3}");
                }
                any_positive = any_positive || f > 0;
            }
            if (!any_positive) {
                throw std::invalid_argument("fertility table cannot produce a non-empty target");
            }
            if (spec.variant_rate > 0.0) {
                for (const auto& [sym, f] : spec.fertility) {
                    auto it = spec.variant_fertility.find(sym);
                    if (it == spec.variant_fertility.end() || it->second < 0 ||
                        it->second > kMaxFertility) {
                        throw std::invalid_argument("variant fertility of '" + sym +
                                                    "' missing or outside {0,1,2,3}");
                    }
                }
            }
            // Offsets span [-(max_length - 1), max_length * (kMaxFertility - 1)].
            if (spec.max_length * (kMaxFertility - 1) > kMaxOffset ||
                spec.max_length - 1 > kMaxOffset) {
                throw std::invalid_argument("source lengths up to " +
                                            std::to_string(spec.max_length) +
                                            " can leave the [-50, 50] offset range");
            }
            break;
        }
    }
}

Tokens render_target(const SyntheticTaskSpec& spec, std::span<const std::string> source) {
    Tokens target;
    switch (spec.kind) {
        case TaskKind::DigitToWord:
            for (const std::string& s : source) {
                if (s.size() != 1 || !std::isdigit(static_cast<unsigned char>(s[0]))) {
                    throw std::invalid_argument("digit-to-word source token '" + s +
                                                "' is not a digit");
                }
                target.push_back(kDigitWords[static_cast<std::size_t>(s[0] - '0')]);
            }
            break;
        case TaskKind::IdentityCopy:
            target.assign(source.begin(), source.end());
            break;
        case TaskKind::ExpandContract:
            for (const std::string& s : source) {
                auto it = spec.fertility.find(s);
                if (it == spec.fertility.end()) {
                    throw std::invalid_argument("symbol '" + s + "' has no fertility entry");
                }
                append_phrase(target, s, it->second, false);
            }
            break;
    }
    return target;
}

std::vector<RawPair> generate_synthetic(const SyntheticTaskSpec& spec, int n) {
    validate(spec);
    if (n < 1) {
        throw std::invalid_argument("generate_synthetic: n must be >= 1");
    }
    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<int> length_dist(spec.min_length, spec.max_length);
    Tokens symbols;
    switch (spec.kind) {
        case TaskKind::DigitToWord:
            for (char c = '0'; c <= '9'; ++c) {
                symbols.emplace_back(1, c);
            }
            break;
        case TaskKind::IdentityCopy:
            symbols = spec.alphabet;
            break;
        case TaskKind::ExpandContract:
            for (const auto& [sym, f] : spec.fertility) {
                symbols.push_back(sym);
            }
            break;
    }
    std::uniform_int_distribution<std::size_t> symbol_dist(0, symbols.size() - 1);
    std::bernoulli_distribution variant(spec.variant_rate);

    std::vector<RawPair> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    while (static_cast<int>(pairs.size()) < n) {
        RawPair p;
        const int len = length_dist(rng);
        for (int i = 0; i < len; ++i) {
            p.source.push_back(symbols[symbol_dist(rng)]);
        }
        if (spec.kind == TaskKind::ExpandContract && spec.variant_rate > 0.0) {
            for (const std::string& s : p.source) {
                if (variant(rng)) {
                    append_phrase(p.target, s, spec.variant_fertility.at(s), true);
                } else {
                    append_phrase(p.target, s, spec.fertility.at(s), false);
                }
            }
        } else {
            p.target = render_target(spec, p.source);
        }
        if (p.target.empty()) {
            continue;
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

Tokens split_whitespace(std::string_view text) {
    Tokens out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) {
            ++j;
        }
        if (j > i) {
            out.emplace_back(text.substr(i, j - i));
        }
        i = j;
    }
    return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) {
            out += ' ';
        }
        out += tokens[i];
    }
    return out;
}

std::vector<RawPair> read_parallel_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open corpus: " + path.string());
    }
    std::vector<RawPair> pairs;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": expected exactly 2 TAB-separated fields");
        }
        RawPair p{split_whitespace(std::string_view(line).substr(0, tab)),
                  split_whitespace(std::string_view(line).substr(tab + 1))};
        if (p.source.empty() || p.target.empty()) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": empty " + (p.source.empty() ? "source" : "target") +
                                     " side");
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

void write_parallel_corpus(std::span<const RawPair> pairs, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write corpus: " + path.string());
    }
    for (const RawPair& p : pairs) {
        if (p.source.empty() || p.target.empty()) {
            throw std::invalid_argument("write_parallel_corpus: empty side");
        }
        out << join_tokens(p.source) << '\t' << join_tokens(p.target) << '\n';
    }
}

std::vector<SentencePair> encode_pairs(const Vocab& vocab, std::span<const RawPair> pairs) {
    std::vector<SentencePair> out;
    out.reserve(pairs.size());
    for (const RawPair& p : pairs) {
        out.push_back({vocab.encode(p.source), vocab.encode(p.target)});
    }
    return out;
}

std::vector<RawPair> decode_pairs(const Vocab& vocab, std::span<const SentencePair> pairs) {
    std::vector<RawPair> out;
    out.reserve(pairs.size());
    for (const SentencePair& p : pairs) {
        out.push_back({vocab.decode(p.source), vocab.decode(p.target)});
    }
    return out;
}

}  // namespace lanmt
