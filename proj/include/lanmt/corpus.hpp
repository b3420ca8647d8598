#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace lanmt {

using TokenIds = std::vector<int>;
using Tokens = std::vector<std::string>;

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kReservedCount = 4;

// Bidirectional token <-> id map. Ids 0..3 are the reserved pad/bos/eos/unk
// entries; ordinary tokens follow densely from 4.
class Vocab {
public:
    Vocab();
    explicit Vocab(const Tokens& ordinary_tokens);

    [[nodiscard]] int id(std::string_view token) const;  // unk when absent
    [[nodiscard]] const std::string& token(int id) const;
    [[nodiscard]] bool contains(std::string_view token) const;
    [[nodiscard]] int size() const { return static_cast<int>(tokens_.size()); }
    [[nodiscard]] const Tokens& tokens() const { return tokens_; }

    [[nodiscard]] TokenIds encode(std::span<const std::string> tokens) const;
    [[nodiscard]] Tokens decode(std::span<const int> ids) const;

    // One token per line; the first four lines are the reserved entries.
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

private:
    Tokens tokens_;
    std::unordered_map<std::string, int> index_;
};

struct RawPair {
    Tokens source;
    Tokens target;
    bool operator==(const RawPair&) const = default;
};

struct SentencePair {
    TokenIds source;
    TokenIds target;
    bool operator==(const SentencePair&) const = default;
};

// Frequency >= min_count over both sides, ordered by frequency descending
// then lexicographically. Throws "empty corpus" on an empty input.
Vocab build_vocab(std::span<const RawPair> pairs, int min_count);

enum class TaskKind { DigitToWord, ExpandContract, IdentityCopy };

[[nodiscard]] std::string_view task_kind_name(TaskKind kind);
[[nodiscard]] TaskKind parse_task_kind(std::string_view name);

struct SyntheticTaskSpec {
    TaskKind kind = TaskKind::DigitToWord;
    int min_length = 2;
    int max_length = 10;
    // Source symbol -> target phrase length in {0,1,2,3}. Defines the
    // source alphabet for expand-contract.
    std::map<std::string, int> fertility;
    // Probability that an expand-contract token is rendered with its
    // alternative phrase (of length variant_fertility[token]) instead of the
    // canonical one. Zero yields a deterministic source -> target mapping.
    double variant_rate = 0.0;
    std::map<std::string, int> variant_fertility;
    // Source alphabet for identity-copy.
    Tokens alphabet;
    std::uint64_t seed = 1;
};

// Built-in task definitions used by the CLI and tests.
SyntheticTaskSpec default_task(TaskKind kind, std::uint64_t seed);

// Throws std::invalid_argument when the spec is inconsistent, including
// when a generated offset |y| - |x| could leave [-50, 50].
void validate(const SyntheticTaskSpec& spec);

// Canonical (variant-free) target for a source sentence.
Tokens render_target(const SyntheticTaskSpec& spec, std::span<const std::string> source);

// n pairs, deterministic in spec.seed. Expand-contract pairs whose target
// would be empty are redrawn.
std::vector<RawPair> generate_synthetic(const SyntheticTaskSpec& spec, int n);

// UTF-8 TSV, one "source<TAB>target" line per pair, whitespace-tokenised.
std::vector<RawPair> read_parallel_corpus(const std::filesystem::path& path);
void write_parallel_corpus(std::span<const RawPair> pairs, const std::filesystem::path& path);

Tokens split_whitespace(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);

std::vector<SentencePair> encode_pairs(const Vocab& vocab, std::span<const RawPair> pairs);
std::vector<RawPair> decode_pairs(const Vocab& vocab, std::span<const SentencePair> pairs);

}  // namespace lanmt
