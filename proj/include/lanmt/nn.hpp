#pragma once

#include "lanmt/autodiff.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lanmt {

using Rng = std::mt19937_64;

// Named collection of trainable tensors. Iteration order is by name, which
// keeps optimisation and serialisation deterministic.
class ParamStore {
public:
    Parameter& add(const std::string& name, Matrix init);
    [[nodiscard]] Parameter& get(const std::string& name);
    [[nodiscard]] const Parameter& get(const std::string& name) const;
    [[nodiscard]] bool contains(const std::string& name) const { return params_.contains(name); }

    void zero_grad();
    [[nodiscard]] std::size_t scalar_count() const;
    [[nodiscard]] std::size_t size() const { return params_.size(); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    [[nodiscard]] auto begin() const { return params_.cbegin(); }
    [[nodiscard]] auto end() const { return params_.cend(); }

private:
    std::map<std::string, std::unique_ptr<Parameter>> params_;
};

Matrix xavier_uniform(int rows, int cols, Rng& rng);

// Row layout of several sentences packed into one matrix.
struct Packing {
    std::vector<RowSpan> spans;
    int total_rows = 0;

    static Packing from_lengths(std::span<const int> lengths);
};

AttentionLayout self_attention_layout(const Packing& p, bool causal);
AttentionLayout cross_attention_layout(const Packing& queries, const Packing& keys);

// Sinusoidal position table, positions restarting at 0 for every span.
Matrix sinusoidal_positions(const Packing& p, int width);
RowVector sinusoidal_position(int position, int width);

// Inverted dropout on the training path; a null context or zero rate is the
// identity.
struct DropoutContext {
    double rate = 0.0;
    Rng* rng = nullptr;
};
Var dropout(Var x, const DropoutContext* ctx);

struct Linear {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;

    Var operator()(Graph& g, Var x) const;
    [[nodiscard]] Matrix apply(const Matrix& x) const;
};
Linear make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng);

struct LayerNorm {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;

    Var operator()(Graph& g, Var x) const;
    [[nodiscard]] Matrix apply(const Matrix& x) const;
};
LayerNorm make_layer_norm(ParamStore& store, const std::string& name, int width);

struct MultiHeadAttention {
    Linear query;
    Linear key;
    Linear value;
    Linear output;
    int heads = 1;

    Var operator()(Graph& g, Var queries, Var memory, const AttentionLayout& layout) const;
};
MultiHeadAttention make_attention(ParamStore& store, const std::string& name, int hidden,
                                  int heads, Rng& rng);

struct FeedForward {
    Linear expand;
    Linear contract;

    Var operator()(Graph& g, Var x, const DropoutContext* drop) const;
    [[nodiscard]] Matrix apply(const Matrix& x) const;
};
FeedForward make_feed_forward(ParamStore& store, const std::string& name, int hidden, int ff,
                              Rng& rng);

// Pre-norm transformer block: self-attention, optional cross-attention over a
// memory, then a position-wise feed-forward, each with a residual connection.
struct TransformerLayer {
    LayerNorm self_norm;
    MultiHeadAttention self_attention;
    bool has_cross = false;
    LayerNorm cross_norm;
    MultiHeadAttention cross_attention;
    LayerNorm ff_norm;
    FeedForward feed_forward;
};
TransformerLayer make_transformer_layer(ParamStore& store, const std::string& name, int hidden,
                                        int ff, int heads, bool with_cross, Rng& rng);

struct TransformerStack {
    std::vector<TransformerLayer> layers;
    LayerNorm final_norm;

    // `memory`/`cross` are ignored by layers without cross-attention.
    Var operator()(Graph& g, Var x, const AttentionLayout& self, const Var* memory,
                   const AttentionLayout* cross, const DropoutContext* drop) const;
};
TransformerStack make_transformer_stack(ParamStore& store, const std::string& name, int layers,
                                        int hidden, int ff, int heads, bool with_cross, Rng& rng);

}  // namespace lanmt
