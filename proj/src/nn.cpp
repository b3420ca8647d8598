#include "lanmt/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace lanmt {

Parameter& ParamStore::add(const std::string& name, Matrix init) {
    if (params_.contains(name)) {
        throw std::invalid_argument("duplicate parameter name: " + name);
    }
    auto p = std::make_unique<Parameter>();
    p->value = std::move(init);
    Parameter& ref = *p;
    params_.emplace(name, std::move(p));
    return ref;
}

Parameter& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::out_of_range("unknown parameter: " + name);
    }
    return *it->second;
}

const Parameter& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::out_of_range("unknown parameter: " + name);
    }
    return *it->second;
}

void ParamStore::zero_grad() {
    for (auto& [name, p] : params_) {
        p->grad.resize(0, 0);
    }
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) {
        n += static_cast<std::size_t>(p->value.size());
    }
    return n;
}

Matrix xavier_uniform(int rows, int cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
    return m;
}

Packing Packing::from_lengths(std::span<const int> lengths) {
    Packing p;
    p.spans.reserve(lengths.size());
    for (int len : lengths) {
        if (len < 1) {
            throw std::invalid_argument("Packing: sequence lengths must be >= 1");
        }
        p.spans.push_back({p.total_rows, len});
        p.total_rows += len;
    }
    return p;
}

AttentionLayout self_attention_layout(const Packing& p, bool causal) {
    return AttentionLayout{p.spans, p.spans, causal};
}

AttentionLayout cross_attention_layout(const Packing& queries, const Packing& keys) {
    if (queries.spans.size() != keys.spans.size()) {
        throw std::invalid_argument("cross_attention_layout: batch sizes differ");
    }
    return AttentionLayout{queries.spans, keys.spans, false};
}

RowVector sinusoidal_position(int position, int width) {
    RowVector row(width);
    for (int i = 0; i < width; ++i) {
        const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(width);
        const double angle = static_cast<double>(position) / std::pow(10000.0, exponent);
        row(i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
    return row;
}

Matrix sinusoidal_positions(const Packing& p, int width) {
    Matrix out(p.total_rows, width);
    for (const RowSpan& s : p.spans) {
        for (int t = 0; t < s.length; ++t) {
            out.row(s.start + t) = sinusoidal_position(t, width);
        }
    }
    return out;
}

Var dropout(Var x, const DropoutContext* ctx) {
    if (ctx == nullptr || ctx->rate <= 0.0 || ctx->rng == nullptr) {
        return x;
    }
    std::bernoulli_distribution keep(1.0 - ctx->rate);
    Matrix mask(x.rows(), x.cols());
    const double inv = 1.0 / (1.0 - ctx->rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = keep(*ctx->rng) ? inv : 0.0;
    }
    return mul(x, x.graph->constant(std::move(mask)));
}

Var Linear::operator()(Graph& g, Var x) const {
    return affine(x, g.parameter(*weight), g.parameter(*bias));
}

Matrix Linear::apply(const Matrix& x) const {
    Matrix out = x * weight->value;
    out.rowwise() += bias->value.row(0);
    return out;
}

Linear make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
    Linear l;
    l.weight = &store.add(name + "/weight", xavier_uniform(in, out, rng));
    l.bias = &store.add(name + "/bias", Matrix::Zero(1, out));
    return l;
}

Var LayerNorm::operator()(Graph& g, Var x) const {
    return layer_norm(x, g.parameter(*gain), g.parameter(*bias));
}

Matrix LayerNorm::apply(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    const double width = static_cast<double>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().sum() / width;
        const double inv_std = 1.0 / std::sqrt(var + 1e-5);
        out.row(r) = ((x.row(r).array() - mean) * inv_std) * gain->value.row(0).array() +
                     bias->value.row(0).array();
    }
    return out;
}

LayerNorm make_layer_norm(ParamStore& store, const std::string& name, int width) {
    LayerNorm ln;
    ln.gain = &store.add(name + "/gain", Matrix::Ones(1, width));
    ln.bias = &store.add(name + "/bias", Matrix::Zero(1, width));
    return ln;
}

Var MultiHeadAttention::operator()(Graph& g, Var queries, Var memory,
                                   const AttentionLayout& layout) const {
    Var q = query(g, queries);
    Var k = key(g, memory);
    Var v = value(g, memory);
    return output(g, attention(q, k, v, heads, layout));
}

MultiHeadAttention make_attention(ParamStore& store, const std::string& name, int hidden,
                                  int heads, Rng& rng) {
    if (heads < 1 || hidden % heads != 0) {
        throw std::invalid_argument("hidden size " + std::to_string(hidden) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    }
    MultiHeadAttention a;
    a.query = make_linear(store, name + "/query", hidden, hidden, rng);
    a.key = make_linear(store, name + "/key", hidden, hidden, rng);
    a.value = make_linear(store, name + "/value", hidden, hidden, rng);
    a.output = make_linear(store, name + "/output", hidden, hidden, rng);
    a.heads = heads;
    return a;
}

Var FeedForward::operator()(Graph& g, Var x, const DropoutContext* drop) const {
    return contract(g, dropout(relu(expand(g, x)), drop));
}

Matrix FeedForward::apply(const Matrix& x) const {
    return contract.apply(expand.apply(x).cwiseMax(0.0));
}

FeedForward make_feed_forward(ParamStore& store, const std::string& name, int hidden, int ff,
                              Rng& rng) {
    FeedForward f;
    f.expand = make_linear(store, name + "/expand", hidden, ff, rng);
    f.contract = make_linear(store, name + "/contract", ff, hidden, rng);
    return f;
}

TransformerLayer make_transformer_layer(ParamStore& store, const std::string& name, int hidden,
                                        int ff, int heads, bool with_cross, Rng& rng) {
    TransformerLayer l;
    l.self_norm = make_layer_norm(store, name + "/self_norm", hidden);
    l.self_attention = make_attention(store, name + "/self_attention", hidden, heads, rng);
    l.has_cross = with_cross;
    if (with_cross) {
        l.cross_norm = make_layer_norm(store, name + "/cross_norm", hidden);
        l.cross_attention = make_attention(store, name + "/cross_attention", hidden, heads, rng);
    }
    l.ff_norm = make_layer_norm(store, name + "/ff_norm", hidden);
    l.feed_forward = make_feed_forward(store, name + "/feed_forward", hidden, ff, rng);
    return l;
}

Var TransformerStack::operator()(Graph& g, Var x, const AttentionLayout& self, const Var* memory,
                                 const AttentionLayout* cross, const DropoutContext* drop) const {
    for (const TransformerLayer& l : layers) {
        Var h = l.self_norm(g, x);
        x = add(x, dropout(l.self_attention(g, h, h, self), drop));
        if (l.has_cross) {
            if (memory == nullptr || cross == nullptr) {
                throw std::invalid_argument("cross-attention layer needs a memory");
            }
            Var c = l.cross_norm(g, x);
            x = add(x, dropout(l.cross_attention(g, c, *memory, *cross), drop));
        }
        Var f = l.ff_norm(g, x);
        x = add(x, dropout(l.feed_forward(g, f, drop), drop));
    }
    return final_norm(g, x);
}

TransformerStack make_transformer_stack(ParamStore& store, const std::string& name, int layers,
                                        int hidden, int ff, int heads, bool with_cross, Rng& rng) {
    TransformerStack s;
    for (int i = 0; i < layers; ++i) {
        s.layers.push_back(make_transformer_layer(store, name + "/layer" + std::to_string(i),
                                                  hidden, ff, heads, with_cross, rng));
    }
    s.final_norm = make_layer_norm(store, name + "/final_norm", hidden);
    return s;
}

}  // namespace lanmt
