#include "lanmt/model.hpp"

#include <cmath>
#include <stdexcept>

namespace lanmt {

void LatentModelConfig::validate() const {
    if (vocab_size <= kReservedCount) {
        throw std::invalid_argument("model config: vocab_size must exceed the reserved ids");
    }
    if (latent_dim < 1) {
        throw std::invalid_argument("model config: latent_dim must be >= 1");
    }
    if (hidden < 1 || feed_forward < 1 || prior_layers < 1 || decoder_layers < 1 ||
        posterior_layers < 1 || heads < 1) {
        throw std::invalid_argument("model config: sizes must be positive");
    }
    if (hidden % heads != 0) {
        throw std::invalid_argument("model config: hidden size " + std::to_string(hidden) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    }
    if (max_offset < 1) {
        throw std::invalid_argument("model config: max_offset must be >= 1");
    }
    if (!(std_floor > 0.0) || !(sigma_init > 0.0)) {
        throw std::invalid_argument("model config: std_floor and sigma_init must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw std::invalid_argument("model config: dropout must lie in [0, 1)");
    }
    if (max_steps < 2 || batch_size < 1) {
        throw std::invalid_argument("model config: max_steps >= 2 and batch_size >= 1 required");
    }
}

CheckpointHeader LatentModelConfig::to_header() const {
    return {
        {"kind", "latent"},
        {"vocab_size", std::to_string(vocab_size)},
        {"latent_dim", std::to_string(latent_dim)},
        {"hidden", std::to_string(hidden)},
        {"feed_forward", std::to_string(feed_forward)},
        {"prior_layers", std::to_string(prior_layers)},
        {"decoder_layers", std::to_string(decoder_layers)},
        {"posterior_layers", std::to_string(posterior_layers)},
        {"heads", std::to_string(heads)},
        {"max_offset", std::to_string(max_offset)},
        {"length_pooling", length_pooling == LengthPooling::Mean ? "mean" : "sum"},
        {"std_floor", format_double(std_floor)},
        {"sigma_init", format_double(sigma_init)},
        {"dropout", format_double(dropout)},
        {"max_steps", std::to_string(max_steps)},
        {"batch_size", std::to_string(batch_size)},
        {"peak_learning_rate", format_double(peak_learning_rate)},
        {"warmup_steps", std::to_string(warmup_steps)},
    };
}

LatentModelConfig LatentModelConfig::from_header(const CheckpointHeader& h) {
    if (header_string(h, "kind") != "latent") {
        throw std::runtime_error("checkpoint is a '" + header_string(h, "kind") +
                                 "' model, expected a latent-variable model");
    }
    LatentModelConfig c;
    c.vocab_size = header_int(h, "vocab_size");
    c.latent_dim = header_int(h, "latent_dim");
    c.hidden = header_int(h, "hidden");
    c.feed_forward = header_int(h, "feed_forward");
    c.prior_layers = header_int(h, "prior_layers");
    c.decoder_layers = header_int(h, "decoder_layers");
    c.posterior_layers = header_int(h, "posterior_layers");
    c.heads = header_int(h, "heads");
    c.max_offset = header_int(h, "max_offset");
    const std::string& pooling = header_string(h, "length_pooling");
    if (pooling != "mean" && pooling != "sum") {
        throw std::runtime_error("unknown length_pooling '" + pooling + "'");
    }
    c.length_pooling = pooling == "mean" ? LengthPooling::Mean : LengthPooling::Sum;
    c.std_floor = header_double(h, "std_floor");
    c.sigma_init = header_double(h, "sigma_init");
    c.dropout = header_double(h, "dropout");
    c.max_steps = header_int(h, "max_steps");
    c.batch_size = header_int(h, "batch_size");
    c.peak_learning_rate = header_double(h, "peak_learning_rate");
    c.warmup_steps = header_int(h, "warmup_steps");
    return c;
}

LatentModelConfig LatentModelConfig::paper_profile(int vocab_size) {
    LatentModelConfig c;
    c.vocab_size = vocab_size;
    c.latent_dim = 8;
    c.hidden = 512;
    c.feed_forward = 2048;
    c.prior_layers = 6;
    c.decoder_layers = 6;
    c.posterior_layers = 3;
    c.heads = 8;
    c.dropout = 0.1;
    return c;
}

int LengthDistribution::argmax_offset() const {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < log_probs.cols(); ++i) {
        if (log_probs(i) > log_probs(best)) {
            best = i;
        }
    }
    return static_cast<int>(best) - max_offset;
}

LatentModel::LatentModel(const LatentModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const int H = config_.hidden;
    const int D = config_.latent_dim;
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(H)));
    Matrix emb(config_.vocab_size, H);
    for (Eigen::Index i = 0; i < emb.size(); ++i) {
        emb.data()[i] = normal(rng);
    }
    embedding_ = &params_.add("prior/embedding", std::move(emb));
    prior_stack_ = make_transformer_stack(params_, "prior/encoder", config_.prior_layers, H,
                                          config_.feed_forward, config_.heads, false, rng);
    prior_mean_ = make_linear(params_, "prior/mean", H, D, rng);
    prior_std_ = make_linear(params_, "prior/std", H, D, rng);
    posterior_target_stack_ =
        make_transformer_stack(params_, "posterior/target_encoder", config_.posterior_layers, H,
                               config_.feed_forward, config_.heads, false, rng);
    posterior_source_stack_ =
        make_transformer_stack(params_, "posterior/source_decoder", config_.posterior_layers, H,
                               config_.feed_forward, config_.heads, true, rng);
    posterior_mean_ = make_linear(params_, "posterior/mean", H, D, rng);
    posterior_std_ = make_linear(params_, "posterior/std", H, D, rng);
    length_ = make_linear(params_, "length/output", D, config_.offset_classes(), rng);
    sigma_ = &params_.add("length_transform/sigma", Matrix::Constant(1, 1, config_.sigma_init));
    latent_in_ = make_linear(params_, "decoder/latent_in", D, H, rng);
    decoder_stack_ = make_transformer_stack(params_, "decoder/stack", config_.decoder_layers, H,
                                            config_.feed_forward, config_.heads, true, rng);
    output_ = make_linear(params_, "decoder/output", H, config_.vocab_size, rng);
}

void LatentModel::zero_output_layers() {
    output_.weight->value.setZero();
    output_.bias->value.setZero();
    length_.weight->value.setZero();
    length_.bias->value.setZero();
}

void LatentModel::check_ids(std::span<const int> ids) const {
    for (int id : ids) {
        if (id < 0 || id >= config_.vocab_size) {
            throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(config_.vocab_size));
        }
    }
}

Var LatentModel::embed_tokens(Graph& g, std::span<const int> ids, const Packing& p,
                              const DropoutContext* drop) const {
    check_ids(ids);
    const double emb_scale = std::sqrt(static_cast<double>(config_.hidden));
    Var x = scale(embed(g.parameter(*embedding_), ids), emb_scale);
    return dropout(add(x, g.constant(sinusoidal_positions(p, config_.hidden))), drop);
}

GaussianVars LatentModel::gaussian_head(Graph& g, Var h, const Linear& mean,
                                        const Linear& std) const {
    return {mean(g, h), clamp_min(softplus(std(g, h)), config_.std_floor)};
}

PriorVars LatentModel::prior(Graph& g, std::span<const int> src_ids, const Packing& src,
                             const DropoutContext* drop) const {
    Var x = embed_tokens(g, src_ids, src, drop);
    Var enc = prior_stack_(g, x, self_attention_layout(src, false), nullptr, nullptr, drop);
    return {gaussian_head(g, enc, prior_mean_, prior_std_), enc};
}

GaussianVars LatentModel::posterior(Graph& g, std::span<const int> src_ids, const Packing& src,
                                    std::span<const int> tgt_ids, const Packing& tgt,
                                    const DropoutContext* drop) const {
    Var y = embed_tokens(g, tgt_ids, tgt, drop);
    Var y_enc =
        posterior_target_stack_(g, y, self_attention_layout(tgt, false), nullptr, nullptr, drop);
    Var x = embed_tokens(g, src_ids, src, drop);
    const AttentionLayout cross = cross_attention_layout(src, tgt);
    Var h = posterior_source_stack_(g, x, self_attention_layout(src, false), &y_enc, &cross, drop);
    return gaussian_head(g, h, posterior_mean_, posterior_std_);
}

Var LatentModel::length_log_probs(Graph& g, Var z, const Packing& src) const {
    Var pooled = pool_rows(z, src.spans, config_.length_pooling == LengthPooling::Mean);
    return log_softmax_rows(length_(g, pooled));
}

Var LatentModel::transform(Graph& g, Var z, const Packing& src,
                           std::span<const int> target_lengths) const {
    for (int l : target_lengths) {
        if (l < 1) {
            throw std::invalid_argument("target length " + std::to_string(l) + " must be >= 1");
        }
    }
    return length_transform(z, g.parameter(*sigma_), src.spans, target_lengths);
}

Var LatentModel::decode(Graph& g, Var transformed, const Packing& tgt, Var encoding,
                        const Packing& src, const DropoutContext* drop) const {
    Var h = latent_in_(g, transformed);
    h = dropout(add(h, g.constant(sinusoidal_positions(tgt, config_.hidden))), drop);
    const AttentionLayout cross = cross_attention_layout(tgt, src);
    h = decoder_stack_(g, h, self_attention_layout(tgt, false), &encoding, &cross, drop);
    return log_softmax_rows(output_(g, h));
}

std::pair<GaussianSequence, SourceEncoding> prior_encode(const LatentModel& model,
                                                         std::span<const int> x) {
    if (x.empty()) {
        throw std::invalid_argument("prior_encode: empty source");
    }
    Graph g(false);
    const std::vector<int> len = {static_cast<int>(x.size())};
    const Packing src = Packing::from_lengths(len);
    PriorVars p = model.prior(g, x, src);
    return {GaussianSequence{p.gaussian.mean.value(), p.gaussian.std.value()},
            SourceEncoding{p.encoding.value()}};
}

GaussianSequence posterior_encode(const LatentModel& model, std::span<const int> x,
                                  std::span<const int> y) {
    if (x.empty() || y.empty()) {
        throw std::invalid_argument("posterior_encode: empty source or target");
    }
    Graph g(false);
    const std::vector<int> src_len = {static_cast<int>(x.size())};
    const std::vector<int> tgt_len = {static_cast<int>(y.size())};
    GaussianVars q = model.posterior(g, x, Packing::from_lengths(src_len), y,
                                     Packing::from_lengths(tgt_len));
    return {q.mean.value(), q.std.value()};
}

LatentSequence reparameterize(const GaussianSequence& g, const Matrix& noise) {
    if (noise.rows() != g.means.rows() || noise.cols() != g.means.cols() ||
        g.stds.rows() != g.means.rows() || g.stds.cols() != g.means.cols()) {
        throw std::invalid_argument("reparameterize: noise shape " + std::to_string(noise.rows()) +
                                    "x" + std::to_string(noise.cols()) + " does not match " +
                                    std::to_string(g.means.rows()) + "x" +
                                    std::to_string(g.means.cols()));
    }
    return {g.means + g.stds.cwiseProduct(noise)};
}

LengthDistribution predict_length(const LatentModel& model, const LatentSequence& z) {
    if (z.length() < 1) {
        throw std::invalid_argument("predict_length: empty latent sequence");
    }
    Graph g(false);
    const std::vector<int> len = {z.length()};
    Var lp = model.length_log_probs(g, g.constant(z.vectors), Packing::from_lengths(len));
    return {lp.value().row(0), model.config().max_offset};
}

Matrix length_transform(const LatentSequence& z, int target_length, double sigma, int max_offset) {
    if (z.length() < 1) {
        throw std::invalid_argument("length_transform: empty latent sequence");
    }
    if (target_length < 1 || target_length > z.length() + max_offset) {
        throw std::invalid_argument("target length " + std::to_string(target_length) +
                                    " outside [1, " + std::to_string(z.length() + max_offset) + "]");
    }
    return length_transform_weights(z.length(), target_length, sigma) * z.vectors;
}

Matrix decode_tokens(const LatentModel& model, const Matrix& transformed,
                     const SourceEncoding& encoding) {
    if (transformed.rows() < 1) {
        throw std::invalid_argument("decode_tokens: target length must be >= 1");
    }
    Graph g(false);
    const std::vector<int> tgt_len = {static_cast<int>(transformed.rows())};
    const std::vector<int> src_len = {encoding.length()};
    return model
        .decode(g, g.constant(transformed), Packing::from_lengths(tgt_len),
                g.constant(encoding.states), Packing::from_lengths(src_len))
        .value();
}

void save_latent_model(const LatentModel& model, const std::filesystem::path& path) {
    save_checkpoint(path, model.config().to_header(), model.params());
}

LatentModel load_latent_model(const std::filesystem::path& path) {
    const LatentModelConfig config = LatentModelConfig::from_header(read_checkpoint_header(path));
    LatentModel model(config, 0);
    load_checkpoint(path, model.params());
    return model;
}

}  // namespace lanmt
