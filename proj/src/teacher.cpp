#include "lanmt/teacher.hpp"

#include "lanmt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace lanmt {

namespace {

// Multi-head attention for a single query row against cached keys/values.
Matrix attend_row(const Matrix& q, const Matrix& keys, const Matrix& values, int heads) {
    const int hd = static_cast<int>(q.cols()) / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix out(1, q.cols());
    for (int h = 0; h < heads; ++h) {
        Eigen::RowVectorXd scores =
            (q.block(0, h * hd, 1, hd) * keys.middleCols(h * hd, hd).transpose()) * inv_sqrt;
        const double mx = scores.maxCoeff();
        scores = (scores.array() - mx).exp();
        scores /= scores.sum();
        out.block(0, h * hd, 1, hd) = scores * values.middleCols(h * hd, hd);
    }
    return out;
}

void append_row(Matrix& m, const Matrix& row) {
    const Eigen::Index r = m.rows();
    m.conservativeResize(r + 1, row.cols());
    m.row(r) = row.row(0);
}

RowVector log_softmax_row(const Matrix& logits) {
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    return (logits.array() - lse).matrix();
}

}  // namespace

void TeacherConfig::validate() const {
    if (vocab_size <= kReservedCount) {
        throw std::invalid_argument("teacher config: vocab_size must exceed the reserved ids");
    }
    if (hidden < 1 || feed_forward < 1 || encoder_layers < 1 || decoder_layers < 1 || heads < 1) {
        throw std::invalid_argument("teacher config: sizes must be positive");
    }
    if (hidden % heads != 0) {
        throw std::invalid_argument("teacher config: hidden size " + std::to_string(hidden) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw std::invalid_argument("teacher config: dropout must lie in [0, 1)");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw std::invalid_argument("teacher config: label_smoothing must lie in [0, 1)");
    }
    if (max_steps < 0 || batch_size < 1) {
        throw std::invalid_argument("teacher config: max_steps >= 0 and batch_size >= 1 required");
    }
}

CheckpointHeader TeacherConfig::to_header() const {
    return {
        {"kind", "teacher"},
        {"vocab_size", std::to_string(vocab_size)},
        {"hidden", std::to_string(hidden)},
        {"feed_forward", std::to_string(feed_forward)},
        {"encoder_layers", std::to_string(encoder_layers)},
        {"decoder_layers", std::to_string(decoder_layers)},
        {"heads", std::to_string(heads)},
        {"dropout", format_double(dropout)},
        {"label_smoothing", format_double(label_smoothing)},
        {"max_steps", std::to_string(max_steps)},
        {"batch_size", std::to_string(batch_size)},
        {"peak_learning_rate", format_double(peak_learning_rate)},
        {"warmup_steps", std::to_string(warmup_steps)},
        {"length_penalty", format_double(length_penalty)},
        {"max_len_ratio", format_double(max_len_ratio)},
        {"max_len_extra", std::to_string(max_len_extra)},
    };
}

TeacherConfig TeacherConfig::from_header(const CheckpointHeader& h) {
    if (header_string(h, "kind") != "teacher") {
        throw std::runtime_error("checkpoint is a '" + header_string(h, "kind") +
                                 "' model, expected a teacher");
    }
    TeacherConfig c;
    c.vocab_size = header_int(h, "vocab_size");
    c.hidden = header_int(h, "hidden");
    c.feed_forward = header_int(h, "feed_forward");
    c.encoder_layers = header_int(h, "encoder_layers");
    c.decoder_layers = header_int(h, "decoder_layers");
    c.heads = header_int(h, "heads");
    c.dropout = header_double(h, "dropout");
    c.label_smoothing = header_double(h, "label_smoothing");
    c.max_steps = header_int(h, "max_steps");
    c.batch_size = header_int(h, "batch_size");
    c.peak_learning_rate = header_double(h, "peak_learning_rate");
    c.warmup_steps = header_int(h, "warmup_steps");
    c.length_penalty = header_double(h, "length_penalty");
    c.max_len_ratio = header_double(h, "max_len_ratio");
    c.max_len_extra = header_int(h, "max_len_extra");
    return c;
}

TeacherConfig TeacherConfig::paper_profile(int vocab_size) {
    TeacherConfig c;
    c.vocab_size = vocab_size;
    c.hidden = 512;
    c.feed_forward = 2048;
    c.encoder_layers = 6;
    c.decoder_layers = 6;
    c.heads = 8;
    c.dropout = 0.1;
    return c;
}

TeacherModel::TeacherModel(const TeacherConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config_.hidden)));
    Matrix emb(config_.vocab_size, config_.hidden);
    for (Eigen::Index i = 0; i < emb.size(); ++i) {
        emb.data()[i] = normal(rng);
    }
    embedding_ = &params_.add("embedding", std::move(emb));
    encoder_ = make_transformer_stack(params_, "encoder", config_.encoder_layers, config_.hidden,
                                      config_.feed_forward, config_.heads, false, rng);
    decoder_ = make_transformer_stack(params_, "decoder", config_.decoder_layers, config_.hidden,
                                      config_.feed_forward, config_.heads, true, rng);
    output_ = make_linear(params_, "output", config_.hidden, config_.vocab_size, rng);
}

void TeacherModel::check_ids(std::span<const int> ids) const {
    for (int id : ids) {
        if (id < 0 || id >= config_.vocab_size) {
            throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(config_.vocab_size));
        }
    }
}

int TeacherModel::max_decode_length(int source_length) const {
    return std::max(1, static_cast<int>(config_.max_len_ratio * source_length) + config_.max_len_extra);
}

Var TeacherModel::encode(Graph& g, std::span<const int> ids, const Packing& p,
                         const DropoutContext* drop) const {
    const double emb_scale = std::sqrt(static_cast<double>(config_.hidden));
    Var x = scale(embed(g.parameter(*embedding_), ids), emb_scale);
    x = dropout(add(x, g.constant(sinusoidal_positions(p, config_.hidden))), drop);
    return encoder_(g, x, self_attention_layout(p, false), nullptr, nullptr, drop);
}

Var TeacherModel::batch_log_likelihood(Graph& g, std::span<const SentencePair* const> batch,
                                       double smoothing, const DropoutContext* drop) const {
    std::vector<int> src_len;
    std::vector<int> tgt_len;
    TokenIds src_ids;
    TokenIds tgt_in;
    TokenIds tgt_out;
    for (const SentencePair* p : batch) {
        if (p->source.empty() || p->target.empty()) {
            throw std::invalid_argument("teacher: empty source or target");
        }
        check_ids(p->source);
        check_ids(p->target);
        src_len.push_back(static_cast<int>(p->source.size()));
        tgt_len.push_back(static_cast<int>(p->target.size()) + 1);
        src_ids.insert(src_ids.end(), p->source.begin(), p->source.end());
        tgt_in.push_back(kBosId);
        tgt_in.insert(tgt_in.end(), p->target.begin(), p->target.end());
        tgt_out.insert(tgt_out.end(), p->target.begin(), p->target.end());
        tgt_out.push_back(kEosId);
    }
    const Packing src = Packing::from_lengths(src_len);
    const Packing tgt = Packing::from_lengths(tgt_len);
    Var memory = encode(g, src_ids, src, drop);

    const double emb_scale = std::sqrt(static_cast<double>(config_.hidden));
    Var y = scale(embed(g.parameter(*embedding_), tgt_in), emb_scale);
    y = dropout(add(y, g.constant(sinusoidal_positions(tgt, config_.hidden))), drop);
    const AttentionLayout self = self_attention_layout(tgt, true);
    const AttentionLayout cross = cross_attention_layout(tgt, src);
    Var h = decoder_(g, y, self, &memory, &cross, drop);
    Var logp = log_softmax_rows(output_(g, h));
    return pick_log_prob(logp, tgt_out, smoothing);
}

Matrix TeacherModel::position_log_probs(std::span<const int> x, std::span<const int> y) const {
    if (x.empty()) {
        throw std::invalid_argument("teacher: empty source");
    }
    check_ids(x);
    check_ids(y);
    Graph g(false);
    const std::vector<int> src_len = {static_cast<int>(x.size())};
    const std::vector<int> tgt_len = {static_cast<int>(y.size()) + 1};
    const Packing src = Packing::from_lengths(src_len);
    const Packing tgt = Packing::from_lengths(tgt_len);
    Var memory = encode(g, x, src, nullptr);
    TokenIds tgt_in = {kBosId};
    tgt_in.insert(tgt_in.end(), y.begin(), y.end());
    const double emb_scale = std::sqrt(static_cast<double>(config_.hidden));
    Var e = scale(embed(g.parameter(*embedding_), tgt_in), emb_scale);
    e = add(e, g.constant(sinusoidal_positions(tgt, config_.hidden)));
    const AttentionLayout self = self_attention_layout(tgt, true);
    const AttentionLayout cross = cross_attention_layout(tgt, src);
    Var h = decoder_(g, e, self, &memory, &cross, nullptr);
    return log_softmax_rows(output_(g, h)).value();
}

TeacherModel::DecoderState TeacherModel::start(std::span<const int> x) const {
    if (x.empty()) {
        throw std::invalid_argument("teacher: empty source");
    }
    check_ids(x);
    Graph g(false);
    const std::vector<int> src_len = {static_cast<int>(x.size())};
    const Packing src = Packing::from_lengths(src_len);
    const Matrix memory = encode(g, x, src, nullptr).value();
    DecoderState st;
    st.source_length_ = static_cast<int>(x.size());
    for (const TransformerLayer& l : decoder_.layers) {
        st.cross_keys.push_back(l.cross_attention.key.apply(memory));
        st.cross_values.push_back(l.cross_attention.value.apply(memory));
        st.self_keys.emplace_back(0, config_.hidden);
        st.self_values.emplace_back(0, config_.hidden);
    }
    return st;
}

RowVector TeacherModel::step(DecoderState& st, int token) const {
    if (token < 0 || token >= config_.vocab_size) {
        throw std::out_of_range("token id " + std::to_string(token) + " outside vocabulary");
    }
    const double emb_scale = std::sqrt(static_cast<double>(config_.hidden));
    Matrix h = embedding_->value.row(token) * emb_scale;
    h.row(0) += sinusoidal_position(st.position_, config_.hidden);
    for (std::size_t i = 0; i < decoder_.layers.size(); ++i) {
        const TransformerLayer& l = decoder_.layers[i];
        const Matrix a = l.self_norm.apply(h);
        append_row(st.self_keys[i], l.self_attention.key.apply(a));
        append_row(st.self_values[i], l.self_attention.value.apply(a));
        h += l.self_attention.output.apply(attend_row(l.self_attention.query.apply(a),
                                                      st.self_keys[i], st.self_values[i],
                                                      l.self_attention.heads));
        const Matrix c = l.cross_norm.apply(h);
        h += l.cross_attention.output.apply(attend_row(l.cross_attention.query.apply(c),
                                                       st.cross_keys[i], st.cross_values[i],
                                                       l.cross_attention.heads));
        h += l.feed_forward.apply(l.ff_norm.apply(h));
    }
    ++st.position_;
    return log_softmax_row(output_.apply(decoder_.final_norm.apply(h)));
}

double teacher_log_prob(const TeacherModel& model, std::span<const int> x, std::span<const int> y) {
    if (y.empty()) {
        throw std::invalid_argument("teacher_log_prob: empty target");
    }
    const Matrix lp = model.position_log_probs(x, y);
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        total += lp(static_cast<Eigen::Index>(i), y[i]);
    }
    return total + lp(static_cast<Eigen::Index>(y.size()), kEosId);
}

TeacherModel train_teacher(std::span<const SentencePair> pairs, const TeacherConfig& config,
                           std::uint64_t seed, const TeacherLogger& log, int log_every) {
    if (pairs.empty()) {
        throw std::invalid_argument("train_teacher: empty corpus");
    }
    TeacherModel model(config, seed);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const DropoutContext drop{config.dropout, &rng};
    const WarmupSchedule schedule{config.peak_learning_rate, config.warmup_steps};
    Adam adam;

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    double window_loss = 0.0;
    int window_tokens = 0;
    for (int step = 1; step <= config.max_steps; ++step) {
        std::vector<const SentencePair*> batch;
        int tokens = 0;
        for (int b = 0; b < config.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const SentencePair* p = &pairs[order[cursor++]];
            batch.push_back(p);
            tokens += static_cast<int>(p->target.size()) + 1;
        }
        Graph g;
        Var ll = model.batch_log_likelihood(g, batch, config.label_smoothing, &drop);
        Var loss = scale(ll, -1.0 / tokens);
        if (!std::isfinite(loss.scalar())) {
            throw std::runtime_error("teacher training diverged at step " + std::to_string(step) +
                                     ": loss is " + std::to_string(loss.scalar()));
        }
        g.backward(loss);
        const double lr = schedule.rate(step);
        adam.step(model.params(), lr);
        window_loss += loss.scalar() * tokens;
        window_tokens += tokens;
        if (log && (step % log_every == 0 || step == config.max_steps)) {
            log({step, window_loss / window_tokens, lr});
            window_loss = 0.0;
            window_tokens = 0;
        }
    }
    return model;
}

Hypothesis greedy_decode(const TeacherModel& model, std::span<const int> x) {
    TeacherModel::DecoderState st = model.start(x);
    const int max_len = model.max_decode_length(static_cast<int>(x.size()));
    Hypothesis h;
    int token = kBosId;
    for (int t = 0; t <= max_len; ++t) {
        const RowVector lp = model.step(st, token);
        // Lowest id wins ties; reserved ids other than eos are never emitted.
        int best = kEosId;
        for (int v = kReservedCount; v < lp.cols(); ++v) {
            if (lp(v) > lp(best) || (lp(v) == lp(best) && v < best)) {
                best = v;
            }
        }
        if (best == kEosId) {
            h.decoder_score += lp(best);
            h.finished = true;
            return h;
        }
        if (t == max_len) {
            break;
        }
        h.decoder_score += lp(best);
        h.tokens.push_back(best);
        token = best;
    }
    return h;
}

Hypothesis beam_decode(const TeacherModel& model, std::span<const int> x, int beam_size,
                       int max_len) {
    if (beam_size < 1) {
        throw std::invalid_argument("beam_decode: beam_size must be >= 1");
    }
    if (max_len < 0) {
        max_len = model.max_decode_length(static_cast<int>(x.size()));
    }
    const double alpha = model.config().length_penalty;
    auto normalized = [alpha](const Hypothesis& h) {
        if (alpha == 0.0) {
            return h.decoder_score;
        }
        const double len = static_cast<double>(h.tokens.size() + 1);
        return h.decoder_score / std::pow((5.0 + len) / 6.0, alpha);
    };

    struct Live {
        Hypothesis hyp;
        TeacherModel::DecoderState state;
        int last = kBosId;
    };
    std::vector<Live> beam;
    beam.push_back({Hypothesis{}, model.start(x), kBosId});
    std::vector<Hypothesis> finished;

    for (int t = 0; t <= max_len && !beam.empty(); ++t) {
        struct Candidate {
            double score;
            std::size_t parent;
            int token;
        };
        std::vector<Candidate> cands;
        for (std::size_t b = 0; b < beam.size(); ++b) {
            const RowVector lp = model.step(beam[b].state, beam[b].last);
            cands.push_back({beam[b].hyp.decoder_score + lp(kEosId), b, kEosId});
            for (int v = kReservedCount; v < lp.cols(); ++v) {
                cands.push_back({beam[b].hyp.decoder_score + lp(v), b, v});
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) {
                return a.score > b.score;
            }
            if (a.parent != b.parent) {
                return a.parent < b.parent;
            }
            return a.token < b.token;
        });
        std::vector<Live> next;
        int slots = 0;
        for (const Candidate& c : cands) {
            if (slots >= beam_size) {
                break;
            }
            if (c.token == kEosId) {
                Hypothesis done = beam[c.parent].hyp;
                done.decoder_score = c.score;
                done.finished = true;
                finished.push_back(std::move(done));
                if (static_cast<int>(finished.size()) >= beam_size) {
                    break;
                }
                continue;
            }
            ++slots;
            Live l{beam[c.parent].hyp, beam[c.parent].state, c.token};
            l.hyp.tokens.push_back(c.token);
            l.hyp.decoder_score = c.score;
            next.push_back(std::move(l));
        }
        if (t == max_len) {
            // Extensions past max_len are not allowed.
            break;
        }
        beam = std::move(next);
        if (static_cast<int>(finished.size()) >= beam_size) {
            break;
        }
        // Raw log-probs only decrease, so live prefixes scoring below the best
        // finished hypothesis cannot overtake it.
        if (!finished.empty() && alpha == 0.0) {
            double best_done = -std::numeric_limits<double>::infinity();
            for (const Hypothesis& f : finished) {
                best_done = std::max(best_done, f.decoder_score);
            }
            std::erase_if(beam, [best_done](const Live& l) { return l.hyp.decoder_score <= best_done; });
        }
    }
    if (finished.empty()) {
        Hypothesis best = beam.empty() ? Hypothesis{} : beam.front().hyp;
        best.finished = false;
        return best;
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < finished.size(); ++i) {
        if (normalized(finished[i]) > normalized(finished[best])) {
            best = i;
        }
    }
    return finished[best];
}

DistillResult distill_corpus(const TeacherModel& model, std::span<const SentencePair> pairs,
                             int beam_size) {
    DistillResult out;
    out.pairs.reserve(pairs.size());
    for (const SentencePair& p : pairs) {
        Hypothesis h = beam_size == 1 ? greedy_decode(model, p.source)
                                      : beam_decode(model, p.source, beam_size);
        if (h.tokens.empty()) {
            ++out.dropped_empty;
            continue;
        }
        out.pairs.push_back({p.source, std::move(h.tokens)});
    }
    return out;
}

void save_teacher(const TeacherModel& model, const std::filesystem::path& path) {
    save_checkpoint(path, model.config().to_header(), model.params());
}

TeacherModel load_teacher(const std::filesystem::path& path) {
    const TeacherConfig config = TeacherConfig::from_header(read_checkpoint_header(path));
    TeacherModel model(config, 0);
    load_checkpoint(path, model.params());
    return model;
}

}  // namespace lanmt
