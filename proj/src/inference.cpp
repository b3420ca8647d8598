#include "lanmt/inference.hpp"

#include "lanmt/objective.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lanmt {

namespace {

// One sentence (or search candidate) inside a packed refinement batch.
struct RefineItem {
    std::span<const int> source;
    Matrix start;
    const GaussianSequence* prior = nullptr;
    const SourceEncoding* encoding = nullptr;
};

template <typename Row>
int argmax_lowest(const Row& row) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < row.size(); ++i) {
        if (row(i) > row(best)) {
            best = i;
        }
    }
    return static_cast<int>(best);
}

// Length prediction and argmax decoding for the latents `mus[i]` of the
// items listed in `active`.
std::vector<DecodedTarget> decode_packed(const LatentModel& model,
                                         std::span<const RefineItem> items,
                                         std::span<const std::size_t> active,
                                         std::span<const Matrix> mus) {
    const int L = model.config().max_offset;
    std::vector<int> src_len;
    int rows = 0;
    for (std::size_t i : active) {
        src_len.push_back(items[i].encoding->length());
        rows += src_len.back();
    }
    const Packing src = Packing::from_lengths(src_len);
    Matrix z(rows, model.config().latent_dim);
    Matrix enc(rows, model.config().hidden);
    for (std::size_t a = 0; a < active.size(); ++a) {
        const RowSpan& s = src.spans[a];
        z.middleRows(s.start, s.length) = mus[active[a]];
        enc.middleRows(s.start, s.length) = items[active[a]].encoding->states;
    }

    Graph g(false);
    Var zv = g.constant(std::move(z));
    const Matrix length_lp = model.length_log_probs(g, zv, src).value();
    std::vector<DecodedTarget> out(active.size());
    std::vector<int> tgt_len;
    for (std::size_t a = 0; a < active.size(); ++a) {
        const int offset_class = argmax_lowest(length_lp.row(static_cast<Eigen::Index>(a)));
        out[a].length = std::max(1, src_len[a] + offset_class - L);
        out[a].length_log_prob = length_lp(static_cast<Eigen::Index>(a), offset_class);
        tgt_len.push_back(out[a].length);
    }
    const Packing tgt = Packing::from_lengths(tgt_len);
    Var transformed = model.transform(g, zv, src, tgt_len);
    const Matrix logp = model.decode(g, transformed, tgt, g.constant(std::move(enc)), src).value();
    for (std::size_t a = 0; a < active.size(); ++a) {
        const RowSpan& s = tgt.spans[a];
        for (int r = s.start; r < s.start + s.length; ++r) {
            const int token = argmax_lowest(logp.row(r));
            out[a].tokens.push_back(token);
            out[a].decoder_log_prob += logp(r, token);
        }
    }
    return out;
}

// Posterior means given the previous outputs of the active items.
std::vector<Matrix> posterior_means_packed(const LatentModel& model,
                                           std::span<const RefineItem> items,
                                           std::span<const std::size_t> active,
                                           std::span<const TokenIds> targets) {
    std::vector<int> src_len;
    std::vector<int> tgt_len;
    TokenIds src_ids;
    TokenIds tgt_ids;
    for (std::size_t i : active) {
        src_len.push_back(static_cast<int>(items[i].source.size()));
        src_ids.insert(src_ids.end(), items[i].source.begin(), items[i].source.end());
        tgt_len.push_back(static_cast<int>(targets[i].size()));
        tgt_ids.insert(tgt_ids.end(), targets[i].begin(), targets[i].end());
    }
    const Packing src = Packing::from_lengths(src_len);
    Graph g(false);
    const Matrix means =
        model.posterior(g, src_ids, src, tgt_ids, Packing::from_lengths(tgt_len)).mean.value();
    std::vector<Matrix> out;
    for (const RowSpan& s : src.spans) {
        out.emplace_back(means.middleRows(s.start, s.length));
    }
    return out;
}

std::vector<RefinementTrace> refine(const LatentModel& model, std::span<const RefineItem> items,
                                    int steps) {
    if (steps < 0) {
        throw std::invalid_argument("refinement steps must be >= 0");
    }
    std::vector<RefinementTrace> traces(items.size());
    std::vector<Matrix> mus;
    std::vector<TokenIds> last(items.size());
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < items.size(); ++i) {
        mus.push_back(items[i].start);
        active.push_back(i);
    }
    for (int t = 0; t <= steps && !active.empty(); ++t) {
        if (t > 0) {
            std::vector<Matrix> fitted = posterior_means_packed(model, items, active, last);
            for (std::size_t a = 0; a < active.size(); ++a) {
                mus[active[a]] = std::move(fitted[a]);
            }
        }
        const std::vector<DecodedTarget> decoded = decode_packed(model, items, active, mus);
        std::vector<std::size_t> still_active;
        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t i = active[a];
            RefinementStep step;
            step.mu = mus[i];
            step.length = decoded[a].length;
            step.tokens = decoded[a].tokens;
            step.decoder_log_prob = decoded[a].decoder_log_prob;
            step.length_log_prob = decoded[a].length_log_prob;
            step.prior_log_density = gaussian_log_density(*items[i].prior, mus[i]);
            const bool repeated = t > 0 && step.tokens == last[i];
            last[i] = step.tokens;
            traces[i].steps.push_back(std::move(step));
            if (repeated) {
                traces[i].converged = true;
            } else {
                still_active.push_back(i);
            }
        }
        active = std::move(still_active);
    }
    return traces;
}

void check_source(std::span<const int> x) {
    if (x.empty()) {
        throw std::invalid_argument("inference: empty source sentence");
    }
}

}  // namespace

DeltaPosterior init_delta(const LatentModel& model, std::span<const int> x) {
    check_source(x);
    return {LatentSequence{prior_encode(model, x).first.means}};
}

DecodedTarget argmax_decode(const LatentModel& model, const LatentSequence& mu,
                            const SourceEncoding& encoding) {
    if (mu.length() != encoding.length() || mu.length() < 1) {
        throw std::invalid_argument("argmax_decode: latent length " + std::to_string(mu.length()) +
                                    " does not match source length " +
                                    std::to_string(encoding.length()));
    }
    const RefineItem item{{}, {}, nullptr, &encoding};
    const std::size_t index = 0;
    return decode_packed(model, std::span(&item, 1), std::span(&index, 1),
                         std::span(&mu.vectors, 1))
        .front();
}

DeltaPosterior fit_delta(const LatentModel& model, std::span<const int> x,
                         std::span<const int> y_prev) {
    check_source(x);
    if (y_prev.empty()) {
        throw std::invalid_argument("fit_delta: empty previous output");
    }
    return {LatentSequence{posterior_encode(model, x, y_prev).means}};
}

double gaussian_log_density(const GaussianSequence& g, const Matrix& point) {
    if (point.rows() != g.means.rows() || point.cols() != g.means.cols()) {
        throw std::invalid_argument("gaussian_log_density: shape mismatch");
    }
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    const Matrix standardized = (point - g.means).cwiseQuotient(g.stds);
    return -0.5 * standardized.squaredNorm() - g.stds.array().log().sum() -
           half_log_2pi * static_cast<double>(point.size());
}

InferenceResult deterministic_inference(const LatentModel& model, std::span<const int> x,
                                        int steps) {
    check_source(x);
    const auto [prior, encoding] = prior_encode(model, x);
    const RefineItem item{x, prior.means, &prior, &encoding};
    RefinementTrace trace = std::move(refine(model, std::span(&item, 1), steps).front());
    TokenIds tokens = trace.steps.back().tokens;
    return {std::move(tokens), std::move(trace)};
}

std::vector<InferenceResult> translate_batch(const LatentModel& model,
                                             std::span<const TokenIds> sources, int steps,
                                             int batch_size) {
    if (batch_size < 1) {
        throw std::invalid_argument("translate_batch: batch_size must be >= 1");
    }
    std::vector<InferenceResult> results;
    results.reserve(sources.size());
    for (std::size_t begin = 0; begin < sources.size();
         begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(sources.size(), begin + static_cast<std::size_t>(batch_size));
        std::vector<int> lengths;
        TokenIds ids;
        for (std::size_t i = begin; i < end; ++i) {
            check_source(sources[i]);
            lengths.push_back(static_cast<int>(sources[i].size()));
            ids.insert(ids.end(), sources[i].begin(), sources[i].end());
        }
        const Packing src = Packing::from_lengths(lengths);
        std::vector<GaussianSequence> priors;
        std::vector<SourceEncoding> encodings;
        {
            Graph g(false);
            const PriorVars p = model.prior(g, ids, src);
            for (const RowSpan& s : src.spans) {
                priors.push_back({p.gaussian.mean.value().middleRows(s.start, s.length),
                                  p.gaussian.std.value().middleRows(s.start, s.length)});
                encodings.push_back({p.encoding.value().middleRows(s.start, s.length)});
            }
        }
        std::vector<RefineItem> items;
        for (std::size_t i = begin; i < end; ++i) {
            const std::size_t k = i - begin;
            items.push_back({sources[i], priors[k].means, &priors[k], &encodings[k]});
        }
        for (RefinementTrace& trace : refine(model, items, steps)) {
            TokenIds tokens = trace.steps.back().tokens;
            results.push_back({std::move(tokens), std::move(trace)});
        }
    }
    return results;
}

SearchResult latent_search(const LatentModel& model, const TeacherModel& teacher,
                           std::span<const int> x, int candidates, double temperature, int steps,
                           std::uint64_t seed) {
    check_source(x);
    if (candidates < 1) {
        throw std::invalid_argument("latent_search: need at least one candidate");
    }
    if (!(temperature >= 0.0)) {
        throw std::invalid_argument("latent_search: temperature must be >= 0");
    }
    const auto [prior, encoding] = prior_encode(model, x);
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<RefineItem> items;
    for (int n = 0; n < candidates; ++n) {
        Matrix start = prior.means;
        if (n > 0) {
            Matrix noise(start.rows(), start.cols());
            for (Eigen::Index k = 0; k < noise.size(); ++k) {
                noise.data()[k] = normal(rng);
            }
            start += temperature * prior.stds.cwiseProduct(noise);
        }
        items.push_back({x, std::move(start), &prior, &encoding});
    }
    const std::vector<RefinementTrace> traces = refine(model, items, steps);

    SearchResult result;
    for (std::size_t n = 0; n < traces.size(); ++n) {
        SearchCandidate c;
        c.tokens = traces[n].steps.back().tokens;
        for (std::size_t m = 0; m < n; ++m) {
            if (result.candidates[m].duplicate_of < 0 && result.candidates[m].tokens == c.tokens) {
                c.duplicate_of = static_cast<int>(m);
                c.teacher_score = result.candidates[m].teacher_score;
                break;
            }
        }
        if (c.duplicate_of < 0) {
            c.teacher_score = teacher_log_prob(teacher, x, c.tokens);
            if (result.candidates.empty() ||
                c.teacher_score > result.candidates[static_cast<std::size_t>(result.chosen)].teacher_score) {
                result.chosen = static_cast<int>(n);
            }
        }
        result.candidates.push_back(std::move(c));
    }
    result.tokens = result.candidates[static_cast<std::size_t>(result.chosen)].tokens;
    return result;
}

void attach_elbo(const LatentModel& model, std::span<const int> x, RefinementTrace& trace,
                 int samples, std::uint64_t seed) {
    for (RefinementStep& step : trace.steps) {
        step.elbo = monte_carlo_elbo(model, x, step.tokens, samples, seed);
    }
}

}  // namespace lanmt
