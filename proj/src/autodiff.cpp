#include "lanmt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace lanmt {

namespace {

void require(bool ok, const char* what) {
    if (!ok) {
        throw std::invalid_argument(what);
    }
}

void require_same_shape(Var a, Var b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()) + ")");
    }
}

double stable_softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Row-wise softmax in place.
void softmax_rows_inplace(Eigen::Ref<Matrix> m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp();
        m.row(r) /= m.row(r).sum();
    }
}

}  // namespace

const Matrix& Var::value() const { return graph->value(id); }

Var Graph::constant(Matrix value) {
    Node n;
    n.own = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(Parameter& p) {
    Node n;
    n.view = &p.value;
    if (tracking_) {
        n.needs_grad = true;
        Parameter* target = &p;
        n.backward = [target](const Matrix& g) {
            if (target->grad.size() == 0) {
                target->grad = Matrix::Zero(target->value.rows(), target->value.cols());
            }
            target->grad += g;
        };
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
}

Var Graph::record(Matrix value, std::span<const Var> inputs, Backward backward) {
    Node n;
    n.own = std::move(value);
    if (tracking_) {
        for (const Var& v : inputs) {
            if (nodes_[v.id].needs_grad) {
                n.needs_grad = true;
                break;
            }
        }
        if (n.needs_grad) {
            n.backward = std::move(backward);
        }
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::value(int id) const { return nodes_[id].value(); }

void Graph::accumulate(int id, const Eigen::Ref<const Matrix>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) {
        return;
    }
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

void Graph::accumulate_rows(int id, int row0, const Eigen::Ref<const Matrix>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) {
        return;
    }
    if (n.grad.size() == 0) {
        n.grad = Matrix::Zero(n.value().rows(), n.value().cols());
    }
    n.grad.middleRows(row0, g.rows()) += g;
}

void Graph::backward(Var root) {
    require(tracking_, "backward: graph was built without gradient tracking");
    require(root.rows() == 1 && root.cols() == 1, "backward: root must be 1x1");
    Node& r = nodes_[root.id];
    if (!r.needs_grad) {
        return;
    }
    r.grad = Matrix::Ones(1, 1);
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.needs_grad || n.grad.size() == 0 || !n.backward) {
            continue;
        }
        Matrix g = std::move(n.grad);
        n.backward(g);
        n.grad.resize(0, 0);
    }
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Graph& g = *a.graph;
    Matrix out = a.value() * b.value();
    return g.record(std::move(out), {a, b}, [&g, a, b](const Matrix& up) {
        if (g.needs_grad(a.id)) {
            g.accumulate(a.id, up * b.value().transpose());
        }
        if (g.needs_grad(b.id)) {
            g.accumulate(b.id, a.value().transpose() * up);
        }
    });
}

Var affine(Var x, Var weight, Var bias) {
    require(x.cols() == weight.rows(), "affine: input width differs from weight rows");
    require(bias.rows() == 1 && bias.cols() == weight.cols(), "affine: bias shape");
    Graph& g = *x.graph;
    Matrix out = x.value() * weight.value();
    out.rowwise() += bias.value().row(0);
    return g.record(std::move(out), {x, weight, bias}, [&g, x, weight, bias](const Matrix& up) {
        if (g.needs_grad(x.id)) {
            g.accumulate(x.id, up * weight.value().transpose());
        }
        if (g.needs_grad(weight.id)) {
            g.accumulate(weight.id, x.value().transpose() * up);
        }
        if (g.needs_grad(bias.id)) {
            g.accumulate(bias.id, up.colwise().sum());
        }
    });
}

Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    Graph& g = *a.graph;
    Matrix out = a.value() + b.value();
    return g.record(std::move(out), {a, b}, [&g, a, b](const Matrix& up) {
        g.accumulate(a.id, up);
        g.accumulate(b.id, up);
    });
}

Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    Graph& g = *a.graph;
    Matrix out = a.value() - b.value();
    return g.record(std::move(out), {a, b}, [&g, a, b](const Matrix& up) {
        g.accumulate(a.id, up);
        if (g.needs_grad(b.id)) {
            g.accumulate(b.id, -up);
        }
    });
}

Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    Graph& g = *a.graph;
    Matrix out = a.value().cwiseProduct(b.value());
    return g.record(std::move(out), {a, b}, [&g, a, b](const Matrix& up) {
        if (g.needs_grad(a.id)) {
            g.accumulate(a.id, up.cwiseProduct(b.value()));
        }
        if (g.needs_grad(b.id)) {
            g.accumulate(b.id, up.cwiseProduct(a.value()));
        }
    });
}

Var scale(Var a, double factor) {
    Graph& g = *a.graph;
    Matrix out = a.value() * factor;
    return g.record(std::move(out), {a},
                    [&g, a, factor](const Matrix& up) { g.accumulate(a.id, up * factor); });
}

Var add_row(Var a, Var row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape");
    Graph& g = *a.graph;
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return g.record(std::move(out), {a, row}, [&g, a, row](const Matrix& up) {
        g.accumulate(a.id, up);
        if (g.needs_grad(row.id)) {
            g.accumulate(row.id, up.colwise().sum());
        }
    });
}

Var relu(Var a) {
    Graph& g = *a.graph;
    Matrix out = a.value().cwiseMax(0.0);
    return g.record(std::move(out), {a}, [&g, a](const Matrix& up) {
        g.accumulate(a.id, (a.value().array() > 0.0).select(up, 0.0));
    });
}

Var softplus(Var a) {
    Graph& g = *a.graph;
    Matrix out = a.value().unaryExpr(&stable_softplus);
    return g.record(std::move(out), {a}, [&g, a](const Matrix& up) {
        g.accumulate(a.id, up.cwiseProduct(a.value().unaryExpr(&sigmoid)));
    });
}

Var clamp_min(Var a, double floor) {
    Graph& g = *a.graph;
    Matrix out = a.value().cwiseMax(floor);
    return g.record(std::move(out), {a}, [&g, a, floor](const Matrix& up) {
        g.accumulate(a.id, (a.value().array() > floor).select(up, 0.0));
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    require(gain.rows() == 1 && gain.cols() == x.cols(), "layer_norm: gain shape");
    require(bias.rows() == 1 && bias.cols() == x.cols(), "layer_norm: bias shape");
    Graph& g = *x.graph;
    const Matrix& xv = x.value();
    const Eigen::Index n = xv.rows();
    const double width = static_cast<double>(xv.cols());
    Matrix normed(n, xv.cols());
    Eigen::VectorXd inv_std(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = xv.row(r).mean();
        const double var = (xv.row(r).array() - mean).square().sum() / width;
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        normed.row(r) = (xv.row(r).array() - mean) * inv_std(r);
    }
    Matrix out = normed.array().rowwise() * gain.value().row(0).array();
    out.rowwise() += bias.value().row(0);
    return g.record(
        std::move(out), {x, gain, bias},
        [&g, x, gain, bias, normed = std::move(normed), inv_std = std::move(inv_std),
         width](const Matrix& up) {
            if (g.needs_grad(gain.id)) {
                g.accumulate(gain.id, up.cwiseProduct(normed).colwise().sum());
            }
            if (g.needs_grad(bias.id)) {
                g.accumulate(bias.id, up.colwise().sum());
            }
            if (g.needs_grad(x.id)) {
                Matrix dnorm = up.array().rowwise() * gain.value().row(0).array();
                Matrix dx(dnorm.rows(), dnorm.cols());
                for (Eigen::Index r = 0; r < dnorm.rows(); ++r) {
                    const double m1 = dnorm.row(r).sum() / width;
                    const double m2 = dnorm.row(r).dot(normed.row(r)) / width;
                    dx.row(r) = (dnorm.row(r).array() - m1 - normed.row(r).array() * m2) *
                                inv_std(r);
                }
                g.accumulate(x.id, dx);
            }
        });
}

Var log_softmax_rows(Var x) {
    Graph& g = *x.graph;
    const Matrix& xv = x.value();
    Matrix out(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const double mx = xv.row(r).maxCoeff();
        const double lse = mx + std::log((xv.row(r).array() - mx).exp().sum());
        out.row(r) = xv.row(r).array() - lse;
    }
    Matrix probs;
    if (g.tracking() && g.needs_grad(x.id)) {
        probs = out.array().exp();
    }
    return g.record(std::move(out), {x}, [&g, x, probs = std::move(probs)](const Matrix& up) {
        Matrix dx = up;
        for (Eigen::Index r = 0; r < up.rows(); ++r) {
            dx.row(r) -= probs.row(r) * up.row(r).sum();
        }
        g.accumulate(x.id, dx);
    });
}

Var embed(Var table, std::span<const int> ids) {
    Graph& g = *table.graph;
    const Matrix& tv = table.value();
    Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows()) {
            throw std::invalid_argument("embed: id " + std::to_string(ids[i]) +
                                        " outside table of " + std::to_string(tv.rows()));
        }
        out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
    }
    std::vector<int> copy(ids.begin(), ids.end());
    return g.record(std::move(out), {table}, [&g, table, copy = std::move(copy)](const Matrix& up) {
        Matrix dt = Matrix::Zero(table.rows(), table.cols());
        for (std::size_t i = 0; i < copy.size(); ++i) {
            dt.row(copy[i]) += up.row(static_cast<Eigen::Index>(i));
        }
        g.accumulate(table.id, dt);
    });
}

Var slice_rows(Var a, int start, int length) {
    require(start >= 0 && length >= 0 && start + length <= a.rows(), "slice_rows: out of range");
    Graph& g = *a.graph;
    Matrix out = a.value().middleRows(start, length);
    return g.record(std::move(out), {a}, [&g, a, start](const Matrix& up) {
        g.accumulate_rows(a.id, start, up);
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    Graph& g = *parts.front().graph;
    Eigen::Index total = 0;
    const Eigen::Index width = parts.front().cols();
    for (const Var& p : parts) {
        require(p.cols() == width, "concat_rows: column mismatch");
        total += p.rows();
    }
    Matrix out(total, width);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    std::vector<Var> copy(parts.begin(), parts.end());
    return g.record(std::move(out), parts, [&g, copy = std::move(copy)](const Matrix& up) {
        Eigen::Index row = 0;
        for (const Var& p : copy) {
            if (g.needs_grad(p.id)) {
                g.accumulate(p.id, up.middleRows(row, p.rows()));
            }
            row += p.rows();
        }
    });
}

Var sum(Var a) {
    Graph& g = *a.graph;
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return g.record(std::move(out), {a}, [&g, a](const Matrix& up) {
        g.accumulate(a.id, Matrix::Constant(a.rows(), a.cols(), up(0, 0)));
    });
}

Var row_sum(Var a) {
    Graph& g = *a.graph;
    Matrix out = a.value().rowwise().sum();
    return g.record(std::move(out), {a}, [&g, a](const Matrix& up) {
        Matrix d(a.rows(), a.cols());
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            d.row(r).setConstant(up(r, 0));
        }
        g.accumulate(a.id, d);
    });
}

Var pool_rows(Var a, std::span<const RowSpan> spans, bool average) {
    Graph& g = *a.graph;
    Matrix out(static_cast<Eigen::Index>(spans.size()), a.cols());
    for (std::size_t i = 0; i < spans.size(); ++i) {
        const RowSpan s = spans[i];
        require(s.length >= 1 && s.start + s.length <= a.rows(), "pool_rows: bad span");
        out.row(static_cast<Eigen::Index>(i)) = a.value().middleRows(s.start, s.length).colwise().sum();
        if (average) {
            out.row(static_cast<Eigen::Index>(i)) /= static_cast<double>(s.length);
        }
    }
    std::vector<RowSpan> copy(spans.begin(), spans.end());
    return g.record(std::move(out), {a}, [&g, a, copy = std::move(copy), average](const Matrix& up) {
        Matrix d = Matrix::Zero(a.rows(), a.cols());
        for (std::size_t i = 0; i < copy.size(); ++i) {
            const RowSpan s = copy[i];
            const double w = average ? 1.0 / static_cast<double>(s.length) : 1.0;
            for (int r = 0; r < s.length; ++r) {
                d.row(s.start + r) += up.row(static_cast<Eigen::Index>(i)) * w;
            }
        }
        g.accumulate(a.id, d);
    });
}

Var pick_log_prob(Var log_probs, std::span<const int> targets, double smoothing) {
    require(static_cast<Eigen::Index>(targets.size()) == log_probs.rows(),
            "pick_log_prob: one target per row required");
    Graph& g = *log_probs.graph;
    const Matrix& lp = log_probs.value();
    const double width = static_cast<double>(lp.cols());
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        require(targets[i] >= 0 && targets[i] < lp.cols(), "pick_log_prob: target out of range");
        total += (1.0 - smoothing) * lp(r, targets[i]);
        if (smoothing > 0.0) {
            total += smoothing * lp.row(r).sum() / width;
        }
    }
    Matrix out(1, 1);
    out(0, 0) = total;
    std::vector<int> copy(targets.begin(), targets.end());
    return g.record(std::move(out), {log_probs},
                    [&g, log_probs, copy = std::move(copy), smoothing, width](const Matrix& up) {
                        Matrix d = Matrix::Constant(log_probs.rows(), log_probs.cols(),
                                                    smoothing > 0.0 ? up(0, 0) * smoothing / width : 0.0);
                        for (std::size_t i = 0; i < copy.size(); ++i) {
                            d(static_cast<Eigen::Index>(i), copy[i]) += up(0, 0) * (1.0 - smoothing);
                        }
                        g.accumulate(log_probs.id, d);
                    });
}

Var attention(Var q, Var k, Var v, int heads, const AttentionLayout& layout) {
    require(heads >= 1 && q.cols() % heads == 0, "attention: width not divisible by heads");
    require(q.cols() == k.cols() && k.cols() == v.cols() && k.rows() == v.rows(),
            "attention: q/k/v widths differ");
    require(layout.queries.size() == layout.keys.size(), "attention: span lists differ in size");
    Graph& g = *q.graph;
    const int hd = static_cast<int>(q.cols()) / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();

    Matrix out = Matrix::Zero(qv.rows(), qv.cols());
    // Attention probabilities per (span, head), kept for the backward pass.
    std::vector<Matrix> probs;
    probs.reserve(layout.queries.size() * static_cast<std::size_t>(heads));
    for (std::size_t s = 0; s < layout.queries.size(); ++s) {
        const RowSpan qs = layout.queries[s];
        const RowSpan ks = layout.keys[s];
        require(ks.length >= 1 && qs.start + qs.length <= qv.rows() &&
                    ks.start + ks.length <= kv.rows(),
                "attention: span out of range");
        for (int h = 0; h < heads; ++h) {
            auto qh = qv.block(qs.start, h * hd, qs.length, hd);
            auto kh = kv.block(ks.start, h * hd, ks.length, hd);
            auto vh = vv.block(ks.start, h * hd, ks.length, hd);
            Matrix scores = (qh * kh.transpose()) * inv_sqrt;
            if (layout.causal) {
                for (int i = 0; i < qs.length; ++i) {
                    for (int j = i + 1; j < ks.length; ++j) {
                        scores(i, j) = -std::numeric_limits<double>::infinity();
                    }
                }
            }
            softmax_rows_inplace(scores);
            out.block(qs.start, h * hd, qs.length, hd) = scores * vh;
            probs.push_back(std::move(scores));
        }
    }
    return g.record(
        std::move(out), {q, k, v},
        [&g, q, k, v, heads, hd, inv_sqrt, layout, probs = std::move(probs)](const Matrix& up) {
            Matrix dq = Matrix::Zero(q.rows(), q.cols());
            Matrix dk = Matrix::Zero(k.rows(), k.cols());
            Matrix dv = Matrix::Zero(v.rows(), v.cols());
            const Matrix& qv = q.value();
            const Matrix& kv = k.value();
            const Matrix& vv = v.value();
            std::size_t idx = 0;
            for (std::size_t s = 0; s < layout.queries.size(); ++s) {
                const RowSpan qs = layout.queries[s];
                const RowSpan ks = layout.keys[s];
                for (int h = 0; h < heads; ++h, ++idx) {
                    const Matrix& p = probs[idx];
                    auto dout = up.block(qs.start, h * hd, qs.length, hd);
                    auto qh = qv.block(qs.start, h * hd, qs.length, hd);
                    auto kh = kv.block(ks.start, h * hd, ks.length, hd);
                    auto vh = vv.block(ks.start, h * hd, ks.length, hd);
                    dv.block(ks.start, h * hd, ks.length, hd) += p.transpose() * dout;
                    Matrix dp = dout * vh.transpose();
                    Matrix ds = p.cwiseProduct(dp);
                    const Eigen::VectorXd rs = ds.rowwise().sum();
                    ds -= p.cwiseProduct(rs.replicate(1, p.cols()));
                    ds *= inv_sqrt;
                    dq.block(qs.start, h * hd, qs.length, hd) += ds * kh;
                    dk.block(ks.start, h * hd, ks.length, hd) += ds.transpose() * qh;
                }
            }
            g.accumulate(q.id, dq);
            g.accumulate(k.id, dk);
            g.accumulate(v.id, dv);
        });
}

Var gaussian_kl_rows(Var mean_q, Var std_q, Var mean_p, Var std_p) {
    require_same_shape(mean_q, std_q, "gaussian_kl_rows");
    require_same_shape(mean_q, mean_p, "gaussian_kl_rows");
    require_same_shape(mean_q, std_p, "gaussian_kl_rows");
    if ((std_q.value().array() <= 0.0).any() || (std_p.value().array() <= 0.0).any()) {
        throw std::invalid_argument("gaussian_kl_rows: standard deviations must be positive");
    }
    Graph& g = *mean_q.graph;
    const auto mq = mean_q.value().array();
    const auto sq = std_q.value().array();
    const auto mp = mean_p.value().array();
    const auto sp = std_p.value().array();
    const Eigen::ArrayXXd diff = mq - mp;
    const Eigen::ArrayXXd elem =
        (sp / sq).log() + (sq.square() + diff.square()) / (2.0 * sp.square()) - 0.5;
    Matrix out = elem.matrix().rowwise().sum();
    return g.record(std::move(out), {mean_q, std_q, mean_p, std_p},
                    [&g, mean_q, std_q, mean_p, std_p](const Matrix& up) {
                        const auto mq = mean_q.value().array();
                        const auto sq = std_q.value().array();
                        const auto mp = mean_p.value().array();
                        const auto sp = std_p.value().array();
                        const Eigen::ArrayXXd u = up.replicate(1, mean_q.cols()).array();
                        const Eigen::ArrayXXd diff = mq - mp;
                        const Eigen::ArrayXXd var_p = sp.square();
                        if (g.needs_grad(mean_q.id)) {
                            g.accumulate(mean_q.id, (u * diff / var_p).matrix());
                        }
                        if (g.needs_grad(mean_p.id)) {
                            g.accumulate(mean_p.id, (-u * diff / var_p).matrix());
                        }
                        if (g.needs_grad(std_q.id)) {
                            g.accumulate(std_q.id, (u * (sq / var_p - 1.0 / sq)).matrix());
                        }
                        if (g.needs_grad(std_p.id)) {
                            g.accumulate(std_p.id,
                                         (u * (1.0 / sp - (sq.square() + diff.square()) /
                                                              (var_p * sp)))
                                             .matrix());
                        }
                    });
}

Matrix length_transform_weights(int source_length, int target_length, double sigma) {
    if (source_length < 1 || target_length < 1) {
        throw std::invalid_argument("length_transform: lengths must be >= 1");
    }
    if (!(sigma > 0.0)) {
        throw std::invalid_argument("length_transform: sigma must be positive");
    }
    const double ratio = static_cast<double>(source_length) / static_cast<double>(target_length);
    const double coef = 1.0 / (2.0 * sigma * sigma);
    Matrix w(target_length, source_length);
    for (int j = 1; j <= target_length; ++j) {
        for (int k = 1; k <= source_length; ++k) {
            const double d = static_cast<double>(k) - ratio * static_cast<double>(j);
            w(j - 1, k - 1) = -coef * d * d;
        }
    }
    softmax_rows_inplace(w);
    return w;
}

Var length_transform(Var latents, Var sigma, std::span<const RowSpan> spans,
                     std::span<const int> target_lengths) {
    require(sigma.rows() == 1 && sigma.cols() == 1, "length_transform: sigma must be 1x1");
    require(spans.size() == target_lengths.size(), "length_transform: one length per span");
    Graph& g = *latents.graph;
    const double s = sigma.scalar();
    const Matrix& z = latents.value();
    Eigen::Index total = 0;
    for (int l : target_lengths) {
        total += l;
    }
    Matrix out(total, z.cols());
    std::vector<Matrix> weights;
    weights.reserve(spans.size());
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        const RowSpan sp = spans[i];
        require(sp.start + sp.length <= z.rows(), "length_transform: span out of range");
        Matrix w = length_transform_weights(sp.length, target_lengths[i], s);
        out.middleRows(row, target_lengths[i]) = w * z.middleRows(sp.start, sp.length);
        row += target_lengths[i];
        weights.push_back(std::move(w));
    }
    std::vector<RowSpan> span_copy(spans.begin(), spans.end());
    std::vector<int> len_copy(target_lengths.begin(), target_lengths.end());
    return g.record(
        std::move(out), {latents, sigma},
        [&g, latents, sigma, span_copy = std::move(span_copy), len_copy = std::move(len_copy),
         weights = std::move(weights)](const Matrix& up) {
            const Matrix& z = latents.value();
            const double s = sigma.scalar();
            Matrix dz = Matrix::Zero(z.rows(), z.cols());
            double dsigma = 0.0;
            Eigen::Index row = 0;
            for (std::size_t i = 0; i < span_copy.size(); ++i) {
                const RowSpan sp = span_copy[i];
                const int l = len_copy[i];
                const Matrix& w = weights[i];
                auto dout = up.middleRows(row, l);
                auto zi = z.middleRows(sp.start, sp.length);
                dz.middleRows(sp.start, sp.length) += w.transpose() * dout;
                if (g.needs_grad(sigma.id)) {
                    Matrix gw = dout * zi.transpose();
                    const double ratio = static_cast<double>(sp.length) / static_cast<double>(l);
                    for (int j = 0; j < l; ++j) {
                        const double inner = w.row(j).dot(gw.row(j));
                        for (int k = 0; k < sp.length; ++k) {
                            const double d = static_cast<double>(k + 1) - ratio * static_cast<double>(j + 1);
                            const double da = w(j, k) * (gw(j, k) - inner);
                            dsigma += da * d * d / (s * s * s);
                        }
                    }
                }
                row += l;
            }
            g.accumulate(latents.id, dz);
            if (g.needs_grad(sigma.id)) {
                Matrix ds(1, 1);
                ds(0, 0) = dsigma;
                g.accumulate(sigma.id, ds);
            }
        });
}

}  // namespace lanmt
