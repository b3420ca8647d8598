#pragma once

// Tape-based reverse-mode automatic differentiation over row-major Eigen
// matrices. Rows index sequence positions, columns index features. Several
// sentences are packed into one matrix as contiguous row spans; attention and
// pooling ops take explicit span lists so sentences never see each other.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lanmt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// A trainable tensor. Owned by a ParamStore; graphs hold non-owning pointers.
struct Parameter {
    Matrix value;
    Matrix grad;
};

// Contiguous rows [start, start + length) belonging to one sentence.
struct RowSpan {
    int start = 0;
    int length = 0;
};

class Graph;

// Handle to a node on a Graph.
struct Var {
    Graph* graph = nullptr;
    int id = -1;

    [[nodiscard]] const Matrix& value() const;
    [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
    [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
    [[nodiscard]] double scalar() const { return value()(0, 0); }
};

class Graph {
public:
    using Backward = std::function<void(const Matrix& upstream)>;

    // With track_gradients=false no backward closures are recorded and
    // backward() is unavailable; used for inference.
    explicit Graph(bool track_gradients = true) : tracking_(track_gradients) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    [[nodiscard]] bool tracking() const { return tracking_; }

    Var constant(Matrix value);
    // Leaf that reads the parameter in place and accumulates into its grad.
    Var parameter(Parameter& p);

    // Adds a computed node. `inputs` decide whether the node needs a gradient.
    Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);
    Var record(Matrix value, std::span<const Var> inputs, Backward backward);

    [[nodiscard]] const Matrix& value(int id) const;
    [[nodiscard]] bool needs_grad(int id) const { return nodes_[id].needs_grad; }

    // Adds `g` into the gradient buffer of node `id` (allocating it lazily).
    void accumulate(int id, const Eigen::Ref<const Matrix>& g);
    // Adds `g` into rows [row0, row0 + g.rows()) of node `id`'s gradient.
    void accumulate_rows(int id, int row0, const Eigen::Ref<const Matrix>& g);

    // Seeds d(root)/d(root) = 1 for a 1x1 root and runs the tape backwards.
    void backward(Var root);

    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix own;
        const Matrix* view = nullptr;
        Matrix grad;
        bool needs_grad = false;
        Backward backward;
        [[nodiscard]] const Matrix& value() const { return view ? *view : own; }
    };

    bool tracking_;
    std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Shapes are checked and violations throw
// std::invalid_argument.

Var matmul(Var a, Var b);
// x * W + b with b broadcast over rows.
Var affine(Var x, Var weight, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// Adds a constant row vector (1 x cols) to every row.
Var add_row(Var a, Var row);

Var relu(Var a);
Var softplus(Var a);
// max(a, floor) elementwise; gradient passes only where a > floor.
Var clamp_min(Var a, double floor);

// Row-wise layer normalisation with learned gain and bias (1 x cols each).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var log_softmax_rows(Var x);

// Row gather from an embedding table.
Var embed(Var table, std::span<const int> ids);

Var slice_rows(Var a, int start, int length);
Var concat_rows(std::span<const Var> parts);

// Sum of all entries (1 x 1).
Var sum(Var a);
// Sum over columns per row (rows x 1).
Var row_sum(Var a);
// One averaged (or summed) row per span (spans.size() x cols).
Var pool_rows(Var a, std::span<const RowSpan> spans, bool average);

// sum_i logp(i, targets[i]); with smoothing eps the per-row term becomes
// (1 - eps) * logp(i, t_i) + eps * mean_j logp(i, j).
Var pick_log_prob(Var log_probs, std::span<const int> targets, double smoothing = 0.0);

// Multi-head scaled dot-product attention over packed sequences. q/k/v are
// already projected (rows x hidden). Span i of `queries` attends to span i of
// `keys`; with `causal` query position t sees key positions <= t.
struct AttentionLayout {
    std::vector<RowSpan> queries;
    std::vector<RowSpan> keys;
    bool causal = false;
};
Var attention(Var q, Var k, Var v, int heads, const AttentionLayout& layout);

// Per-row KL(N(mq, sq^2) || N(mp, sp^2)) summed over columns (rows x 1).
Var gaussian_kl_rows(Var mean_q, Var std_q, Var mean_p, Var std_p);

// Monotonic location attention: each span of `latents` (|x| x D) is resampled
// to target_lengths[i] rows, row j (1-based) being
// softmax_k(-(k - |x|/l * j)^2 / (2 s^2)) . z with s = sigma(0,0).
Var length_transform(Var latents, Var sigma, std::span<const RowSpan> spans,
                     std::span<const int> target_lengths);

// Weight matrix used by length_transform for a single sentence; exposed for
// tests and inference.
Matrix length_transform_weights(int source_length, int target_length, double sigma);

}  // namespace lanmt
