#pragma once

#include "lanmt/autodiff.hpp"
#include "lanmt/model.hpp"
#include "lanmt/nn.hpp"
#include "lanmt/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace lanmt::testing {

inline LatentModelConfig tiny_latent_config(int vocab_size) {
    LatentModelConfig c;
    c.vocab_size = vocab_size;
    c.latent_dim = 4;
    c.hidden = 8;
    c.feed_forward = 16;
    c.prior_layers = 1;
    c.decoder_layers = 1;
    c.posterior_layers = 1;
    c.heads = 2;
    return c;
}

inline TeacherConfig tiny_teacher_config(int vocab_size) {
    TeacherConfig c;
    c.vocab_size = vocab_size;
    c.hidden = 8;
    c.feed_forward = 16;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.heads = 2;
    return c;
}

inline TokenIds random_ids(Rng& rng, int length, int vocab_size) {
    std::uniform_int_distribution<int> pick(kReservedCount, vocab_size - 1);
    TokenIds ids(static_cast<std::size_t>(length));
    for (int& id : ids) {
        id = pick(rng);
    }
    return ids;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = normal(rng);
    }
    return m;
}

struct GradientCheck {
    double max_relative_error = 0;
    int checked = 0;
};

// Compares analytic gradients of the scalar `loss` with central differences
// at `samples` random entries drawn across `params`. The relative error
// denominator is max(|analytic|, |numeric|, floor).
inline GradientCheck check_gradients(const std::function<Var(Graph&)>& loss,
                                     const std::vector<Parameter*>& params, int samples,
                                     std::uint64_t seed, double step = 1e-5,
                                     double floor = 1e-6) {
    for (Parameter* p : params) {
        p->grad = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    {
        Graph g;
        g.backward(loss(g));
    }
    std::vector<std::pair<Parameter*, Eigen::Index>> entries;
    for (Parameter* p : params) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            entries.emplace_back(p, i);
        }
    }
    Rng rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(std::min<std::size_t>(entries.size(), static_cast<std::size_t>(samples)));

    auto evaluate = [&] {
        Graph g(false);
        return loss(g).scalar();
    };
    GradientCheck result;
    for (auto [p, i] : entries) {
        double& x = p->value.data()[i];
        const double saved = x;
        x = saved + step;
        const double up = evaluate();
        x = saved - step;
        const double down = evaluate();
        x = saved;
        const double numeric = (up - down) / (2 * step);
        const double analytic = p->grad.data()[i];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
        result.max_relative_error =
            std::max(result.max_relative_error, std::abs(numeric - analytic) / denom);
        ++result.checked;
    }
    return result;
}

inline std::vector<Parameter*> all_parameters(ParamStore& store) {
    std::vector<Parameter*> out;
    for (auto& [name, p] : store) {
        out.push_back(p.get());
    }
    return out;
}

// Attention key biases shift every logit of a query row equally, so the
// softmax ignores them and their true gradient is exactly zero.
inline bool is_key_bias(const std::string& name) {
    return name.ends_with("/key/bias");
}

inline std::vector<Parameter*> parameters_where(ParamStore& store, bool key_bias) {
    std::vector<Parameter*> out;
    for (auto& [name, p] : store) {
        if (is_key_bias(name) == key_bias) {
            out.push_back(p.get());
        }
    }
    return out;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    const std::filesystem::path dir = std::filesystem::temp_directory_path() / ("lanmt_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace lanmt::testing
