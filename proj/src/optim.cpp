#include "lanmt/optim.hpp"

#include <algorithm>
#include <cmath>

namespace lanmt {

double WarmupSchedule::rate(int step) const {
    const double s = std::max(1, step);
    const double w = std::max(1, warmup_steps);
    return peak_rate * std::min(s / w, std::sqrt(w / s));
}

double Adam::step(ParamStore& store, double learning_rate) {
    double sq = 0.0;
    for (auto& [name, p] : store) {
        if (p->grad.size() != 0) {
            sq += p->grad.squaredNorm();
        }
    }
    const double norm = std::sqrt(sq);
    const double clip = (clip_norm_ > 0.0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;

    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (auto& [name, p] : store) {
        if (p->grad.size() == 0) {
            continue;
        }
        auto [it, fresh] = moments_.try_emplace(name);
        Moments& mo = it->second;
        if (fresh) {
            mo.m = Matrix::Zero(p->value.rows(), p->value.cols());
            mo.v = Matrix::Zero(p->value.rows(), p->value.cols());
        }
        const Matrix g = p->grad * clip;
        mo.m = beta1_ * mo.m + (1.0 - beta1_) * g;
        mo.v = beta2_ * mo.v + (1.0 - beta2_) * g.cwiseAbs2();
        p->value.array() -= learning_rate * (mo.m.array() / c1) /
                            ((mo.v.array() / c2).sqrt() + eps_);
        p->grad.resize(0, 0);
    }
    return norm;
}

}  // namespace lanmt
