#pragma once

#include "lanmt/nn.hpp"

#include <map>
#include <string>

namespace lanmt {

// Inverse-square-root schedule with linear warmup, the usual Transformer
// annealing: peak * min(step / warmup, sqrt(warmup / step)).
struct WarmupSchedule {
    double peak_rate = 1e-3;
    int warmup_steps = 200;

    [[nodiscard]] double rate(int step) const;
};

class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9, double clip_norm = 1.0)
        : beta1_(beta1), beta2_(beta2), eps_(eps), clip_norm_(clip_norm) {}

    // Applies one update using each parameter's accumulated grad, then clears
    // the grads. Returns the pre-clipping global gradient norm.
    double step(ParamStore& store, double learning_rate);

    [[nodiscard]] int steps_taken() const { return t_; }

private:
    struct Moments {
        Matrix m;
        Matrix v;
    };
    double beta1_;
    double beta2_;
    double eps_;
    double clip_norm_;
    int t_ = 0;
    std::map<std::string, Moments> moments_;
};

}  // namespace lanmt
