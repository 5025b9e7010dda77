#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmcl/errors.hpp"
#include "mmcl/tensor.hpp"

namespace mmcl {

// AdamW with decoupled weight decay. Moment buffers are created lazily and
// only for trainable parameters.
template <typename T>
struct OptimizerStateT {
    double learning_rate = 1e-4;
    double weight_decay = 1e-2;
    double adam_epsilon = 1e-8;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::int64_t step_count = 0;

    struct Moments {
        std::vector<T> m;
        std::vector<T> v;
    };
    std::unordered_map<std::string, Moments> moments;
};

using OptimizerState = OptimizerStateT<float>;

// One update over all trainable parameters with populated gradients. Frozen
// parameters are untouched bit-for-bit. Gradients of updated parameters are
// cleared (emptied) afterwards.
template <typename T>
void adamw_step(std::vector<ParameterT<T>*>& params, OptimizerStateT<T>& state) {
    for (auto* p : params) {
        if (!p->trainable) continue;
        if (p->tensor.grad.size() != p->tensor.data.size())
            throw OptimizerError("adamw_step: missing gradient for " + p->name);
    }
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    for (auto* p : params) {
        if (!p->trainable) continue;
        auto& mom = state.moments[p->name];
        if (mom.m.size() != p->tensor.data.size()) {
            mom.m.assign(p->tensor.data.size(), T(0));
            mom.v.assign(p->tensor.data.size(), T(0));
        }
        T* w = p->tensor.data.data();
        const T* g = p->tensor.grad.data();
        for (std::size_t i = 0; i < p->tensor.data.size(); ++i) {
            mom.m[i] = static_cast<T>(state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i]);
            mom.v[i] =
                static_cast<T>(state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i]);
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            const double upd = mhat / (std::sqrt(vhat) + state.adam_epsilon) +
                               state.weight_decay * w[i];
            w[i] = static_cast<T>(w[i] - state.learning_rate * upd);
        }
        p->tensor.grad.clear();
    }
}

}  // namespace mmcl
