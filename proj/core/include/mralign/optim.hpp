#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mralign/tensor.hpp"

namespace mralign {

struct AdamHyper {
    float lr = 5e-5f;
    float beta1 = 0.9f;
    float beta2 = 0.98f;
    float eps = 1e-8f;
    float weight_decay = 0.02f;
};

// per-parameter moment state
struct OptState {
    int64_t step = 0;
    std::vector<float> m, v;
};

// AdamW with decoupled weight decay: the decay term scales the raw parameter
// and never enters the moment estimates. A missing grad counts as zero.
inline void adamw_step(Tensor& param, OptState& st, const AdamHyper& h) {
    size_t n = static_cast<size_t>(param.numel());
    if (st.m.empty()) {
        st.m.assign(n, 0.0f);
        st.v.assign(n, 0.0f);
    }
    if (st.m.size() != n)
        throw std::invalid_argument("adamw_step: state size " + std::to_string(st.m.size()) +
                                    " does not match param " + shape_str(param.shape()));
    ++st.step;
    double bc1 = 1.0 - std::pow(static_cast<double>(h.beta1), static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(static_cast<double>(h.beta2), static_cast<double>(st.step));

    auto p = param.mutable_data();
    auto g = param.grad();
    for (size_t i = 0; i < n; ++i) {
        double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
        double mi = h.beta1 * st.m[i] + (1.0 - h.beta1) * gi;
        double vi = h.beta2 * st.v[i] + (1.0 - h.beta2) * gi * gi;
        st.m[i] = static_cast<float>(mi);
        st.v[i] = static_cast<float>(vi);
        double mhat = mi / bc1;
        double vhat = vi / bc2;
        double upd = mhat / (std::sqrt(vhat) + h.eps);
        p[i] = static_cast<float>(p[i] - h.lr * upd - h.lr * h.weight_decay * p[i]);
    }
}

} // namespace mralign
