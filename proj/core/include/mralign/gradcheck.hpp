#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mralign/rng.hpp"
#include "mralign/tensor.hpp"

namespace mralign {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
    std::string worst; // "<leaf index>:<flat element>" of the worst entry
};

// Central-difference check of d(loss)/d(leaf) for every given leaf.
//
// `build_loss` must construct a fresh scalar graph from the leaves' current
// values each call. Error metric per element: |g - fd| / max(1, |g|, |fd|).
// Large leaves can be subsampled (deterministically) via max_per_tensor.
inline GradCheckResult check_gradients(const std::function<Tensor()>& build_loss,
                                       const std::vector<Tensor>& leaves,
                                       double eps = 1e-3,
                                       int64_t max_per_tensor = -1,
                                       uint64_t sample_seed = 0x5eedULL) {
    for (const Tensor& t : leaves) t.impl()->grad.clear();
    Tensor loss = build_loss();
    backward(loss);

    std::vector<std::vector<float>> analytic;
    analytic.reserve(leaves.size());
    for (const Tensor& t : leaves) {
        if (t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(t.numel(), 0.0f);
    }

    GradCheckResult res;
    NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        int64_t n = leaf.numel();
        std::vector<int64_t> idx;
        if (max_per_tensor > 0 && n > max_per_tensor) {
            // deterministic subsample without replacement
            Rng rng(Rng::mix(sample_seed, li));
            std::vector<int64_t> all(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            rng.shuffle(all);
            idx.assign(all.begin(), all.begin() + static_cast<long>(max_per_tensor));
        } else {
            idx.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        }

        auto data = leaf.mutable_data();
        for (int64_t i : idx) {
            float keep = data[static_cast<size_t>(i)];
            data[static_cast<size_t>(i)] = static_cast<float>(keep + eps);
            double lp = build_loss().item();
            data[static_cast<size_t>(i)] = static_cast<float>(keep - eps);
            double lm = build_loss().item();
            data[static_cast<size_t>(i)] = keep;

            double fd = (lp - lm) / (2.0 * eps);
            double g = analytic[li][static_cast<size_t>(i)];
            double rel = std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)});
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = std::to_string(li) + ":" + std::to_string(i);
            }
        }
    }
    return res;
}

} // namespace mralign
