#pragma once

// Central-finite-difference verification of analytic gradients. Runs in
// 64-bit mode only; finite differences are unreliable in 32-bit.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "emonext/tensor.hpp"

namespace emonext {

using GradCheckFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct GradCheckOptions {
    double eps = 1e-4;
    // When set, probe only this many coordinates per input tensor (chosen
    // evenly); full elementwise sweep otherwise. Large composed models are
    // checked on a coordinate subsample.
    int64_t max_coords_per_input = 0;
    // When set, probe the coordinates with the largest analytic gradient
    // magnitude instead. Central differences lose accuracy on near-zero
    // gradients (the truncation error is absolute, not relative), so deep
    // compositions are checked where the signal dominates the FD noise.
    int64_t probe_top_k = 0;
    // Harness-sensitivity hook: added to every analytic gradient before
    // comparison. Nonzero values must make the check fail.
    double corrupt_bias = 0.0;
};

// Returns max relative error between analytic and numeric gradients with
// denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const GradCheckFn& f, std::vector<Tensor<double>> inputs,
                         const GradCheckOptions& opts = {}) {
    for (auto& t : inputs) t.set_requires_grad(true);

    Tensor<double> loss = f(inputs);
    if (loss.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
    for (auto& t : inputs) t.zero_grad();
    loss.backward();

    double max_rel = 0;
    for (auto& t : inputs) {
        const std::vector<double> analytic = t.grad();
        int64_t n = t.numel();
        std::vector<int64_t> coords;
        if (opts.probe_top_k > 0 && n > opts.probe_top_k) {
            coords.resize(static_cast<size_t>(n));
            std::iota(coords.begin(), coords.end(), int64_t{0});
            std::partial_sort(coords.begin(), coords.begin() + opts.probe_top_k, coords.end(),
                              [&](int64_t l, int64_t r) {
                                  return std::fabs(analytic[static_cast<size_t>(l)]) >
                                         std::fabs(analytic[static_cast<size_t>(r)]);
                              });
            coords.resize(static_cast<size_t>(opts.probe_top_k));
        } else {
            int64_t step = 1;
            if (opts.max_coords_per_input > 0 && n > opts.max_coords_per_input)
                step = n / opts.max_coords_per_input;
            for (int64_t i = 0; i < n; i += step) coords.push_back(i);
        }
        for (int64_t i : coords) {
            NoGradGuard no_tape;
            double saved = t.data()[static_cast<size_t>(i)];
            t.data()[static_cast<size_t>(i)] = saved + opts.eps;
            double fp = f(inputs).item();
            t.data()[static_cast<size_t>(i)] = saved - opts.eps;
            double fm = f(inputs).item();
            t.data()[static_cast<size_t>(i)] = saved;
            double numeric = (fp - fm) / (2.0 * opts.eps);
            double a = analytic[static_cast<size_t>(i)] + opts.corrupt_bias;
            double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace emonext
