#pragma once

// Test-side central finite-difference oracle. Kept independent of the
// library's own gradcheck module: it re-runs the caller's forward closure and
// never touches the reverse-mode path it is checking.

#include <cmath>
#include <functional>
#include <vector>

#include "infovla/tensor.hpp"

namespace fd {

struct Result {
    double max_rel_err = 0.0;
    int checked = 0;
};

// forward() must rebuild the graph from the current leaf data and return the
// scalar loss. Coordinates with |analytic| < 1e-8 are skipped. The derivative
// estimate is the 5-point central stencil at step h, so the oracle's own
// truncation error stays far below the 1e-4 pass threshold.
inline Result max_rel_grad_error(const std::function<infovla::Tensor()>& forward,
                                 std::vector<infovla::Tensor> leaves, double h = 1e-4) {
    using infovla::Tensor;
    for (Tensor& l : leaves) l.zero_grad();
    Tensor loss = forward();
    infovla::backward(loss);

    // double-precision resolution of the stencil at this loss magnitude;
    // agreement below it counts as exact
    const double noise_floor = 1e-11 * (1.0 + std::abs(loss.value()));

    Result res;
    for (Tensor& leaf : leaves) {
        if (!leaf.has_grad()) continue;
        std::vector<double> analytic = leaf.grad();
        auto& x = leaf.mutable_data();
        for (size_t i = 0; i < x.size(); ++i) {
            if (std::abs(analytic[i]) < 1e-8) continue;
            const double orig = x[i];
            auto eval = [&](double delta) {
                x[i] = orig + delta;
                return forward().value();
            };
            const double numeric =
                (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
            x[i] = orig;
            ++res.checked;
            const double diff = std::abs(analytic[i] - numeric);
            if (diff <= noise_floor) continue;
            const double denom = std::max(std::abs(analytic[i]), std::abs(numeric));
            res.max_rel_err = std::max(res.max_rel_err, diff / denom);
        }
    }
    return res;
}

}  // namespace fd
