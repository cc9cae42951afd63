#include "infovla/optimizer.hpp"

#include <cmath>

#include "infovla/errors.hpp"

namespace infovla {

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw DomainError("AdamOptimizer: learning rate must be positive");
}

void AdamOptimizer::step(std::vector<std::pair<std::string, Tensor>>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& [name, tensor] : params) {
        Moments& mom = state_[name];
        const size_t n = static_cast<size_t>(tensor.numel());
        if (mom.m.size() != n) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
        }
        const bool has_grad = tensor.has_grad();
        if (has_grad) {
            const auto& g = tensor.grad();
            for (double x : g) {
                if (!std::isfinite(x)) {
                    throw NumericError("optimizer_step: non-finite gradient in '" + name + "'");
                }
            }
        }
        auto& data = tensor.mutable_data();
        for (size_t i = 0; i < n; ++i) {
            const double g = has_grad ? tensor.grad()[i] : 0.0;
            mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g;
            mom.v[i] = beta2_ * mom.v[i] + (1.0 - beta2_) * g * g;
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            if (!std::isfinite(data[i])) {
                throw NumericError("optimizer_step: non-finite parameter in '" + name + "'");
            }
        }
        tensor.zero_grad();
    }
}

void AdamOptimizer::zero_grad(std::vector<std::pair<std::string, Tensor>>& params) {
    for (auto& [name, tensor] : params) tensor.zero_grad();
}

}  // namespace infovla
