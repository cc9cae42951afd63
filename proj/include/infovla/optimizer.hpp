#pragma once

#include <map>
#include <string>
#include <vector>

#include "infovla/tensor.hpp"

namespace infovla {

// Adam over named parameter tensors. Gradients are read from the tensors'
// grad buffers and cleared by step(); parameters without a buffer count as
// zero-gradient. Non-finite gradients abort with NumericError.
class AdamOptimizer {
  public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8);

    void step(std::vector<std::pair<std::string, Tensor>>& params);
    void zero_grad(std::vector<std::pair<std::string, Tensor>>& params);
    int iterations() const { return t_; }

  private:
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    struct Moments {
        std::vector<double> m, v;
    };
    std::map<std::string, Moments> state_;
};

}  // namespace infovla
