#ifndef MINDIFF_TEST_UTIL_HPP
#define MINDIFF_TEST_UTIL_HPP

#include <torch/torch.h>

#include <functional>
#include <random>

namespace mindiff::testing {

// Central finite differences against backprop for a scalar loss. Checks
// `n_slices` randomly chosen coordinates of `param` and returns the max
// relative error. The loss closure must be re-evaluable.
inline double grad_check(const std::function<torch::Tensor()>& loss_fn, torch::Tensor param,
                         int64_t n_slices, double step, std::mt19937_64& rng) {
    if (param.grad().defined()) param.mutable_grad().zero_();
    auto loss = loss_fn();
    loss.backward();
    auto grad = param.grad().detach().clone().flatten();
    auto flat = param.detach().view({-1});
    std::uniform_int_distribution<int64_t> pick(0, flat.numel() - 1);
    double max_rel = 0.0;
    for (int64_t s = 0; s < n_slices; ++s) {
        int64_t i = pick(rng);
        double orig = flat[i].item<double>();
        {
            torch::NoGradGuard ng;
            flat[i] = orig + step;
        }
        double up = loss_fn().item<double>();
        {
            torch::NoGradGuard ng;
            flat[i] = orig - step;
        }
        double down = loss_fn().item<double>();
        {
            torch::NoGradGuard ng;
            flat[i] = orig;
        }
        double fd = (up - down) / (2.0 * step);
        double bp = grad[i].item<double>();
        double denom = std::max(1e-8, std::abs(fd) + std::abs(bp));
        max_rel = std::max(max_rel, std::abs(fd - bp) / denom);
    }
    return max_rel;
}

}  // namespace mindiff::testing

#endif
