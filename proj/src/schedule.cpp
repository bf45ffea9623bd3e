#include "mindiff/schedule.hpp"

#include <cmath>
#include <stdexcept>

#include "mindiff/tensor_io.hpp"

namespace mindiff {

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

NoiseSchedule::NoiseSchedule(int64_t timesteps, ScheduleKind kind) : kind_(kind) {
    if (timesteps < 1)
        throw std::invalid_argument("NoiseSchedule: timesteps must be >= 1");
    betas_.resize(timesteps);
    if (kind == ScheduleKind::Linear) {
        const double lo = 1e-4, hi = 2e-2;
        for (int64_t t = 0; t < timesteps; ++t)
            betas_[t] = timesteps == 1 ? lo : lo + (hi - lo) * double(t) / double(timesteps - 1);
    } else {
        // cosine cumulative schedule [nichol2021improved]
        const double s = 0.008;
        auto f = [&](double t) {
            double v = std::cos((t / double(timesteps) + s) / (1.0 + s) * M_PI / 2.0);
            return v * v;
        };
        double prev = 1.0;
        for (int64_t t = 1; t <= timesteps; ++t) {
            double g = f(double(t)) / f(0.0);
            double beta = 1.0 - g / prev;
            betas_[t - 1] = std::min(std::max(beta, 1e-8), 0.999);
            prev = g;
        }
    }
    gammas_.resize(timesteps);
    sigmas_.resize(timesteps);
    double acc = 1.0;
    for (int64_t t = 0; t < timesteps; ++t) {
        acc *= 1.0 - betas_[t];
        gammas_[t] = acc;
        double gamma_prev = t == 0 ? 1.0 : gammas_[t - 1];
        double var = (1.0 - gamma_prev) / (1.0 - gammas_[t]) * betas_[t];
        sigmas_[t] = std::sqrt(std::max(var, 0.0));
    }
    for (int64_t t = 0; t < timesteps; ++t) {
        double gamma_prev = t == 0 ? 1.0 : gammas_[t - 1];
        if (!(betas_[t] > 0.0 && betas_[t] < 1.0))
            throw std::invalid_argument("NoiseSchedule: beta outside (0,1)");
        if (!(gammas_[t] > 0.0 && gammas_[t] < gamma_prev))
            throw std::invalid_argument("NoiseSchedule: gamma not strictly decreasing in (0,1]");
    }
}

int64_t NoiseSchedule::check(int64_t t) const {
    if (t < 1 || t > timesteps())
        throw std::domain_error("NoiseSchedule: timestep out of range [1,T]");
    return t;
}

uint64_t NoiseSchedule::hash() const {
    auto b = torch::tensor(betas_, torch::kFloat64);
    return tensor_checksum(b) ^ (kind_ == ScheduleKind::Cosine ? 0x1ull : 0x0ull);
}

torch::Tensor q_sample(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
    double g = schedule.gamma(t);
    return std::sqrt(g) * z0 + std::sqrt(1.0 - g) * eps;
}

torch::Tensor q_step(const torch::Tensor& z_prev, int64_t t, torch::Generator& gen,
                     const NoiseSchedule& schedule) {
    double b = schedule.beta(t);
    auto noise = torch::randn(z_prev.sizes(), gen, z_prev.options());
    return std::sqrt(1.0 - b) * z_prev + std::sqrt(b) * noise;
}

torch::Tensor posterior_mean(const torch::Tensor& z_t, const torch::Tensor& eps_pred,
                             int64_t t, const NoiseSchedule& schedule) {
    double b = schedule.beta(t);
    double g = schedule.gamma(t);
    return (z_t - b / std::sqrt(1.0 - g) * eps_pred) / std::sqrt(1.0 - b);
}

torch::Tensor p_step_from_eps(const torch::Tensor& z_t, const torch::Tensor& eps_pred,
                              int64_t t, torch::Generator& gen, const NoiseSchedule& schedule) {
    if (t < 1) throw std::domain_error("p_step: t must be >= 1");
    auto mu = posterior_mean(z_t, eps_pred, t, schedule);
    double s = schedule.sigma(t);
    if (s == 0.0) return mu;
    auto noise = torch::randn(z_t.sizes(), gen, z_t.options());
    return mu + s * noise;
}

}  // namespace mindiff
