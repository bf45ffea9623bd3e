#ifndef MINDIFF_SCHEDULE_HPP
#define MINDIFF_SCHEDULE_HPP

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace mindiff {

enum class ScheduleKind { Linear, Cosine };

ScheduleKind schedule_kind_from_string(const std::string& s);

// Variance schedule for the forward/reverse chains. Timesteps are 1-based;
// gamma(0) == 1 by convention, which makes sigma(1) == 0.
class NoiseSchedule {
public:
    NoiseSchedule(int64_t timesteps, ScheduleKind kind);

    int64_t timesteps() const { return static_cast<int64_t>(betas_.size()); }
    ScheduleKind kind() const { return kind_; }

    double beta(int64_t t) const { return betas_.at(check(t) - 1); }
    double gamma(int64_t t) const { return t == 0 ? 1.0 : gammas_.at(check(t) - 1); }
    double sigma(int64_t t) const { return sigmas_.at(check(t) - 1); }

    uint64_t hash() const;

private:
    int64_t check(int64_t t) const;

    ScheduleKind kind_;
    std::vector<double> betas_;
    std::vector<double> gammas_;  // cumulative products of (1 - beta)
    std::vector<double> sigmas_;  // sigma_t^2 = (1-gamma_{t-1})/(1-gamma_t) * beta_t
};

// z_t = sqrt(gamma_t) z0 + sqrt(1-gamma_t) eps; eps is caller-supplied.
torch::Tensor q_sample(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);

// One forward step: z_t = sqrt(1-beta_t) z_prev + sqrt(beta_t) noise.
torch::Tensor q_step(const torch::Tensor& z_prev, int64_t t, torch::Generator& gen,
                     const NoiseSchedule& schedule);

// Posterior mean from an eps-prediction:
//   mu = (z_t - beta_t/sqrt(1-gamma_t) * eps_pred) / sqrt(1-beta_t)
torch::Tensor posterior_mean(const torch::Tensor& z_t, const torch::Tensor& eps_pred,
                             int64_t t, const NoiseSchedule& schedule);

// One reverse step given an eps-prediction; adds sigma_t noise for t > 1.
torch::Tensor p_step_from_eps(const torch::Tensor& z_t, const torch::Tensor& eps_pred,
                              int64_t t, torch::Generator& gen, const NoiseSchedule& schedule);

}  // namespace mindiff

#endif
