#ifndef MINDIFF_METRICS_HPP
#define MINDIFF_METRICS_HPP

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

namespace mindiff {

// Default SSIM stabilizers for dynamic range L = 1.
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

// Pearson correlation over two flat vectors. Throws std::invalid_argument on
// length mismatch, length < 2, or zero variance (message names which input).
torch::Tensor pcc(const torch::Tensor& x, const torch::Tensor& y);

// Global-statistics SSIM between two images of identical shape [C,H,W] (or
// [H,W]): one mean/std/covariance per channel, channel-averaged. Differentiable.
torch::Tensor ssim_global(const torch::Tensor& a, const torch::Tensor& b,
                          double c1 = kSsimC1, double c2 = kSsimC2);

// Windowed variant (uniform window, stride = window), exposed behind a flag in
// evaluation configs; the global form is the default everywhere.
torch::Tensor ssim_windowed(const torch::Tensor& a, const torch::Tensor& b,
                            int64_t window = 8, double c1 = kSsimC1, double c2 = kSsimC2);

// Scores images [B,3,H,W] -> class scores [B,K]. Deterministic in eval mode.
using ClassifierFn = std::function<torch::Tensor(const torch::Tensor&)>;

// n-way top-1 accuracy: per sample and trial, restrict scores to the correct
// class plus n-1 distinct random wrong classes; success iff argmax is the
// correct class (ties broken by lowest class index). Returns the mean over
// samples x trials.
double n_way_accuracy(const torch::Tensor& scores, const torch::Tensor& classes,
                      int64_t n, int64_t trials, std::mt19937_64& rng);

struct SampleRecord {
    int64_t index = 0;
    int64_t class_id = 0;
    uint64_t seed = 0;
    double acc = 0.0;
    double pcc = 0.0;
    double ssim = 0.0;
};

struct MetricsReport {
    double acc_n_way = 0.0;
    int64_t n = 0;
    int64_t trials = 0;
    double pcc = 0.0;
    double ssim = 0.0;
    std::vector<SampleRecord> per_sample;
    nlohmann::json run_meta;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
};

}  // namespace mindiff

#endif
