#ifndef MINDIFF_EVALUATE_HPP
#define MINDIFF_EVALUATE_HPP

#include <torch/torch.h>

#include <functional>

#include "json.hpp"
#include "mindiff/control.hpp"
#include "mindiff/diffusion.hpp"
#include "mindiff/fmri_encoder.hpp"
#include "mindiff/metrics.hpp"
#include "mindiff/silhouette.hpp"

namespace mindiff {

// Generates one [3,S,S] image for a signal [N] under a per-sample seed.
using GenerateFn = std::function<torch::Tensor(const torch::Tensor& signal, uint64_t seed)>;

struct PipelineHandles {
    FmriEncoder encoder{nullptr};
    Denoiser net{nullptr};
    ImageAutoencoder ae{nullptr};
    SilhouetteDecoder sil_decoder{nullptr};  // optional: control needs it
    ControlModel control{nullptr};           // optional: null = uncontrolled
    int64_t steps = 50;
};

// The full signal -> image path: E_fmri tokens as context, optionally the
// silhouette + control branch, then the strided sampling chain.
GenerateFn make_pipeline_generator(PipelineHandles h, NoiseSchedule sched);

struct EvalConfig {
    int64_t n_way = 5;
    int64_t trials = 100;
    uint64_t seed = 0;
    nlohmann::json run_meta;  // copied into the report
};

// Per-sample generation with persisted seeds (mix_seed(cfg.seed, index)),
// grayscale-flattened PCC, global SSIM, and per-sample n-way accuracy.
// Aggregates are exact means of the per-sample records.
MetricsReport evaluate(const GenerateFn& gen, const torch::Tensor& signals,
                       const torch::Tensor& images, const torch::Tensor& classes,
                       const ClassifierFn& classifier, const EvalConfig& cfg);

struct ConsistencyRecord {
    int64_t index = 0;
    double mean_pairwise_ssim = 0.0;
    double label_agreement = 0.0;  // fraction of sample pairs with equal labels
};

struct ConsistencyReport {
    int64_t samples_per_signal = 0;
    bool singleton = false;  // S = 1: dispersion undefined
    double mean_ssim = 0.0;
    double mean_agreement = 0.0;
    std::vector<ConsistencyRecord> per_signal;
    nlohmann::json run_meta;

    nlohmann::json to_json() const;
};

// S samples per signal (seeds mix_seed(seed, index * S + rep)); reports mean
// pairwise SSIM and classifier-label agreement per signal.
ConsistencyReport consistency(const GenerateFn& gen, const torch::Tensor& signals,
                              const ClassifierFn& classifier, int64_t samples_per_signal,
                              uint64_t seed);

}  // namespace mindiff

#endif
