#ifndef MINDIFF_CONTROL_HPP
#define MINDIFF_CONTROL_HPP

#include <torch/torch.h>

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "mindiff/diffusion.hpp"

namespace mindiff {

// 1x1 convolution with weight and bias exactly zero at init.
class ZeroConvImpl : public torch::nn::Module {
public:
    ZeroConvImpl(int64_t ch_in, int64_t ch_out);
    torch::Tensor forward(const torch::Tensor& x) { return conv(x); }

private:
    torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(ZeroConv);

// Maps a raw signal [B,N] to the latent spatial shape.
class ResidualModuleImpl : public torch::nn::Module {
public:
    ResidualModuleImpl(int64_t n_voxels, const DenoiserConfig& cfg);
    torch::Tensor forward(const torch::Tensor& signals);

private:
    int64_t channels_, size_;
    torch::nn::Linear fc{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ResidualModule);

struct ConditionBundle {
    torch::Tensor context;     // semantic tokens [B,M,d]
    torch::Tensor sil_latent;  // silhouette through the frozen image encoder [B,C,s,s]
    torch::Tensor fmri;        // raw signal [B,N] (may be undefined when F_res is off)
};

// Trainable clone of the denoiser's encoder half with zero-conv taps, the
// silhouette/residual injection path, and its own time embedding.
class ControlModelImpl : public torch::nn::Module {
public:
    ControlModelImpl(const DenoiserConfig& cfg, int64_t n_voxels, bool use_fres);

    // Copies encoder-half and time-MLP weights from the (finetuned) base;
    // asserts the structural mirror.
    void init_from(Denoiser& base);

    // Multi-scale features x_{c,t}, one per decoder resolution, each through
    // its own zero conv. Throws std::domain_error on missing bundle members.
    std::vector<torch::Tensor> combined_condition(const torch::Tensor& z_t,
                                                  const torch::Tensor& t,
                                                  const ConditionBundle& bundle);

    // z_t + Z(sil_latent [+ Z(F_res(fmri))]): the injected input of F_control.
    torch::Tensor injected_input(const torch::Tensor& z_t, const ConditionBundle& bundle);

    bool use_fres() const { return use_fres_; }
    void set_use_fres(bool on) { use_fres_ = on; }
    int64_t n_voxels() const { return n_voxels_; }
    const DenoiserConfig& config() const { return cfg_; }

private:
    DenoiserConfig cfg_;
    int64_t n_voxels_;
    bool use_fres_;
    DenoiserEncoder f_control{nullptr};
    torch::nn::Linear time_mlp1{nullptr}, time_mlp2{nullptr};
    ZeroConv zero_sil{nullptr}, zero_res{nullptr};
    ZeroConv tap1{nullptr}, tap2{nullptr}, tap_mid{nullptr};
    ResidualModule f_res{nullptr};
};
TORCH_MODULE(ControlModel);

// Silhouette image through the frozen autoencoder to latent resolution.
torch::Tensor encode_silhouette_to_latent(ImageAutoencoder& ae, const torch::Tensor& silhouette);

// Hook plugging the control model into sample_latent / sample_images.
ControlHook make_control_hook(ControlModel model, ConditionBundle bundle);

// eps-prediction of the frozen base with the control features added.
torch::Tensor controlled_denoise(Denoiser& base, ControlModel& control, const torch::Tensor& z_t,
                                 const torch::Tensor& t, const ConditionBundle& bundle);

// ||eps - eps_theta(q_sample(z0,t,eps), t, context, x_{c,t})||^2.
torch::Tensor control_loss(Denoiser& base, ControlModel& control, const NoiseSchedule& sched,
                           const torch::Tensor& z0, const torch::Tensor& t,
                           const ConditionBundle& bundle, const torch::Tensor& eps);

struct ControlTrainConfig {
    int64_t epochs = 100;
    double lr = 1e-4;
    int64_t batch_size = 16;
    uint64_t seed = 0;
    bool use_fres = true;
};

struct ControlTrainResult {
    ControlModel model{nullptr};
    std::vector<double> curve;
};

// AdamW (0.9, 0.999, eps 1e-8) on the control parameters only; the base stays
// frozen (requires_grad restored on exit, weights untouched). z0 latents,
// contexts, sil_latents, and fmri are per-sample aligned tensors.
ControlTrainResult train_control(Denoiser& base, const NoiseSchedule& sched,
                                 const torch::Tensor& z0, const torch::Tensor& contexts,
                                 const torch::Tensor& sil_latents, const torch::Tensor& fmri,
                                 const ControlTrainConfig& cfg, ControlModel resume_from = nullptr);

void save_control(const ControlTrainResult& trained, const std::filesystem::path& dir);
ControlTrainResult load_control(const std::filesystem::path& dir);

}  // namespace mindiff

#endif
