#ifndef MINDIFF_DIFFUSION_HPP
#define MINDIFF_DIFFUSION_HPP

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <vector>

#include "json.hpp"
#include "mindiff/schedule.hpp"

namespace mindiff {

struct AutoencoderConfig {
    int64_t image_size = 64;
    int64_t latent_channels = 4;
    int64_t down_steps = 2;  // spatial factor 2^down_steps (64 -> 16)
    int64_t hidden = 64;

    int64_t latent_size() const { return image_size >> down_steps; }
    nlohmann::json to_json() const;
    static AutoencoderConfig from_json(const nlohmann::json& j);
};

// Plain convolutional autoencoder; decode() output is unbounded, clamp to
// [0,1] when producing images.
class ImageAutoencoderImpl : public torch::nn::Module {
public:
    explicit ImageAutoencoderImpl(const AutoencoderConfig& cfg);
    torch::Tensor encode(const torch::Tensor& images);   // [B,3,S,S] -> [B,C,s,s]
    torch::Tensor decode(const torch::Tensor& latents);  // inverse shape

    // Sets the per-channel affine so encode() output is ~N(0,1) over `images`;
    // decode() inverts it, so round trips are unchanged.
    void calibrate(const torch::Tensor& images);

    const AutoencoderConfig& config() const { return cfg_; }

private:
    AutoencoderConfig cfg_;
    torch::nn::Sequential enc{nullptr}, dec{nullptr};
    torch::Tensor lat_mean, lat_std;  // buffers, [C,1,1]
};
TORCH_MODULE(ImageAutoencoder);

// Mean PSNR (dB) between [0,1] image batches after clamping the prediction.
double psnr_db(const torch::Tensor& pred, const torch::Tensor& target);

// Trains the autoencoder (Adam, MSE) and returns train-set PSNR in dB.
double train_autoencoder(ImageAutoencoder& ae, const torch::Tensor& images, int64_t epochs,
                         double lr, int64_t batch_size, uint64_t seed);

struct DenoiserConfig {
    int64_t latent_channels = 4;
    int64_t latent_size = 16;
    int64_t base_channels = 32;
    int64_t context_dim = 128;
    int64_t time_dim = 64;

    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

// Sinusoidal embedding of integer timesteps, [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int64_t ch_in, int64_t ch_out, int64_t time_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::Linear time_proj{nullptr};
    bool has_skip_;
};
TORCH_MODULE(ResBlock);

// Single-head cross-attention over flattened spatial positions; residual.
class CrossAttentionImpl : public torch::nn::Module {
public:
    CrossAttentionImpl(int64_t channels, int64_t context_dim);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

private:
    torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
    int64_t channels_;
};
TORCH_MODULE(CrossAttention);

// The U-Net encoder half (shared structure with the control branch clone).
// forward returns {s1: [B,c,16,16], s2: [B,2c,8,8], mid: [B,2c,8,8]}.
class DenoiserEncoderImpl : public torch::nn::Module {
public:
    explicit DenoiserEncoderImpl(const DenoiserConfig& cfg);
    std::vector<torch::Tensor> forward(const torch::Tensor& z, const torch::Tensor& temb,
                                       const torch::Tensor& context);

private:
    torch::nn::Conv2d conv_in{nullptr}, down{nullptr};
    ResBlock res1{nullptr}, res2{nullptr}, res_mid{nullptr};
    CrossAttention xattn1{nullptr}, xattn2{nullptr};
};
TORCH_MODULE(DenoiserEncoder);

// epsilon-prediction U-Net. `control` (empty, or 3 feature maps matching the
// encoder outputs) is added to the features the decoder consumes.
class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(const DenoiserConfig& cfg);
    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t,
                          const torch::Tensor& context,
                          const std::vector<torch::Tensor>& control = {});

    DenoiserEncoder& encoder_half() { return encoder_; }
    torch::Tensor embed_time(const torch::Tensor& t);
    const DenoiserConfig& config() const { return cfg_; }

private:
    DenoiserConfig cfg_;
    DenoiserEncoder encoder_{nullptr};
    torch::nn::Linear time_mlp1{nullptr}, time_mlp2{nullptr};
    ResBlock dec2{nullptr}, dec1{nullptr};
    CrossAttention dec_xattn{nullptr};
    torch::nn::ConvTranspose2d up{nullptr};
    torch::nn::GroupNorm norm_out{nullptr};
    torch::nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(Denoiser);

// ||eps - eps_theta(q_sample(z0,t,eps), t, context)||^2, mean over elements.
// t is a [B] tensor of timesteps in [1, T].
torch::Tensor denoise_loss(Denoiser& net, const NoiseSchedule& sched, const torch::Tensor& z0,
                           const torch::Tensor& t, const torch::Tensor& context,
                           const torch::Tensor& eps);

// Marks only cross-attention parameters trainable; everything else frozen.
// Returns the number of trainable tensors.
int64_t set_finetune_trainable(Denoiser& net);

// Hook computing control features for (z_t, t); empty function = no control.
using ControlHook =
    std::function<std::vector<torch::Tensor>(const torch::Tensor& z, const torch::Tensor& t)>;

// Ancestral chain over `steps` strided timesteps (steps == T: plain
// ancestral). Deterministic given the generator state; the RNG consumption
// pattern is independent of `control`.
torch::Tensor sample_latent(Denoiser& net, const NoiseSchedule& sched,
                            const torch::Tensor& context, int64_t steps, torch::Generator& gen,
                            const ControlHook& control = nullptr);

// sample_latent + image decoder, clamped to [0,1].
torch::Tensor sample_images(Denoiser& net, ImageAutoencoder& ae, const NoiseSchedule& sched,
                            const torch::Tensor& context, int64_t steps, torch::Generator& gen,
                            const ControlHook& control = nullptr);

// Evenly strided timestep subset {1, ..., T} of size `steps` (descending).
std::vector<int64_t> strided_timesteps(int64_t timesteps, int64_t steps);

struct PretrainConfig {
    AutoencoderConfig ae;
    DenoiserConfig net;
    int64_t timesteps = 1000;
    ScheduleKind kind = ScheduleKind::Linear;
    int64_t ae_epochs = 100;
    int64_t denoiser_epochs = 100;
    double lr = 1e-3;
    int64_t batch_size = 32;
    uint64_t seed = 0;
    double psnr_floor = 25.0;
};

struct PretrainResult {
    ImageAutoencoder ae{nullptr};
    Denoiser net{nullptr};
    double ae_psnr = 0.0;
    std::vector<double> denoiser_curve;
};

// Trains the autoencoder (gated on psnr_floor, abort below) then the
// unconditional denoiser (zero context token) on the image corpus.
PretrainResult pretrain_base(const torch::Tensor& images, const PretrainConfig& cfg);

void save_diffusion(const PretrainResult& model, const NoiseSchedule& sched,
                    const std::filesystem::path& dir);
PretrainResult load_diffusion(const std::filesystem::path& dir, NoiseSchedule* sched_out = nullptr);

}  // namespace mindiff

#endif
