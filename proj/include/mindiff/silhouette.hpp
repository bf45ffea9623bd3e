#ifndef MINDIFF_SILHOUETTE_HPP
#define MINDIFF_SILHOUETTE_HPP

#include <torch/torch.h>

#include <filesystem>
#include <vector>

#include "json.hpp"

namespace mindiff {

struct SilhouetteLossWeights {
    double a1 = 1.0, a2 = 0.3, a3 = 0.001;            // encoder loss
    double b1 = 1.0, b2 = 1.0, b3 = 0.001, b4 = 1.0;  // decoder losses
    double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;        // SSIM stabilizers
};

// Image -> signal-space projection (4 conv blocks + FC bottleneck).
class SilhouetteEncoderImpl : public torch::nn::Module {
public:
    SilhouetteEncoderImpl(int64_t n_voxels, int64_t image_size);
    torch::Tensor forward(const torch::Tensor& images);  // [B,3,S,S] -> [B,N]

    int64_t n_voxels() const { return n_voxels_; }
    int64_t image_size() const { return image_size_; }

private:
    int64_t n_voxels_, image_size_;
    torch::nn::Sequential conv{nullptr};
    torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(SilhouetteEncoder);

// Signal -> rough image; output squashed to [0,1].
class SilhouetteDecoderImpl : public torch::nn::Module {
public:
    SilhouetteDecoderImpl(int64_t n_voxels, int64_t image_size);
    torch::Tensor forward(const torch::Tensor& signals);  // [B,N] -> [B,3,S,S]

    int64_t n_voxels() const { return n_voxels_; }
    int64_t image_size() const { return image_size_; }

private:
    int64_t n_voxels_, image_size_;
    torch::nn::Linear fc{nullptr};
    torch::nn::Sequential deconv{nullptr};
};
TORCH_MODULE(SilhouetteDecoder);

// mean over the batch of [a1 ||c - c_hat||^2 + a2 (1 - cosine(c, c_hat))]
// plus a3 * sum |theta| over the encoder parameters.
torch::Tensor silhouette_encoder_loss(const torch::Tensor& c_true, const torch::Tensor& c_pred,
                                      const std::vector<torch::Tensor>& params,
                                      const SilhouetteLossWeights& w);

// b1 * mean|I_hat - I| over the paired batch + b2 * mean|phi_hat - phi| over
// the self-supervised batch + b3 * sum |psi|. Either batch may be empty
// (undefined tensors); the term contributes 0 and a warning is logged.
torch::Tensor silhouette_mae_loss(const torch::Tensor& image_pred, const torch::Tensor& image_true,
                                  const torch::Tensor& self_pred, const torch::Tensor& self_true,
                                  const std::vector<torch::Tensor>& params,
                                  const SilhouetteLossWeights& w);

// Global-statistics SSIM, batch-averaged ([B,C,H,W] or [C,H,W]).
torch::Tensor silhouette_ssim(const torch::Tensor& image_pred, const torch::Tensor& image_true,
                              const SilhouetteLossWeights& w);

// L_d = L_MAE + b4 * (1 - SSIM); the SSIM similarity enters the minimized
// objective through its complement.
torch::Tensor silhouette_decoder_loss(const torch::Tensor& image_pred,
                                      const torch::Tensor& image_true,
                                      const torch::Tensor& self_pred,
                                      const torch::Tensor& self_true,
                                      const std::vector<torch::Tensor>& params,
                                      const SilhouetteLossWeights& w);

struct SilhouetteTrainConfig {
    int64_t encoder_epochs = 150;
    int64_t decoder_epochs = 150;
    double lr = 5e-3;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.99;
    int64_t batch_size = 32;
    uint64_t seed = 0;
    SilhouetteLossWeights weights;
    std::filesystem::path checkpoint_dir;  // empty: no per-epoch checkpoints
};

struct SilhouetteTrainResult {
    SilhouetteEncoder encoder{nullptr};
    SilhouetteDecoder decoder{nullptr};
    std::vector<double> encoder_curve;
    std::vector<double> decoder_curve;
};

// Two-phase training: encoder on paired {signal, image} data first, then the
// decoder against the frozen encoder with interleaved supervised and
// self-supervised (image-pool round trip) batches. Aborts with
// std::runtime_error on divergence.
SilhouetteTrainResult train_silhouette(const torch::Tensor& train_signals,
                                       const torch::Tensor& train_images,
                                       const torch::Tensor& image_pool,
                                       const SilhouetteTrainConfig& cfg);

// c_silhouette from a trained decoder; [N] or [B,N] input. Throws
// std::domain_error on N mismatch.
torch::Tensor extract_silhouette(SilhouetteDecoder& decoder, const torch::Tensor& signals);

void save_silhouette(const SilhouetteTrainResult& nets, const std::filesystem::path& dir);
SilhouetteTrainResult load_silhouette(const std::filesystem::path& dir);

}  // namespace mindiff

#endif
