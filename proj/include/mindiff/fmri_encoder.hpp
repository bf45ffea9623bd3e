#ifndef MINDIFF_FMRI_ENCODER_HPP
#define MINDIFF_FMRI_ENCODER_HPP

#include <torch/torch.h>

#include <filesystem>

#include "json.hpp"

namespace mindiff {

struct EncoderConfig {
    int64_t n_voxels = 512;
    int64_t patch_size = 16;
    int64_t embed_dim = 128;
    int64_t depth = 4;
    int64_t heads = 4;
    double mask_ratio = 0.75;

    int64_t padded_len() const {
        return (n_voxels + patch_size - 1) / patch_size * patch_size;
    }
    int64_t num_patches() const { return padded_len() / patch_size; }

    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
};

// Pre-norm transformer block; dropout-free so eval-mode inference is
// deterministic.
class EncoderBlockImpl : public torch::nn::Module {
public:
    EncoderBlockImpl(int64_t dim, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x);  // [B, M, dim]

private:
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::MultiheadAttention attn{nullptr};
    torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(EncoderBlock);

// Masked-autoencoding signal encoder. Signals are zero-padded to a multiple of
// patch_size; padded voxels never contribute to the reconstruction loss.
class FmriEncoderImpl : public torch::nn::Module {
public:
    explicit FmriEncoderImpl(const EncoderConfig& cfg);

    // Semantic condition tokens c_context, [B, M, embed_dim]. Throws
    // std::domain_error when the signal length does not match the config.
    torch::Tensor encode(const torch::Tensor& signals);

    struct MaeResult {
        torch::Tensor reconstruction;  // [B, padded_len]
        torch::Tensor mask;            // [B, M] bool, true = masked patch
        torch::Tensor loss;            // scalar, MSE over masked patches only
    };
    // Throws std::invalid_argument when mask_ratio is outside (0,1); a ratio
    // masking zero patches yields loss 0.
    MaeResult mask_and_reconstruct(const torch::Tensor& signals, double mask_ratio,
                                   torch::Generator& gen);

    const EncoderConfig& config() const { return cfg_; }

private:
    torch::Tensor tokens_from(const torch::Tensor& padded, const torch::Tensor& mask);

    EncoderConfig cfg_;
    torch::nn::Linear patch_embed{nullptr};
    torch::Tensor pos_embed;   // [M, embed_dim]
    torch::Tensor mask_token;  // [embed_dim]
    std::vector<EncoderBlock> blocks;
    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear decoder_head{nullptr};
};
TORCH_MODULE(FmriEncoder);

// Trainable two-layer projection from mean-pooled tokens to the frozen image
// embedder's feature space.
class AlignmentHeadImpl : public torch::nn::Module {
public:
    AlignmentHeadImpl(int64_t embed_dim, int64_t target_dim);
    torch::Tensor forward(const torch::Tensor& pooled);  // [B, target_dim]

private:
    torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(AlignmentHead);

// Mean over the token axis: [B, M, D] -> [B, D].
torch::Tensor mean_pool(const torch::Tensor& tokens);

// exp(-cosine(f_image, projected)) per sample, averaged over the batch;
// epsilon-guarded norms. Range [1/e, e].
torch::Tensor align_loss(const torch::Tensor& projected, const torch::Tensor& f_image,
                         double eps = 1e-8);

struct PretrainStats {
    std::vector<double> epoch_loss;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

PretrainStats pretrain_encoder(FmriEncoder& enc, const torch::Tensor& signals,
                               int64_t epochs, double lr, int64_t batch_size, uint64_t seed);

void save_encoder(const FmriEncoder& enc, const std::filesystem::path& dir,
                  uint64_t corpus_checksum);
FmriEncoder load_encoder(const std::filesystem::path& dir, int64_t expected_n_voxels);

}  // namespace mindiff

#endif
