#include "mindiff/silhouette.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>

#include "mindiff/metrics.hpp"

namespace mindiff {

SilhouetteEncoderImpl::SilhouetteEncoderImpl(int64_t n_voxels, int64_t image_size)
    : n_voxels_(n_voxels), image_size_(image_size) {
    using namespace torch::nn;
    conv = Sequential(
        Conv2d(Conv2dOptions(3, 16, 3).stride(2).padding(1)), ReLU(),
        Conv2d(Conv2dOptions(16, 32, 3).stride(2).padding(1)), ReLU(),
        Conv2d(Conv2dOptions(32, 64, 3).stride(2).padding(1)), ReLU(),
        Conv2d(Conv2dOptions(64, 64, 3).stride(2).padding(1)), ReLU(), Flatten());
    const int64_t spatial = image_size / 16;
    fc = Linear(64 * spatial * spatial, n_voxels);
    register_module("conv", conv);
    register_module("fc", fc);
}

torch::Tensor SilhouetteEncoderImpl::forward(const torch::Tensor& images) {
    return fc(conv->forward(images));
}

SilhouetteDecoderImpl::SilhouetteDecoderImpl(int64_t n_voxels, int64_t image_size)
    : n_voxels_(n_voxels), image_size_(image_size) {
    using namespace torch::nn;
    const int64_t spatial = image_size / 16;
    fc = Linear(n_voxels, 64 * spatial * spatial);
    deconv = Sequential(
        ConvTranspose2d(ConvTranspose2dOptions(64, 64, 4).stride(2).padding(1)), ReLU(),
        ConvTranspose2d(ConvTranspose2dOptions(64, 32, 4).stride(2).padding(1)), ReLU(),
        ConvTranspose2d(ConvTranspose2dOptions(32, 16, 4).stride(2).padding(1)), ReLU(),
        ConvTranspose2d(ConvTranspose2dOptions(16, 3, 4).stride(2).padding(1)), Sigmoid());
    register_module("fc", fc);
    register_module("deconv", deconv);
}

torch::Tensor SilhouetteDecoderImpl::forward(const torch::Tensor& signals) {
    const int64_t spatial = image_size_ / 16;
    auto h = torch::relu(fc(signals)).view({signals.size(0), 64, spatial, spatial});
    return deconv->forward(h);
}

torch::Tensor silhouette_encoder_loss(const torch::Tensor& c_true, const torch::Tensor& c_pred,
                                      const std::vector<torch::Tensor>& params,
                                      const SilhouetteLossWeights& w) {
    TORCH_CHECK(c_true.sizes() == c_pred.sizes(), "encoder_loss: shape mismatch");
    auto t = c_true.dim() == 1 ? c_true.unsqueeze(0) : c_true;
    auto p = c_pred.dim() == 1 ? c_pred.unsqueeze(0) : c_pred;
    const double eps = 1e-8;
    auto sq = (t - p).square().sum(1);
    auto cosine = (t * p).sum(1) / ((t.norm(2, 1) + eps) * (p.norm(2, 1) + eps));
    auto loss = (w.a1 * sq + w.a2 * (1.0 - cosine)).mean();
    if (w.a3 > 0.0) {
        for (const auto& theta : params) loss = loss + w.a3 * theta.abs().sum();
    }
    return loss;
}

torch::Tensor silhouette_mae_loss(const torch::Tensor& image_pred, const torch::Tensor& image_true,
                                  const torch::Tensor& self_pred, const torch::Tensor& self_true,
                                  const std::vector<torch::Tensor>& params,
                                  const SilhouetteLossWeights& w) {
    torch::Tensor loss = torch::zeros({}, torch::kFloat64);
    bool any = false;
    if (image_pred.defined() && image_pred.numel() > 0) {
        TORCH_CHECK(image_pred.sizes() == image_true.sizes(), "mae_loss: paired shape mismatch");
        loss = loss.to(image_pred.dtype()) + w.b1 * (image_pred - image_true).abs().mean();
        any = true;
    } else {
        std::cerr << "[mindiff] warning: mae_loss called with empty paired batch\n";
    }
    if (self_pred.defined() && self_pred.numel() > 0) {
        TORCH_CHECK(self_pred.sizes() == self_true.sizes(), "mae_loss: self shape mismatch");
        loss = loss.to(self_pred.dtype()) + w.b2 * (self_pred - self_true).abs().mean();
        any = true;
    } else {
        std::cerr << "[mindiff] warning: mae_loss called with empty self-supervised batch\n";
    }
    if (w.b3 > 0.0) {
        for (const auto& psi : params) loss = loss.to(psi.dtype()) + w.b3 * psi.abs().sum();
    }
    (void)any;
    return loss;
}

torch::Tensor silhouette_ssim(const torch::Tensor& image_pred, const torch::Tensor& image_true,
                              const SilhouetteLossWeights& w) {
    if (image_pred.dim() == 3) return ssim_global(image_pred, image_true, w.c1, w.c2);
    TORCH_CHECK(image_pred.dim() == 4, "ssim: expected [B,C,H,W] or [C,H,W]");
    std::vector<torch::Tensor> vals;
    for (int64_t i = 0; i < image_pred.size(0); ++i)
        vals.push_back(ssim_global(image_pred[i], image_true[i], w.c1, w.c2));
    return torch::stack(vals).mean();
}

torch::Tensor silhouette_decoder_loss(const torch::Tensor& image_pred,
                                      const torch::Tensor& image_true,
                                      const torch::Tensor& self_pred,
                                      const torch::Tensor& self_true,
                                      const std::vector<torch::Tensor>& params,
                                      const SilhouetteLossWeights& w) {
    auto mae = silhouette_mae_loss(image_pred, image_true, self_pred, self_true, params, w);
    if (image_pred.defined() && image_pred.numel() > 0)
        mae = mae + w.b4 * (1.0 - silhouette_ssim(image_pred, image_true, w));
    return mae;
}

namespace {

void check_finite(const torch::Tensor& loss, const char* phase, int64_t epoch) {
    if (!loss.isfinite().item<bool>())
        throw std::runtime_error(std::string("train_silhouette: ") + phase +
                                 " diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
}

}  // namespace

SilhouetteTrainResult train_silhouette(const torch::Tensor& train_signals,
                                       const torch::Tensor& train_images,
                                       const torch::Tensor& image_pool,
                                       const SilhouetteTrainConfig& cfg) {
    torch::manual_seed(cfg.seed);
    const int64_t n_voxels = train_signals.size(1);
    const int64_t image_size = train_images.size(2);
    SilhouetteTrainResult out;
    out.encoder = SilhouetteEncoder(n_voxels, image_size);
    out.decoder = SilhouetteDecoder(n_voxels, image_size);
    const int64_t n = train_signals.size(0);
    auto adam = [&](const std::vector<torch::Tensor>& params) {
        return torch::optim::Adam(
            params, torch::optim::AdamOptions(cfg.lr).betas({cfg.adam_beta1, cfg.adam_beta2}));
    };

    // phase 1: encoder on paired data (Adam 5e-3, betas (0.5, 0.99))
    {
        out.encoder->train();
        auto opt = adam(out.encoder->parameters());
        for (int64_t epoch = 0; epoch < cfg.encoder_epochs; ++epoch) {
            auto perm = torch::randperm(n, torch::kInt64);
            double total = 0.0;
            int64_t batches = 0;
            for (int64_t s = 0; s < n; s += cfg.batch_size, ++batches) {
                auto idx = perm.slice(0, s, std::min(s + cfg.batch_size, n));
                auto pred = out.encoder(train_images.index_select(0, idx));
                auto loss = silhouette_encoder_loss(train_signals.index_select(0, idx), pred,
                                                    out.encoder->parameters(), cfg.weights);
                check_finite(loss, "encoder phase", epoch);
                opt.zero_grad();
                loss.backward();
                opt.step();
                total += loss.item<double>();
            }
            out.encoder_curve.push_back(total / double(batches));
        }
        out.encoder->eval();
    }

    // phase 2: decoder with the encoder frozen; supervised and self-supervised
    // batches interleaved 1:1 per step
    {
        for (auto& p : out.encoder->parameters()) p.set_requires_grad(false);
        out.decoder->train();
        auto opt = adam(out.decoder->parameters());
        const int64_t pool_n = image_pool.defined() ? image_pool.size(0) : 0;
        for (int64_t epoch = 0; epoch < cfg.decoder_epochs; ++epoch) {
            auto perm = torch::randperm(n, torch::kInt64);
            auto pool_perm = pool_n > 0 ? torch::randperm(pool_n, torch::kInt64) : torch::Tensor();
            double total = 0.0;
            int64_t batches = 0;
            int64_t pool_pos = 0;
            for (int64_t s = 0; s < n; s += cfg.batch_size, ++batches) {
                auto idx = perm.slice(0, s, std::min(s + cfg.batch_size, n));
                auto images = train_images.index_select(0, idx);
                auto pred = out.decoder(train_signals.index_select(0, idx));

                torch::Tensor self_pred, self_true;
                if (pool_n > 0) {
                    int64_t take = std::min<int64_t>(cfg.batch_size, pool_n - pool_pos);
                    if (take <= 0) {
                        pool_perm = torch::randperm(pool_n, torch::kInt64);
                        pool_pos = 0;
                        take = std::min<int64_t>(cfg.batch_size, pool_n);
                    }
                    auto pidx = pool_perm.slice(0, pool_pos, pool_pos + take);
                    pool_pos += take;
                    self_true = image_pool.index_select(0, pidx);
                    torch::Tensor c_hat;
                    {
                        torch::NoGradGuard ng;
                        c_hat = out.encoder(self_true);
                    }
                    self_pred = out.decoder(c_hat);
                }
                auto loss = silhouette_decoder_loss(pred, images, self_pred, self_true,
                                                    out.decoder->parameters(), cfg.weights);
                check_finite(loss, "decoder phase", epoch);
                opt.zero_grad();
                loss.backward();
                opt.step();
                total += loss.item<double>();
            }
            out.decoder_curve.push_back(total / double(batches));
            if (!cfg.checkpoint_dir.empty()) {
                std::filesystem::create_directories(cfg.checkpoint_dir);
                torch::serialize::OutputArchive a;
                out.decoder->save(a);
                a.save_to((cfg.checkpoint_dir /
                           ("decoder_epoch_" + std::to_string(epoch) + ".pt")).string());
            }
        }
        out.decoder->eval();
        for (auto& p : out.encoder->parameters()) p.set_requires_grad(true);
    }
    return out;
}

torch::Tensor extract_silhouette(SilhouetteDecoder& decoder, const torch::Tensor& signals) {
    bool single = signals.dim() == 1;
    auto x = single ? signals.unsqueeze(0) : signals;
    if (x.size(1) != decoder->n_voxels())
        throw std::domain_error("extract_silhouette: signal length does not match decoder N");
    torch::NoGradGuard ng;
    decoder->eval();
    auto img = decoder(x);
    return single ? img.squeeze(0) : img;
}

void save_silhouette(const SilhouetteTrainResult& nets, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta = {{"n_voxels", nets.encoder->n_voxels()},
                           {"image_size", nets.encoder->image_size()},
                           {"encoder_curve", nets.encoder_curve},
                           {"decoder_curve", nets.decoder_curve}};
    std::ofstream out(dir / "config.json");
    out << std::setw(2) << meta << "\n";
    torch::serialize::OutputArchive ae, ad;
    const_cast<SilhouetteTrainResult&>(nets).encoder->save(ae);
    ae.save_to((dir / "encoder.pt").string());
    const_cast<SilhouetteTrainResult&>(nets).decoder->save(ad);
    ad.save_to((dir / "decoder.pt").string());
}

SilhouetteTrainResult load_silhouette(const std::filesystem::path& dir) {
    std::ifstream in(dir / "config.json");
    if (!in)
        throw std::runtime_error("load_silhouette: missing " + (dir / "config.json").string());
    nlohmann::json meta;
    in >> meta;
    SilhouetteTrainResult nets;
    nets.encoder = SilhouetteEncoder(meta.at("n_voxels"), meta.at("image_size"));
    nets.decoder = SilhouetteDecoder(meta.at("n_voxels"), meta.at("image_size"));
    torch::serialize::InputArchive ae, ad;
    ae.load_from((dir / "encoder.pt").string());
    nets.encoder->load(ae);
    ad.load_from((dir / "decoder.pt").string());
    nets.decoder->load(ad);
    nets.encoder->eval();
    nets.decoder->eval();
    nets.encoder_curve = meta.value("encoder_curve", std::vector<double>{});
    nets.decoder_curve = meta.value("decoder_curve", std::vector<double>{});
    return nets;
}

}  // namespace mindiff
