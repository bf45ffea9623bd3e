#include "mindiff/fmri_encoder.hpp"

#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace mindiff {

nlohmann::json EncoderConfig::to_json() const {
    return {{"n_voxels", n_voxels}, {"patch_size", patch_size}, {"embed_dim", embed_dim},
            {"depth", depth},       {"heads", heads},           {"mask_ratio", mask_ratio}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.n_voxels = j.at("n_voxels");
    c.patch_size = j.at("patch_size");
    c.embed_dim = j.at("embed_dim");
    c.depth = j.at("depth");
    c.heads = j.at("heads");
    c.mask_ratio = j.at("mask_ratio");
    return c;
}

EncoderBlockImpl::EncoderBlockImpl(int64_t dim, int64_t heads) {
    using namespace torch::nn;
    norm1 = LayerNorm(LayerNormOptions({dim}));
    norm2 = LayerNorm(LayerNormOptions({dim}));
    attn = MultiheadAttention(MultiheadAttentionOptions(dim, heads).dropout(0.0));
    mlp = Sequential(Linear(dim, dim * 2), GELU(), Linear(dim * 2, dim));
    register_module("norm1", norm1);
    register_module("norm2", norm2);
    register_module("attn", attn);
    register_module("mlp", mlp);
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor& x) {
    auto h = norm1(x).transpose(0, 1);  // [M, B, D]
    auto out = std::get<0>(attn(h, h, h)).transpose(0, 1);
    auto y = x + out;
    return y + mlp->forward(norm2(y));
}

FmriEncoderImpl::FmriEncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
    patch_embed = torch::nn::Linear(cfg.patch_size, cfg.embed_dim);
    register_module("patch_embed", patch_embed);
    pos_embed = register_parameter(
        "pos_embed", torch::randn({cfg.num_patches(), cfg.embed_dim}) * 0.02);
    mask_token = register_parameter("mask_token", torch::zeros({cfg.embed_dim}));
    for (int64_t i = 0; i < cfg.depth; ++i) {
        blocks.emplace_back(cfg.embed_dim, cfg.heads);
        register_module("block_" + std::to_string(i), blocks.back());
    }
    norm = torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.embed_dim}));
    register_module("norm", norm);
    decoder_head = torch::nn::Linear(cfg.embed_dim, cfg.patch_size);
    register_module("decoder_head", decoder_head);
}

torch::Tensor FmriEncoderImpl::tokens_from(const torch::Tensor& padded,
                                           const torch::Tensor& mask) {
    auto patches = padded.view({padded.size(0), cfg_.num_patches(), cfg_.patch_size});
    auto tokens = patch_embed(patches);
    if (mask.defined()) {
        auto m = mask.unsqueeze(2).to(tokens.dtype());
        tokens = tokens * (1.0 - m) + mask_token.to(tokens.dtype()) * m;
    }
    tokens = tokens + pos_embed.to(tokens.dtype());
    for (auto& block : blocks) tokens = block(tokens);
    return norm(tokens);
}

torch::Tensor FmriEncoderImpl::encode(const torch::Tensor& signals) {
    bool single = signals.dim() == 1;
    auto x = single ? signals.unsqueeze(0) : signals;
    if (x.dim() != 2 || x.size(1) != cfg_.n_voxels)
        throw std::domain_error("FmriEncoder::encode: signal length does not match config N");
    auto padded = torch::constant_pad_nd(x, {0, cfg_.padded_len() - cfg_.n_voxels});
    auto tokens = tokens_from(padded, torch::Tensor());
    return single ? tokens.squeeze(0) : tokens;
}

FmriEncoderImpl::MaeResult FmriEncoderImpl::mask_and_reconstruct(const torch::Tensor& signals,
                                                                 double mask_ratio,
                                                                 torch::Generator& gen) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw std::invalid_argument("mask_and_reconstruct: mask_ratio must be in (0,1)");
    auto x = signals.dim() == 1 ? signals.unsqueeze(0) : signals;
    if (x.size(1) != cfg_.n_voxels)
        throw std::domain_error("mask_and_reconstruct: signal length does not match config N");
    const int64_t b = x.size(0);
    const int64_t m = cfg_.num_patches();
    const int64_t n_mask = static_cast<int64_t>(mask_ratio * double(m));

    auto scores = torch::rand({b, m}, gen, torch::kFloat32);
    auto order = scores.argsort(/*stable=*/true, /*dim=*/1, /*descending=*/false);
    auto mask = torch::zeros({b, m}, torch::kBool);
    if (n_mask > 0) mask.scatter_(1, order.slice(1, 0, n_mask), true);

    auto padded = torch::constant_pad_nd(x, {0, cfg_.padded_len() - cfg_.n_voxels});
    auto tokens = tokens_from(padded, mask);
    auto recon = decoder_head(tokens).view({b, cfg_.padded_len()});

    auto valid = torch::zeros({cfg_.padded_len()}, torch::kBool);
    valid.slice(0, 0, cfg_.n_voxels).fill_(true);
    auto patch_mask = mask.unsqueeze(2)
                          .expand({b, m, cfg_.patch_size})
                          .reshape({b, cfg_.padded_len()});
    auto weight = (patch_mask & valid.unsqueeze(0)).to(recon.dtype());
    auto count = weight.sum();
    torch::Tensor loss;
    if (count.item<double>() == 0.0) {
        loss = torch::zeros({}, recon.options());
    } else {
        loss = ((recon - padded).square() * weight).sum() / count;
    }
    return {recon, mask, loss};
}

AlignmentHeadImpl::AlignmentHeadImpl(int64_t embed_dim, int64_t target_dim) {
    using namespace torch::nn;
    mlp = Sequential(Linear(embed_dim, target_dim), ReLU(), Linear(target_dim, target_dim));
    register_module("mlp", mlp);
}

torch::Tensor AlignmentHeadImpl::forward(const torch::Tensor& pooled) {
    return mlp->forward(pooled);
}

torch::Tensor mean_pool(const torch::Tensor& tokens) {
    TORCH_CHECK(tokens.dim() >= 2, "mean_pool: expected [..., M, D]");
    return tokens.mean(-2);
}

torch::Tensor align_loss(const torch::Tensor& projected, const torch::Tensor& f_image,
                         double eps) {
    auto p = projected.dim() == 1 ? projected.unsqueeze(0) : projected;
    auto f = f_image.dim() == 1 ? f_image.unsqueeze(0) : f_image;
    TORCH_CHECK(p.sizes() == f.sizes(), "align_loss: shape mismatch");
    auto dot = (p * f).sum(1);
    auto cosine = dot / ((p.norm(2, 1) + eps) * (f.norm(2, 1) + eps));
    return torch::exp(-cosine).mean();
}

PretrainStats pretrain_encoder(FmriEncoder& enc, const torch::Tensor& signals,
                               int64_t epochs, double lr, int64_t batch_size, uint64_t seed) {
    torch::manual_seed(seed);
    auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
    PretrainStats stats;
    const int64_t n = signals.size(0);
    const double ratio = enc->config().mask_ratio;
    {
        torch::NoGradGuard ng;
        enc->eval();
        auto eval_gen = torch::make_generator<torch::CPUGeneratorImpl>(seed ^ 0xE7A1ull);
        double total = 0.0;
        int64_t batches = 0;
        for (int64_t s = 0; s < n; s += batch_size, ++batches)
            total += enc->mask_and_reconstruct(
                            signals.slice(0, s, std::min(s + batch_size, n)), ratio, eval_gen)
                         .loss.item<double>();
        stats.initial_loss = total / double(batches);
    }
    enc->train();
    torch::optim::Adam opt(enc->parameters(), torch::optim::AdamOptions(lr));
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        auto perm = torch::randperm(n, torch::kInt64);
        double total = 0.0;
        int64_t batches = 0;
        for (int64_t s = 0; s < n; s += batch_size, ++batches) {
            auto idx = perm.slice(0, s, std::min(s + batch_size, n));
            auto res = enc->mask_and_reconstruct(signals.index_select(0, idx), ratio, gen);
            opt.zero_grad();
            res.loss.backward();
            opt.step();
            total += res.loss.item<double>();
        }
        stats.epoch_loss.push_back(total / double(batches));
    }
    stats.final_loss = stats.epoch_loss.empty() ? stats.initial_loss : stats.epoch_loss.back();
    enc->eval();
    return stats;
}

void save_encoder(const FmriEncoder& enc, const std::filesystem::path& dir,
                  uint64_t corpus_checksum) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta = enc->config().to_json();
    meta["corpus_checksum"] = corpus_checksum;
    std::ofstream out(dir / "config.json");
    out << std::setw(2) << meta << "\n";
    torch::serialize::OutputArchive archive;
    const_cast<FmriEncoder&>(enc)->save(archive);
    archive.save_to((dir / "weights.pt").string());
}

FmriEncoder load_encoder(const std::filesystem::path& dir, int64_t expected_n_voxels) {
    std::ifstream in(dir / "config.json");
    if (!in) throw std::runtime_error("load_encoder: missing " + (dir / "config.json").string());
    nlohmann::json meta;
    in >> meta;
    auto cfg = EncoderConfig::from_json(meta);
    if (expected_n_voxels > 0 && cfg.n_voxels != expected_n_voxels)
        throw std::runtime_error("load_encoder: checkpoint N=" + std::to_string(cfg.n_voxels) +
                                 " does not match dataset N=" +
                                 std::to_string(expected_n_voxels));
    FmriEncoder enc(cfg);
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "weights.pt").string());
    enc->load(archive);
    enc->eval();
    return enc;
}

}  // namespace mindiff
