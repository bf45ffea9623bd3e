#include "mindiff/diffusion.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

namespace mindiff {

namespace {

const char* kind_name(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

int64_t norm_groups(int64_t channels) { return std::min<int64_t>(8, channels); }

}  // namespace

nlohmann::json AutoencoderConfig::to_json() const {
    return {{"image_size", image_size},
            {"latent_channels", latent_channels},
            {"down_steps", down_steps},
            {"hidden", hidden}};
}

AutoencoderConfig AutoencoderConfig::from_json(const nlohmann::json& j) {
    AutoencoderConfig cfg;
    cfg.image_size = j.at("image_size");
    cfg.latent_channels = j.at("latent_channels");
    cfg.down_steps = j.at("down_steps");
    cfg.hidden = j.at("hidden");
    return cfg;
}

ImageAutoencoderImpl::ImageAutoencoderImpl(const AutoencoderConfig& cfg) : cfg_(cfg) {
    using namespace torch::nn;
    enc = Sequential(Conv2d(Conv2dOptions(3, cfg.hidden, 3).padding(1)), ReLU());
    for (int64_t i = 0; i < cfg.down_steps; ++i) {
        enc->push_back(Conv2d(Conv2dOptions(cfg.hidden, cfg.hidden, 3).stride(2).padding(1)));
        enc->push_back(ReLU());
    }
    enc->push_back(Conv2d(Conv2dOptions(cfg.hidden, cfg.latent_channels, 3).padding(1)));
    dec = Sequential(Conv2d(Conv2dOptions(cfg.latent_channels, cfg.hidden, 3).padding(1)), ReLU());
    for (int64_t i = 0; i < cfg.down_steps; ++i) {
        dec->push_back(
            ConvTranspose2d(ConvTranspose2dOptions(cfg.hidden, cfg.hidden, 4).stride(2).padding(1)));
        dec->push_back(ReLU());
    }
    dec->push_back(Conv2d(Conv2dOptions(cfg.hidden, 3, 3).padding(1)));
    register_module("enc", enc);
    register_module("dec", dec);
    lat_mean = register_buffer("lat_mean", torch::zeros({cfg.latent_channels, 1, 1}));
    lat_std = register_buffer("lat_std", torch::ones({cfg.latent_channels, 1, 1}));
}

torch::Tensor ImageAutoencoderImpl::encode(const torch::Tensor& images) {
    return (enc->forward(images) - lat_mean) / lat_std;
}

torch::Tensor ImageAutoencoderImpl::decode(const torch::Tensor& latents) {
    return dec->forward(latents * lat_std + lat_mean);
}

void ImageAutoencoderImpl::calibrate(const torch::Tensor& images) {
    torch::NoGradGuard ng;
    auto raw = enc->forward(images);
    lat_mean.copy_(raw.mean({0, 2, 3}).view({-1, 1, 1}));
    lat_std.copy_(raw.std({0, 2, 3}).clamp_min(1e-6).view({-1, 1, 1}));
}

double psnr_db(const torch::Tensor& pred, const torch::Tensor& target) {
    double mse = (pred.clamp(0, 1) - target).square().mean().item<double>();
    return 10.0 * std::log10(1.0 / std::max(mse, 1e-12));
}

double train_autoencoder(ImageAutoencoder& ae, const torch::Tensor& images, int64_t epochs,
                         double lr, int64_t batch_size, uint64_t seed) {
    torch::manual_seed(seed);
    ae->train();
    torch::optim::Adam opt(ae->parameters(), torch::optim::AdamOptions(lr));
    const int64_t n = images.size(0);
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        auto perm = torch::randperm(n, torch::kInt64);
        for (int64_t s = 0; s < n; s += batch_size) {
            auto idx = perm.slice(0, s, std::min(s + batch_size, n));
            auto batch = images.index_select(0, idx);
            auto loss = (ae->decode(ae->encode(batch)) - batch).square().mean();
            if (!loss.isfinite().item<bool>())
                throw std::runtime_error("train_autoencoder: diverged (non-finite loss) at epoch " +
                                         std::to_string(epoch));
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    ae->eval();
    torch::NoGradGuard ng;
    return psnr_db(ae->decode(ae->encode(images)), images);
}

nlohmann::json DenoiserConfig::to_json() const {
    return {{"latent_channels", latent_channels},
            {"latent_size", latent_size},
            {"base_channels", base_channels},
            {"context_dim", context_dim},
            {"time_dim", time_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig cfg;
    cfg.latent_channels = j.at("latent_channels");
    cfg.latent_size = j.at("latent_size");
    cfg.base_channels = j.at("base_channels");
    cfg.context_dim = j.at("context_dim");
    cfg.time_dim = j.at("time_dim");
    return cfg;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
    const int64_t half = dim / 2;
    auto freqs = torch::exp(-std::log(10000.0) *
                            torch::arange(half, torch::kFloat64) / double(half));
    auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
    return torch::cat({args.sin(), args.cos()}, 1);
}

ResBlockImpl::ResBlockImpl(int64_t ch_in, int64_t ch_out, int64_t time_dim)
    : has_skip_(ch_in != ch_out) {
    using namespace torch::nn;
    norm1 = GroupNorm(GroupNormOptions(norm_groups(ch_in), ch_in));
    conv1 = Conv2d(Conv2dOptions(ch_in, ch_out, 3).padding(1));
    time_proj = Linear(time_dim, ch_out);
    norm2 = GroupNorm(GroupNormOptions(norm_groups(ch_out), ch_out));
    conv2 = Conv2d(Conv2dOptions(ch_out, ch_out, 3).padding(1));
    register_module("norm1", norm1);
    register_module("conv1", conv1);
    register_module("time_proj", time_proj);
    register_module("norm2", norm2);
    register_module("conv2", conv2);
    if (has_skip_) {
        skip = Conv2d(Conv2dOptions(ch_in, ch_out, 1));
        register_module("skip", skip);
    }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + time_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return h + (has_skip_ ? skip(x) : x);
}

CrossAttentionImpl::CrossAttentionImpl(int64_t channels, int64_t context_dim)
    : channels_(channels) {
    to_q = torch::nn::Linear(channels, channels);
    to_k = torch::nn::Linear(context_dim, channels);
    to_v = torch::nn::Linear(context_dim, channels);
    to_out = torch::nn::Linear(channels, channels);
    register_module("to_q", to_q);
    register_module("to_k", to_k);
    register_module("to_v", to_v);
    register_module("to_out", to_out);
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
    const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    auto flat = x.flatten(2).transpose(1, 2);  // [B, HW, C]
    auto q = to_q(flat);
    auto k = to_k(context);
    auto v = to_v(context);
    auto attn = torch::softmax(q.matmul(k.transpose(1, 2)) / std::sqrt(double(channels_)), -1);
    auto out = to_out(attn.matmul(v));
    return x + out.transpose(1, 2).reshape({B, C, H, W});
}

DenoiserEncoderImpl::DenoiserEncoderImpl(const DenoiserConfig& cfg) {
    using namespace torch::nn;
    const int64_t c = cfg.base_channels;
    conv_in = Conv2d(Conv2dOptions(cfg.latent_channels, c, 3).padding(1));
    res1 = ResBlock(c, c, cfg.time_dim);
    xattn1 = CrossAttention(c, cfg.context_dim);
    down = Conv2d(Conv2dOptions(c, 2 * c, 3).stride(2).padding(1));
    res2 = ResBlock(2 * c, 2 * c, cfg.time_dim);
    xattn2 = CrossAttention(2 * c, cfg.context_dim);
    res_mid = ResBlock(2 * c, 2 * c, cfg.time_dim);
    register_module("conv_in", conv_in);
    register_module("res1", res1);
    register_module("xattn1", xattn1);
    register_module("down", down);
    register_module("res2", res2);
    register_module("xattn2", xattn2);
    register_module("res_mid", res_mid);
}

std::vector<torch::Tensor> DenoiserEncoderImpl::forward(const torch::Tensor& z,
                                                        const torch::Tensor& temb,
                                                        const torch::Tensor& context) {
    auto h = conv_in(z);
    h = res1(h, temb);
    h = xattn1(h, context);
    auto s1 = h;
    h = down(h);
    h = res2(h, temb);
    h = xattn2(h, context);
    auto s2 = h;
    auto mid = res_mid(h, temb);
    return {s1, s2, mid};
}

DenoiserImpl::DenoiserImpl(const DenoiserConfig& cfg) : cfg_(cfg) {
    using namespace torch::nn;
    const int64_t c = cfg.base_channels;
    encoder_ = DenoiserEncoder(cfg);
    time_mlp1 = Linear(cfg.time_dim, cfg.time_dim);
    time_mlp2 = Linear(cfg.time_dim, cfg.time_dim);
    dec2 = ResBlock(4 * c, 2 * c, cfg.time_dim);
    dec_xattn = CrossAttention(2 * c, cfg.context_dim);
    up = ConvTranspose2d(ConvTranspose2dOptions(2 * c, c, 4).stride(2).padding(1));
    dec1 = ResBlock(2 * c, c, cfg.time_dim);
    norm_out = GroupNorm(GroupNormOptions(norm_groups(c), c));
    conv_out = Conv2d(Conv2dOptions(c, cfg.latent_channels, 3).padding(1));
    register_module("encoder", encoder_);
    register_module("time_mlp1", time_mlp1);
    register_module("time_mlp2", time_mlp2);
    register_module("dec2", dec2);
    register_module("dec_xattn", dec_xattn);
    register_module("up", up);
    register_module("dec1", dec1);
    register_module("norm_out", norm_out);
    register_module("conv_out", conv_out);
}

torch::Tensor DenoiserImpl::embed_time(const torch::Tensor& t) {
    auto emb = timestep_embedding(t, cfg_.time_dim).to(time_mlp1->weight.dtype());
    return time_mlp2(torch::silu(time_mlp1(emb)));
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z, const torch::Tensor& t,
                                    const torch::Tensor& context,
                                    const std::vector<torch::Tensor>& control) {
    auto temb = embed_time(t);
    auto feats = encoder_(z, temb, context);
    if (!control.empty()) {
        TORCH_CHECK(control.size() == feats.size(), "control feature count mismatch");
        for (size_t i = 0; i < feats.size(); ++i) {
            TORCH_CHECK(control[i].sizes() == feats[i].sizes(), "control feature shape mismatch");
            feats[i] = feats[i] + control[i];
        }
    }
    auto h = dec2(torch::cat({feats[2], feats[1]}, 1), temb);
    h = dec_xattn(h, context);
    h = up(h);
    h = dec1(torch::cat({h, feats[0]}, 1), temb);
    return conv_out(torch::silu(norm_out(h)));
}

torch::Tensor denoise_loss(Denoiser& net, const NoiseSchedule& sched, const torch::Tensor& z0,
                           const torch::Tensor& t, const torch::Tensor& context,
                           const torch::Tensor& eps) {
    TORCH_CHECK(z0.sizes() == eps.sizes(), "denoise_loss: z0/eps shape mismatch");
    TORCH_CHECK(t.dim() == 1 && t.size(0) == z0.size(0), "denoise_loss: t must be [B]");
    const int64_t b = z0.size(0);
    auto sg = torch::empty({b}, torch::kFloat64);
    auto so = torch::empty({b}, torch::kFloat64);
    for (int64_t i = 0; i < b; ++i) {
        double g = sched.gamma(t[i].item<int64_t>());
        sg[i] = std::sqrt(g);
        so[i] = std::sqrt(1.0 - g);
    }
    auto shape = std::vector<int64_t>(z0.dim(), 1);
    shape[0] = b;
    auto z_t = sg.view(shape).to(z0.dtype()) * z0 + so.view(shape).to(z0.dtype()) * eps;
    auto pred = net(z_t, t, context);
    return (eps - pred).square().mean();
}

int64_t set_finetune_trainable(Denoiser& net) {
    int64_t trainable = 0;
    for (auto& p : net->named_parameters()) {
        bool on = p.key().find("xattn") != std::string::npos;
        p.value().set_requires_grad(on);
        if (on) ++trainable;
    }
    return trainable;
}

std::vector<int64_t> strided_timesteps(int64_t timesteps, int64_t steps) {
    TORCH_CHECK(steps >= 1 && steps <= timesteps, "strided_timesteps: steps out of range");
    std::vector<int64_t> taus;
    if (steps == 1) {
        taus.push_back(timesteps);
    } else {
        for (int64_t j = steps - 1; j >= 0; --j) {
            int64_t t = 1 + llround(double(timesteps - 1) * double(j) / double(steps - 1));
            if (taus.empty() || taus.back() != t) taus.push_back(t);
        }
    }
    return taus;  // descending, ends at 1 when steps > 1
}

torch::Tensor sample_latent(Denoiser& net, const NoiseSchedule& sched,
                            const torch::Tensor& context, int64_t steps, torch::Generator& gen,
                            const ControlHook& control) {
    torch::NoGradGuard ng;
    net->eval();
    const auto& cfg = net->config();
    const int64_t b = context.size(0);
    auto z = torch::randn({b, cfg.latent_channels, cfg.latent_size, cfg.latent_size}, gen);
    auto taus = strided_timesteps(sched.timesteps(), steps);
    for (size_t i = 0; i < taus.size(); ++i) {
        const int64_t t = taus[i];
        const int64_t t_prev = i + 1 < taus.size() ? taus[i + 1] : 0;
        const double g = sched.gamma(t), g_prev = sched.gamma(t_prev);
        const double beta_eff = 1.0 - g / g_prev;
        const double sigma2 = (1.0 - g_prev) / (1.0 - g) * beta_eff;
        auto tt = torch::full({b}, t, torch::kInt64);
        auto eps_hat = control ? net(z, tt, context, control(z, tt)) : net(z, tt, context);
        z = (z - beta_eff / std::sqrt(1.0 - g) * eps_hat) / std::sqrt(1.0 - beta_eff);
        if (sigma2 > 0.0) z = z + std::sqrt(sigma2) * torch::empty_like(z).normal_(0.0, 1.0, gen);
    }
    return z;
}

torch::Tensor sample_images(Denoiser& net, ImageAutoencoder& ae, const NoiseSchedule& sched,
                            const torch::Tensor& context, int64_t steps, torch::Generator& gen,
                            const ControlHook& control) {
    torch::NoGradGuard ng;
    ae->eval();
    auto z = sample_latent(net, sched, context, steps, gen, control);
    return ae->decode(z).clamp(0, 1);
}

PretrainResult pretrain_base(const torch::Tensor& images, const PretrainConfig& cfg) {
    torch::manual_seed(cfg.seed);
    PretrainResult out;
    out.ae = ImageAutoencoder(cfg.ae);
    out.ae_psnr = train_autoencoder(out.ae, images, cfg.ae_epochs, cfg.lr, cfg.batch_size,
                                    cfg.seed ^ 0xAEAEull);
    if (out.ae_psnr < cfg.psnr_floor)
        throw std::runtime_error("pretrain_base: autoencoder PSNR " + std::to_string(out.ae_psnr) +
                                 " dB below the configured floor");
    out.ae->calibrate(images);

    torch::Tensor latents;
    {
        torch::NoGradGuard ng;
        latents = out.ae->encode(images);
    }
    NoiseSchedule sched(cfg.timesteps, cfg.kind);
    out.net = Denoiser(cfg.net);
    out.net->train();
    torch::optim::Adam opt(out.net->parameters(), torch::optim::AdamOptions(cfg.lr));
    const int64_t n = latents.size(0);
    auto null_ctx = torch::zeros({cfg.batch_size, 1, cfg.net.context_dim});
    for (int64_t epoch = 0; epoch < cfg.denoiser_epochs; ++epoch) {
        auto perm = torch::randperm(n, torch::kInt64);
        double total = 0.0;
        int64_t batches = 0;
        for (int64_t s = 0; s < n; s += cfg.batch_size, ++batches) {
            auto idx = perm.slice(0, s, std::min(s + cfg.batch_size, n));
            auto z0 = latents.index_select(0, idx);
            auto t = torch::randint(1, cfg.timesteps + 1, {idx.size(0)}, torch::kInt64);
            auto eps = torch::randn_like(z0);
            auto loss = denoise_loss(out.net, sched, z0, t,
                                     null_ctx.slice(0, 0, idx.size(0)), eps);
            if (!loss.isfinite().item<bool>())
                throw std::runtime_error("pretrain_base: denoiser diverged at epoch " +
                                         std::to_string(epoch));
            opt.zero_grad();
            loss.backward();
            opt.step();
            total += loss.item<double>();
        }
        out.denoiser_curve.push_back(total / double(batches));
    }
    out.net->eval();
    return out;
}

void save_diffusion(const PretrainResult& model, const NoiseSchedule& sched,
                    const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta = {{"ae", model.ae->config().to_json()},
                           {"net", model.net->config().to_json()},
                           {"timesteps", sched.timesteps()},
                           {"kind", kind_name(sched.kind())},
                           {"schedule_hash", sched.hash()},
                           {"ae_psnr", model.ae_psnr},
                           {"denoiser_curve", model.denoiser_curve}};
    std::ofstream out(dir / "config.json");
    out << std::setw(2) << meta << "\n";
    torch::serialize::OutputArchive aa, an;
    const_cast<PretrainResult&>(model).ae->save(aa);
    aa.save_to((dir / "autoencoder.pt").string());
    const_cast<PretrainResult&>(model).net->save(an);
    an.save_to((dir / "denoiser.pt").string());
}

PretrainResult load_diffusion(const std::filesystem::path& dir, NoiseSchedule* sched_out) {
    std::ifstream in(dir / "config.json");
    if (!in) throw std::runtime_error("load_diffusion: missing " + (dir / "config.json").string());
    nlohmann::json meta;
    in >> meta;
    PretrainResult model;
    model.ae = ImageAutoencoder(AutoencoderConfig::from_json(meta.at("ae")));
    model.net = Denoiser(DenoiserConfig::from_json(meta.at("net")));
    torch::serialize::InputArchive aa, an;
    aa.load_from((dir / "autoencoder.pt").string());
    model.ae->load(aa);
    an.load_from((dir / "denoiser.pt").string());
    model.net->load(an);
    model.ae->eval();
    model.net->eval();
    model.ae_psnr = meta.value("ae_psnr", 0.0);
    model.denoiser_curve = meta.value("denoiser_curve", std::vector<double>{});
    if (sched_out) {
        NoiseSchedule sched(meta.at("timesteps"),
                            schedule_kind_from_string(meta.at("kind")));
        if (sched.hash() != meta.at("schedule_hash").get<uint64_t>())
            throw std::runtime_error("load_diffusion: schedule hash mismatch");
        *sched_out = sched;
    }
    return model;
}

}  // namespace mindiff
