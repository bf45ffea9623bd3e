#include "mindiff/control.hpp"

#include <fstream>
#include <iomanip>

namespace mindiff {

ZeroConvImpl::ZeroConvImpl(int64_t ch_in, int64_t ch_out) {
    conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(ch_in, ch_out, 1));
    {
        torch::NoGradGuard ng;
        conv->weight.zero_();
        conv->bias.zero_();
    }
    register_module("conv", conv);
}

ResidualModuleImpl::ResidualModuleImpl(int64_t n_voxels, const DenoiserConfig& cfg)
    : channels_(cfg.latent_channels), size_(cfg.latent_size) {
    using namespace torch::nn;
    fc = Linear(n_voxels, channels_ * size_ * size_);
    conv1 = Conv2d(Conv2dOptions(channels_, 2 * channels_, 3).padding(1));
    conv2 = Conv2d(Conv2dOptions(2 * channels_, channels_, 3).padding(1));
    register_module("fc", fc);
    register_module("conv1", conv1);
    register_module("conv2", conv2);
}

torch::Tensor ResidualModuleImpl::forward(const torch::Tensor& signals) {
    auto h = fc(signals).view({signals.size(0), channels_, size_, size_});
    return conv2(torch::silu(conv1(torch::silu(h))));
}

ControlModelImpl::ControlModelImpl(const DenoiserConfig& cfg, int64_t n_voxels, bool use_fres)
    : cfg_(cfg), n_voxels_(n_voxels), use_fres_(use_fres) {
    const int64_t c = cfg.base_channels;
    f_control = DenoiserEncoder(cfg);
    time_mlp1 = torch::nn::Linear(cfg.time_dim, cfg.time_dim);
    time_mlp2 = torch::nn::Linear(cfg.time_dim, cfg.time_dim);
    zero_sil = ZeroConv(cfg.latent_channels, cfg.latent_channels);
    zero_res = ZeroConv(cfg.latent_channels, cfg.latent_channels);
    tap1 = ZeroConv(c, c);
    tap2 = ZeroConv(2 * c, 2 * c);
    tap_mid = ZeroConv(2 * c, 2 * c);
    f_res = ResidualModule(n_voxels, cfg);
    register_module("f_control", f_control);
    register_module("time_mlp1", time_mlp1);
    register_module("time_mlp2", time_mlp2);
    register_module("zero_sil", zero_sil);
    register_module("zero_res", zero_res);
    register_module("tap1", tap1);
    register_module("tap2", tap2);
    register_module("tap_mid", tap_mid);
    register_module("f_res", f_res);
}

void ControlModelImpl::init_from(Denoiser& base) {
    torch::NoGradGuard ng;
    auto src = base->encoder_half()->named_parameters();
    auto dst = f_control->named_parameters();
    TORCH_CHECK(src.size() == dst.size(), "control clone: parameter count mismatch");
    for (auto& p : dst) {
        auto* s = src.find(p.key());
        TORCH_CHECK(s != nullptr, "control clone: missing base parameter ", p.key());
        TORCH_CHECK(s->sizes() == p.value().sizes(), "control clone: shape mismatch at ", p.key());
        p.value().copy_(*s);
    }
    auto src_buf = base->encoder_half()->named_buffers();
    auto dst_buf = f_control->named_buffers();
    for (auto& b : dst_buf) {
        auto* s = src_buf.find(b.key());
        TORCH_CHECK(s != nullptr, "control clone: missing base buffer ", b.key());
        b.value().copy_(*s);
    }
    auto bp = base->named_parameters();
    for (const char* name : {"time_mlp1.weight", "time_mlp1.bias", "time_mlp2.weight",
                             "time_mlp2.bias"}) {
        auto* s = bp.find(name);
        TORCH_CHECK(s != nullptr, "control clone: missing base ", name);
        named_parameters().find(name)->copy_(*s);
    }
}

torch::Tensor ControlModelImpl::injected_input(const torch::Tensor& z_t,
                                               const ConditionBundle& bundle) {
    if (!bundle.sil_latent.defined())
        throw std::domain_error("combined_condition: silhouette latent missing");
    if (bundle.sil_latent.sizes() != z_t.sizes())
        throw std::domain_error("combined_condition: silhouette latent shape mismatch");
    auto inner = bundle.sil_latent;
    if (use_fres_) {
        if (!bundle.fmri.defined())
            throw std::domain_error("combined_condition: fmri signal missing with F_res on");
        inner = inner + zero_res(f_res(bundle.fmri));
    }
    return z_t + zero_sil(inner);
}

std::vector<torch::Tensor> ControlModelImpl::combined_condition(const torch::Tensor& z_t,
                                                                const torch::Tensor& t,
                                                                const ConditionBundle& bundle) {
    if (!bundle.context.defined()) throw std::domain_error("combined_condition: context missing");
    auto temb = time_mlp2(torch::silu(
        time_mlp1(timestep_embedding(t, cfg_.time_dim).to(time_mlp1->weight.dtype()))));
    auto feats = f_control(injected_input(z_t, bundle), temb, bundle.context);
    return {tap1(feats[0]), tap2(feats[1]), tap_mid(feats[2])};
}

torch::Tensor encode_silhouette_to_latent(ImageAutoencoder& ae, const torch::Tensor& silhouette) {
    if (silhouette.size(-1) != ae->config().image_size)
        throw std::domain_error("encode_silhouette_to_latent: image size mismatch");
    torch::NoGradGuard ng;
    ae->eval();
    return ae->encode(silhouette.dim() == 3 ? silhouette.unsqueeze(0) : silhouette);
}

ControlHook make_control_hook(ControlModel model, ConditionBundle bundle) {
    return [model, bundle](const torch::Tensor& z, const torch::Tensor& t) mutable {
        return model->combined_condition(z, t, bundle);
    };
}

torch::Tensor controlled_denoise(Denoiser& base, ControlModel& control, const torch::Tensor& z_t,
                                 const torch::Tensor& t, const ConditionBundle& bundle) {
    return base(z_t, t, bundle.context, control->combined_condition(z_t, t, bundle));
}

torch::Tensor control_loss(Denoiser& base, ControlModel& control, const NoiseSchedule& sched,
                           const torch::Tensor& z0, const torch::Tensor& t,
                           const ConditionBundle& bundle, const torch::Tensor& eps) {
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
    auto pred = controlled_denoise(base, control, z_t, t, bundle);
    return (eps - pred).square().mean();
}

ControlTrainResult train_control(Denoiser& base, const NoiseSchedule& sched,
                                 const torch::Tensor& z0, const torch::Tensor& contexts,
                                 const torch::Tensor& sil_latents, const torch::Tensor& fmri,
                                 const ControlTrainConfig& cfg, ControlModel resume_from) {
    torch::manual_seed(cfg.seed);
    ControlTrainResult out;
    if (resume_from) {
        out.model = resume_from;
        out.model->set_use_fres(cfg.use_fres);
    } else {
        out.model = ControlModel(base->config(), fmri.size(1), cfg.use_fres);
        out.model->init_from(base);
    }
    out.model->train();

    std::vector<bool> base_grads;
    for (auto& p : base->parameters()) {
        base_grads.push_back(p.requires_grad());
        p.set_requires_grad(false);
    }
    base->eval();

    torch::optim::AdamW opt(out.model->parameters(),
                            torch::optim::AdamWOptions(cfg.lr).betas({0.9, 0.999}).eps(1e-8));
    const int64_t n = z0.size(0);
    const int64_t T = sched.timesteps();
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto perm = torch::randperm(n, torch::kInt64);
        double total = 0.0;
        int64_t batches = 0;
        for (int64_t s = 0; s < n; s += cfg.batch_size, ++batches) {
            auto idx = perm.slice(0, s, std::min(s + cfg.batch_size, n));
            ConditionBundle bundle{contexts.index_select(0, idx),
                                   sil_latents.index_select(0, idx),
                                   fmri.index_select(0, idx)};
            auto zb = z0.index_select(0, idx);
            auto t = torch::randint(1, T + 1, {idx.size(0)}, torch::kInt64);
            auto eps = torch::randn_like(zb);
            auto loss = control_loss(base, out.model, sched, zb, t, bundle, eps);
            if (!loss.isfinite().item<bool>())
                throw std::runtime_error("train_control: diverged at epoch " +
                                         std::to_string(epoch));
            opt.zero_grad();
            loss.backward();
            opt.step();
            total += loss.item<double>();
        }
        out.curve.push_back(total / double(batches));
    }
    out.model->eval();

    size_t i = 0;
    for (auto& p : base->parameters()) p.set_requires_grad(base_grads[i++]);
    return out;
}

void save_control(const ControlTrainResult& trained, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta = {{"net", trained.model->config().to_json()},
                           {"n_voxels", trained.model->n_voxels()},
                           {"use_fres", trained.model->use_fres()},
                           {"curve", trained.curve}};
    std::ofstream out(dir / "config.json");
    out << std::setw(2) << meta << "\n";
    torch::serialize::OutputArchive a;
    const_cast<ControlTrainResult&>(trained).model->save(a);
    a.save_to((dir / "control.pt").string());
}

ControlTrainResult load_control(const std::filesystem::path& dir) {
    std::ifstream in(dir / "config.json");
    if (!in) throw std::runtime_error("load_control: missing " + (dir / "config.json").string());
    nlohmann::json meta;
    in >> meta;
    ControlTrainResult out;
    out.model = ControlModel(DenoiserConfig::from_json(meta.at("net")), meta.at("n_voxels"),
                             meta.at("use_fres"));
    torch::serialize::InputArchive a;
    a.load_from((dir / "control.pt").string());
    out.model->load(a);
    out.model->eval();
    out.curve = meta.value("curve", std::vector<double>{});
    return out;
}

}  // namespace mindiff
