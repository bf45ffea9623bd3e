#include "mindiff_doctest.hpp"

#include <cmath>
#include <filesystem>
#include <random>

#include "mindiff/silhouette.hpp"
#include "mindiff/synth_data.hpp"
#include "test_util.hpp"

using namespace mindiff;
namespace fs = std::filesystem;

TEST_CASE("encoder loss matches a definitional scalar oracle") {
    torch::manual_seed(0);
    auto c_true = torch::randn({4, 16}, torch::kFloat64);
    auto c_pred = torch::randn({4, 16}, torch::kFloat64);
    std::vector<torch::Tensor> params = {torch::randn({3, 5}, torch::kFloat64),
                                         torch::randn({7}, torch::kFloat64)};
    SilhouetteLossWeights w;  // a = (1, 0.3, 0.001)
    double loss = silhouette_encoder_loss(c_true, c_pred, params, w).item<double>();

    double acc = 0.0;
    const double eps = 1e-8;
    for (int64_t b = 0; b < 4; ++b) {
        double sq = 0.0, dot = 0.0, nt = 0.0, np = 0.0;
        for (int64_t j = 0; j < 16; ++j) {
            double t = c_true[b][j].item<double>();
            double p = c_pred[b][j].item<double>();
            sq += (t - p) * (t - p);
            dot += t * p;
            nt += t * t;
            np += p * p;
        }
        double cosine = dot / ((std::sqrt(nt) + eps) * (std::sqrt(np) + eps));
        acc += w.a1 * sq + w.a2 * (1.0 - cosine);
    }
    double want = acc / 4.0;
    for (const auto& p : params) {
        auto flat = p.flatten();
        for (int64_t i = 0; i < flat.numel(); ++i) want += w.a3 * std::abs(flat[i].item<double>());
    }
    CHECK(std::abs(loss - want) / std::max(1.0, std::abs(want)) < 1e-10);
}

TEST_CASE("encoder loss analytic spot value: anti-aligned unit vectors") {
    auto c = torch::tensor({1.0, 0.0, 0.0}, torch::kFloat64);
    SilhouetteLossWeights w;
    w.a1 = 0.0;
    w.a2 = 0.3;
    w.a3 = 0.0;
    double loss = silhouette_encoder_loss(c, -c, {}, w).item<double>();
    CHECK(loss == doctest::Approx(0.6).epsilon(1e-7));  // 0.3 * (1 - (-1))
}

TEST_CASE("mae loss: constant offset, empty batches, oracle") {
    SilhouetteLossWeights w;
    w.b1 = 1.0;
    w.b2 = 0.0;
    w.b3 = 0.0;
    auto a = torch::full({2, 3, 8, 8}, 0.25, torch::kFloat64);
    auto b = torch::full({2, 3, 8, 8}, 0.75, torch::kFloat64);
    double loss = silhouette_mae_loss(a, b, torch::Tensor(), torch::Tensor(), {}, w).item<double>();
    CHECK(loss == doctest::Approx(0.5).epsilon(1e-12));

    // both batches empty: zero plus the parameter penalty
    SilhouetteLossWeights w2;
    std::vector<torch::Tensor> params = {torch::tensor({-2.0, 3.0}, torch::kFloat64)};
    double only_reg =
        silhouette_mae_loss(torch::Tensor(), torch::Tensor(), torch::Tensor(), torch::Tensor(),
                            params, w2)
            .item<double>();
    CHECK(only_reg == doctest::Approx(0.001 * 5.0).epsilon(1e-12));

    // full definitional oracle with both batches and the penalty
    torch::manual_seed(1);
    auto ip = torch::rand({3, 3, 4, 4}, torch::kFloat64);
    auto it = torch::rand({3, 3, 4, 4}, torch::kFloat64);
    auto sp = torch::rand({2, 3, 4, 4}, torch::kFloat64);
    auto st = torch::rand({2, 3, 4, 4}, torch::kFloat64);
    double got = silhouette_mae_loss(ip, it, sp, st, params, w2).item<double>();
    double want = (ip - it).abs().mean().item<double>() * w2.b1 +
                  (sp - st).abs().mean().item<double>() * w2.b2 +
                  w2.b3 * params[0].abs().sum().item<double>();
    CHECK(std::abs(got - want) / std::max(1.0, std::abs(want)) < 1e-10);
}

TEST_CASE("decoder loss composes MAE and the SSIM complement") {
    torch::manual_seed(2);
    SilhouetteLossWeights w;
    auto ip = torch::rand({2, 3, 16, 16}, torch::kFloat64);
    auto it = torch::rand({2, 3, 16, 16}, torch::kFloat64);
    std::vector<torch::Tensor> params = {torch::randn({4}, torch::kFloat64)};
    double got = silhouette_decoder_loss(ip, it, torch::Tensor(), torch::Tensor(), params, w)
                     .item<double>();
    double want =
        silhouette_mae_loss(ip, it, torch::Tensor(), torch::Tensor(), params, w).item<double>() +
        w.b4 * (1.0 - silhouette_ssim(ip, it, w).item<double>());
    CHECK(std::abs(got - want) / std::max(1.0, std::abs(want)) < 1e-10);

    // identical non-constant images: MAE 0 and SSIM exactly 1
    SilhouetteLossWeights w0;
    w0.b3 = 0.0;
    double zero = silhouette_decoder_loss(ip, ip, torch::Tensor(), torch::Tensor(), {}, w0)
                      .item<double>();
    CHECK(zero == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("decoder loss gradient w.r.t. the prediction matches finite differences") {
    torch::manual_seed(3);
    SilhouetteLossWeights w;
    auto it = torch::rand({2, 3, 8, 8}, torch::kFloat64);
    auto ip = torch::rand({2, 3, 8, 8}, torch::kFloat64).set_requires_grad(true);
    auto loss_fn = [&] {
        return silhouette_decoder_loss(ip, it, torch::Tensor(), torch::Tensor(), {}, w);
    };
    std::mt19937_64 rng(4);
    CHECK(mindiff::testing::grad_check(loss_fn, ip, 8, 1e-4, rng) < 1e-4);
}

TEST_CASE("encoder / decoder shapes and extract_silhouette validation") {
    torch::manual_seed(5);
    SilhouetteEncoder enc(48, 64);
    SilhouetteDecoder dec(48, 64);
    auto imgs = torch::rand({2, 3, 64, 64});
    auto c = enc(imgs);
    CHECK(c.sizes() == torch::IntArrayRef({2, 48}));
    auto back = dec(c);
    CHECK(back.sizes() == torch::IntArrayRef({2, 3, 64, 64}));
    CHECK(back.min().item<float>() >= 0.0f);
    CHECK(back.max().item<float>() <= 1.0f);

    auto one = extract_silhouette(dec, torch::randn({48}));
    CHECK(one.sizes() == torch::IntArrayRef({3, 64, 64}));
    CHECK_THROWS_AS(extract_silhouette(dec, torch::randn({2, 47})), std::domain_error);
}

TEST_CASE("phase 2 leaves the encoder bit-identical") {
    DatasetConfig dcfg;
    dcfg.train = 16;
    dcfg.val = 2;
    dcfg.test = 2;
    dcfg.n_voxels = 48;
    dcfg.seed = 31;
    auto ds = build_paired_dataset(dcfg);
    auto signals = ds.normalize(ds.train.signals);

    SilhouetteTrainConfig cfg;
    cfg.encoder_epochs = 2;
    cfg.decoder_epochs = 0;
    cfg.batch_size = 8;
    cfg.seed = 77;
    auto base = train_silhouette(signals, ds.train.images, torch::Tensor(), cfg);
    cfg.decoder_epochs = 2;
    auto trained = train_silhouette(signals, ds.train.images, ds.train.images, cfg);

    auto pa = base.encoder->parameters();
    auto pb = trained.encoder->parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));
    for (const auto& p : trained.encoder->parameters()) CHECK(p.requires_grad());
}

TEST_CASE("short training run learns and round-trips through disk") {
    DatasetConfig dcfg;
    dcfg.train = 48;
    dcfg.val = 4;
    dcfg.test = 4;
    dcfg.n_voxels = 48;
    dcfg.seed = 19;
    auto ds = build_paired_dataset(dcfg);
    auto signals = ds.normalize(ds.train.signals);

    SilhouetteTrainConfig cfg;
    cfg.encoder_epochs = 12;
    cfg.decoder_epochs = 12;
    cfg.batch_size = 16;
    cfg.seed = 5;
    auto nets = train_silhouette(signals, ds.train.images, ds.train.images, cfg);
    REQUIRE(nets.encoder_curve.size() == 12);
    REQUIRE(nets.decoder_curve.size() == 12);
    CHECK(nets.encoder_curve.back() < nets.encoder_curve.front());
    CHECK(nets.decoder_curve.back() < nets.decoder_curve.front());

    auto out = extract_silhouette(nets.decoder, signals);
    CHECK(out.sizes() == torch::IntArrayRef({48, 3, 64, 64}));
    CHECK(out.min().item<float>() >= 0.0f);
    CHECK(out.max().item<float>() <= 1.0f);

    auto dir = fs::temp_directory_path() / "mindiff_sil_ckpt";
    fs::remove_all(dir);
    save_silhouette(nets, dir);
    auto back = load_silhouette(dir);
    CHECK(torch::equal(extract_silhouette(back.decoder, signals), out));
    CHECK(back.decoder_curve == nets.decoder_curve);
    fs::remove_all(dir);
}

TEST_CASE("training aborts on non-finite loss") {
    auto signals = torch::full({8, 48}, std::numeric_limits<float>::quiet_NaN());
    auto images = torch::rand({8, 3, 64, 64});
    SilhouetteTrainConfig cfg;
    cfg.encoder_epochs = 1;
    cfg.decoder_epochs = 0;
    cfg.batch_size = 8;
    CHECK_THROWS_AS(train_silhouette(signals, images, torch::Tensor(), cfg), std::runtime_error);
}
