#include "mindiff_doctest.hpp"

#include <filesystem>
#include <random>

#include "mindiff/rng.hpp"
#include "mindiff/synth_data.hpp"
#include "mindiff/tensor_io.hpp"

using namespace mindiff;
namespace fs = std::filesystem;

namespace {
DatasetConfig tiny_cfg() {
    DatasetConfig cfg;
    cfg.train = 60;
    cfg.val = 10;
    cfg.test = 10;
    cfg.n_voxels = 64;
    cfg.seed = 123;
    return cfg;
}
}  // namespace

TEST_CASE("render_scene is deterministic and validates class_id") {
    SceneSpec spec{0, 0.5, 0.5, 0.4, 7};
    auto [img1, mask1] = render_scene(spec, 64, 10);
    auto [img2, mask2] = render_scene(spec, 64, 10);
    CHECK(torch::equal(img1, img2));
    CHECK(torch::equal(mask1, mask2));
    CHECK(img1.min().item<float>() >= 0.0f);
    CHECK(img1.max().item<float>() <= 1.0f);
    SceneSpec bad{10, 0.5, 0.5, 0.4, 7};
    CHECK_THROWS_AS(render_scene(bad, 64, 10), std::domain_error);
    CHECK_THROWS_AS(render_scene(SceneSpec{-1, 0.5, 0.5, 0.4, 1}, 64, 10), std::domain_error);
}

TEST_CASE("silhouette coverage stays in [0.03, 0.36] over classes x seeds") {
    const int64_t s = 64, k = 10;
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int64_t c = 0; c < k; ++c) {
        for (int rep = 0; rep < 100; ++rep) {
            double scale = 0.2 + 0.4 * uni(rng);
            double margin = 0.71 * scale + 2.0 / double(s);
            SceneSpec spec{c, margin + (1 - 2 * margin) * uni(rng),
                           margin + (1 - 2 * margin) * uni(rng), scale, rng()};
            auto mask = render_scene(spec, s, k).second;
            double frac = mask.to(torch::kFloat64).mean().item<double>();
            CHECK(frac >= 0.03);
            CHECK(frac <= 0.36);
        }
    }
}

TEST_CASE("position-only changes translate the silhouette") {
    const int64_t s = 64, k = 10;
    SceneSpec a{3, 0.35, 0.40, 0.3, 4242};
    SceneSpec b = a;
    b.cx = 0.62;
    b.cy = 0.55;
    auto ma = render_scene(a, s, k).second.to(torch::kFloat64);
    auto mb = render_scene(b, s, k).second.to(torch::kFloat64);
    // brute-force re-centering: find the shift maximizing overlap
    double best_iou = 0.0;
    for (int64_t dy = -s + 1; dy < s; ++dy)
        for (int64_t dx = -s + 1; dx < s; ++dx) {
            auto shifted = torch::roll(mb, {dy, dx}, {0, 1});
            double inter = (ma * shifted).sum().item<double>();
            double uni = (ma + shifted).clamp_max(1).sum().item<double>();
            if (uni > 0) best_iou = std::max(best_iou, inter / uni);
        }
    CHECK(best_iou > 0.99);
}

TEST_CASE("signal_from_image determinism, identity mixing, linearity") {
    SceneSpec spec{2, 0.5, 0.5, 0.4, 17};
    auto image = render_scene(spec, 64, 10).first;
    auto mixing = make_mixing(64, descriptor_dim(10), 5);
    auto r1 = make_stream(1, 0);
    auto r2 = make_stream(1, 0);
    auto s1 = signal_from_image(image, mixing, 10, 0.0, r1);
    auto s2 = signal_from_image(image, mixing, 10, 0.0, r2);
    CHECK(torch::equal(s1, s2));

    auto ident = identity_padded_mixing(300, descriptor_dim(10));
    auto r3 = make_stream(1, 0);
    auto sig = signal_from_image(image, ident, 10, 0.0, r3);
    auto desc = image_descriptor(image, 10);
    CHECK((sig.slice(0, 0, desc.size(0)) - desc).abs().max().item<float>() == 0.0f);
    CHECK(sig.slice(0, desc.size(0), 300).abs().max().item<float>() == 0.0f);

    // noiseless forward model is linear in the descriptor (superposition)
    torch::manual_seed(2);
    auto d1 = torch::rand({descriptor_dim(10)});
    auto d2 = torch::rand({descriptor_dim(10)});
    auto lhs = mixing.mv(d1 + d2);
    auto rhs = mixing.mv(d1) + mixing.mv(d2);
    CHECK((lhs - rhs).abs().max().item<float>() < 1e-5f);

    auto bad = make_mixing(64, 10, 5);
    auto r4 = make_stream(1, 0);
    CHECK_THROWS_AS(signal_from_image(image, bad, 10, 0.0, r4), std::domain_error);
}

TEST_CASE("linear decoder recovers the descriptor at noise 0.05") {
    // least-squares oracle on 1k pairs: R^2 > 0.9 per retained dimension
    DatasetConfig cfg = tiny_cfg();
    cfg.train = 1000;
    cfg.val = 1;
    cfg.test = 1;
    cfg.n_voxels = 512;
    cfg.noise_sigma = 0.05;
    auto ds = build_paired_dataset(cfg);
    const int64_t n = cfg.train;
    auto d = torch::empty({n, descriptor_dim(cfg.k)});
    for (int64_t i = 0; i < n; ++i) d[i] = image_descriptor(ds.train.images[i], cfg.k);
    auto sol = std::get<0>(torch::linalg_lstsq(ds.train.signals, d, c10::nullopt, c10::nullopt));
    auto pred = ds.train.signals.matmul(sol);
    auto resid = (pred - d).square().sum();
    auto total = (d - d.mean(0)).square().sum();
    double r2 = 1.0 - (resid / total).item<double>();
    CHECK(r2 > 0.9);
}

TEST_CASE("build_paired_dataset sizes, determinism, histogram, hygiene") {
    auto cfg = tiny_cfg();
    auto ds = build_paired_dataset(cfg);
    CHECK(ds.train.size() == 60);
    CHECK(ds.val.size() == 10);
    CHECK(ds.test.size() == 10);
    CHECK(ds.spec_seeds().size() == 80);  // no seed in two splits
    CHECK(ds.train.signals.isfinite().all().item<bool>());

    auto ds2 = build_paired_dataset(cfg);
    CHECK(torch::equal(ds.train.signals, ds2.train.signals));
    CHECK(torch::equal(ds.test.images, ds2.test.images));

    // class histogram uniform within +-20% on a larger train split
    DatasetConfig big = cfg;
    big.train = 1000;
    auto dsb = build_paired_dataset(big);
    auto hist = torch::bincount(dsb.train.classes, {}, big.k).to(torch::kFloat64);
    double expect = double(big.train) / double(big.k);
    CHECK(hist.min().item<double>() >= 0.8 * expect);
    CHECK(hist.max().item<double>() <= 1.2 * expect);

    CHECK_THROWS_AS(build_paired_dataset([] {
                        DatasetConfig c;
                        c.train = 0;
                        return c;
                    }()),
                    std::invalid_argument);
}

TEST_CASE("dataset save / ingest round-trip is exact") {
    auto cfg = tiny_cfg();
    auto ds = build_paired_dataset(cfg);
    fs::path root = fs::temp_directory_path() / "mindiff_ds_test";
    fs::remove_all(root);
    save_dataset(ds, root);

    // byte-identical files on re-save with the same cfg+seed
    fs::path root2 = fs::temp_directory_path() / "mindiff_ds_test2";
    fs::remove_all(root2);
    save_dataset(build_paired_dataset(cfg), root2);
    CHECK(file_checksum(root / "train" / "signals.bin") ==
          file_checksum(root2 / "train" / "signals.bin"));
    CHECK(file_checksum(root / "test" / "images.bin") ==
          file_checksum(root2 / "test" / "images.bin"));

    auto back = ingest_dataset(root);
    CHECK(torch::equal(back.train.signals, ds.train.signals));
    CHECK(torch::equal(back.test.masks, ds.test.masks));
    CHECK(torch::equal(back.mixing, ds.mixing));
    CHECK(back.train.specs[5].seed == ds.train.specs[5].seed);

    // corrupting the voxel count must fail with the file named
    auto bad = ds.train.signals.slice(1, 0, cfg.n_voxels - 1).contiguous();
    save_tensor(root / "train" / "signals.bin", bad);
    try {
        ingest_dataset(root);
        CHECK(false);
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("signals.bin") != std::string::npos);
    }
    fs::remove_all(root);
    fs::remove_all(root2);
}

TEST_CASE("unlabeled corpus: disjoint pool, matching moments") {
    auto cfg = tiny_cfg();
    auto ds = build_paired_dataset(cfg);
    CorpusConfig ccfg;
    ccfg.signals = 400;
    ccfg.images = 50;
    ccfg.seed = 9;
    auto corpus = build_unlabeled_corpus(ccfg, cfg, ds.mixing, ds.spec_seeds());
    CHECK(corpus.signals.size(0) == 400);
    CHECK(corpus.signals.isfinite().all().item<bool>());
    for (auto seed : corpus.image_spec_seeds) CHECK(ds.spec_seeds().count(seed) == 0);

    // corpus moments close to paired-train moments (3 sigma on the mean)
    double m_train = ds.train.signals.mean().item<double>();
    double m_corpus = corpus.signals.mean().item<double>();
    double sd = ds.train.signals.std().item<double>();
    double se = sd / std::sqrt(double(corpus.signals.numel()));
    CHECK(std::abs(m_train - m_corpus) < 3 * sd);  // coarse band
    CHECK(std::abs(ds.train.signals.std().item<double>() -
                   corpus.signals.std().item<double>()) < 0.5 * sd);
    (void)se;
}
