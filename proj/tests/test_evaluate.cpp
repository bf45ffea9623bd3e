#include "mindiff_doctest.hpp"

#include "mindiff/evaluate.hpp"
#include "mindiff/synth_data.hpp"

using namespace mindiff;

namespace {

// classifier oracle: looks the image up in the ground-truth set by equality
ClassifierFn lookup_classifier(const torch::Tensor& images, const torch::Tensor& classes,
                               int64_t k) {
    return [images, classes, k](const torch::Tensor& batch) {
        auto scores = torch::zeros({batch.size(0), k});
        for (int64_t b = 0; b < batch.size(0); ++b)
            for (int64_t i = 0; i < images.size(0); ++i)
                if (torch::equal(batch[b], images[i])) {
                    scores[b][classes[i].item<int64_t>()] = 1.0;
                    break;
                }
        return scores;
    };
}

}  // namespace

TEST_CASE("evaluating ground truth against itself hits the oracle ceiling") {
    DatasetConfig dcfg;
    dcfg.train = 8;
    dcfg.val = 2;
    dcfg.test = 12;
    dcfg.n_voxels = 32;
    dcfg.seed = 3;
    auto ds = build_paired_dataset(dcfg);
    auto& split = ds.test;
    GenerateFn echo = [&](const torch::Tensor& signal, uint64_t) {
        for (int64_t i = 0; i < split.signals.size(0); ++i)
            if (torch::equal(signal, split.signals[i])) return split.images[i];
        throw std::runtime_error("unknown signal");
    };
    EvalConfig cfg;
    cfg.n_way = 5;
    cfg.trials = 20;
    cfg.seed = 42;
    auto report =
        evaluate(echo, split.signals, split.images, split.classes,
                 lookup_classifier(split.images, split.classes, dcfg.k), cfg);
    CHECK(report.acc_n_way == 1.0);
    CHECK(report.pcc == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(report.ssim == doctest::Approx(1.0).epsilon(1e-12));
    REQUIRE(int64_t(report.per_sample.size()) == split.size());

    // aggregates are exact means of the per-sample records
    double acc = 0.0, p = 0.0, s = 0.0;
    for (const auto& r : report.per_sample) {
        acc += r.acc;
        p += r.pcc;
        s += r.ssim;
    }
    CHECK(report.acc_n_way == acc / double(report.per_sample.size()));
    CHECK(report.pcc == p / double(report.per_sample.size()));
    CHECK(report.ssim == s / double(report.per_sample.size()));

    // byte-identical on re-run
    auto again =
        evaluate(echo, split.signals, split.images, split.classes,
                 lookup_classifier(split.images, split.classes, dcfg.k), cfg);
    CHECK(report.to_json().dump() == again.to_json().dump());
    CHECK(report.per_sample[3].seed == again.per_sample[3].seed);
}

TEST_CASE("degenerate constant generations score pcc 0 with a note") {
    auto signals = torch::randn({3, 8});
    auto images = torch::rand({3, 3, 8, 8});
    auto classes = torch::zeros({3}, torch::kInt64);
    GenerateFn flat = [](const torch::Tensor&, uint64_t) { return torch::zeros({3, 8, 8}); };
    ClassifierFn clf = [](const torch::Tensor& b) { return torch::zeros({b.size(0), 4}); };
    EvalConfig cfg;
    cfg.n_way = 2;
    cfg.trials = 4;
    auto report = evaluate(flat, signals, images, classes, clf, cfg);
    for (const auto& r : report.per_sample) CHECK(r.pcc == 0.0);
    CHECK(report.run_meta.at("degenerate_pcc_samples") == 3);
}

TEST_CASE("consistency: singleton note, perfect agreement for deterministic gen") {
    auto signals = torch::randn({4, 8});
    GenerateFn stable = [](const torch::Tensor& signal, uint64_t) {
        auto gen = torch::make_generator<torch::CPUGeneratorImpl>(
            uint64_t(std::abs(signal.sum().item<float>()) * 1e6));
        return torch::rand({3, 8, 8}, gen);
    };
    ClassifierFn clf = [](const torch::Tensor& b) {
        return torch::stack({b.mean({1, 2, 3}), -b.mean({1, 2, 3})}, 1);
    };
    auto single = consistency(stable, signals, clf, 1, 9);
    CHECK(single.singleton);
    CHECK(single.per_signal.empty());
    CHECK(single.run_meta.contains("note"));

    auto rep = consistency(stable, signals, clf, 4, 9);
    CHECK(rep.samples_per_signal == 4);
    REQUIRE(rep.per_signal.size() == 4);
    // seed-independent generator: every pair identical
    CHECK(rep.mean_ssim == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.mean_agreement == 1.0);
    auto j = rep.to_json();
    CHECK(j.at("per_signal").size() == 4);
}

TEST_CASE("pipeline generator: shape, determinism, zero-init control identity") {
    torch::manual_seed(1);
    EncoderConfig ecfg;
    ecfg.n_voxels = 24;
    ecfg.patch_size = 8;
    ecfg.embed_dim = 8;
    ecfg.depth = 1;
    ecfg.heads = 2;
    AutoencoderConfig acfg;
    acfg.image_size = 16;
    acfg.down_steps = 1;
    acfg.latent_channels = 2;
    acfg.hidden = 16;
    DenoiserConfig ncfg;
    ncfg.latent_channels = 2;
    ncfg.latent_size = 8;
    ncfg.base_channels = 8;
    ncfg.context_dim = 8;
    ncfg.time_dim = 16;

    PipelineHandles h;
    h.encoder = FmriEncoder(ecfg);
    h.net = Denoiser(ncfg);
    h.ae = ImageAutoencoder(acfg);
    h.steps = 8;
    NoiseSchedule sched(30, ScheduleKind::Linear);
    auto base_gen = make_pipeline_generator(h, sched);

    auto signal = torch::randn({24});
    auto img1 = base_gen(signal, 77);
    auto img2 = base_gen(signal, 77);
    CHECK(torch::equal(img1, img2));
    CHECK(img1.sizes() == torch::IntArrayRef({3, 16, 16}));
    CHECK(img1.min().item<float>() >= 0.0f);
    CHECK(img1.max().item<float>() <= 1.0f);
    CHECK(!torch::equal(img1, base_gen(signal, 78)));

    // untrained zero-init control branch: pipeline output bit-identical
    PipelineHandles hc = h;
    hc.sil_decoder = SilhouetteDecoder(24, 16);
    hc.control = ControlModel(ncfg, 24, true);
    hc.control->init_from(h.net);
    auto ctrl_gen = make_pipeline_generator(hc, sched);
    CHECK(torch::equal(ctrl_gen(signal, 77), img1));

    PipelineHandles bad = hc;
    bad.sil_decoder = SilhouetteDecoder(nullptr);
    CHECK_THROWS(make_pipeline_generator(bad, sched));
}
