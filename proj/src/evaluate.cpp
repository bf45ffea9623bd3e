#include "mindiff/evaluate.hpp"

#include <random>

#include "mindiff/rng.hpp"

namespace mindiff {

namespace {

torch::Tensor grayscale_flat(const torch::Tensor& image) {
    return image.to(torch::kFloat64).mean(0).flatten();
}

}  // namespace

GenerateFn make_pipeline_generator(PipelineHandles h, NoiseSchedule sched) {
    TORCH_CHECK(h.encoder && h.net && h.ae, "pipeline generator: encoder/net/ae required");
    TORCH_CHECK(!h.control || h.sil_decoder,
                "pipeline generator: control branch requires a silhouette decoder");
    return [h, sched](const torch::Tensor& signal, uint64_t seed) mutable -> torch::Tensor {
        torch::NoGradGuard ng;
        h.encoder->eval();
        auto batch = signal.dim() == 1 ? signal.unsqueeze(0) : signal;
        auto context = h.encoder->encode(batch);
        auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
        ControlHook hook;
        if (h.control) {
            auto sil = extract_silhouette(h.sil_decoder, batch);
            ConditionBundle bundle{context, encode_silhouette_to_latent(h.ae, sil), batch};
            hook = make_control_hook(h.control, bundle);
        }
        auto images = sample_images(h.net, h.ae, sched, context, h.steps, gen, hook);
        return signal.dim() == 1 ? images.squeeze(0) : images;
    };
}

MetricsReport evaluate(const GenerateFn& gen, const torch::Tensor& signals,
                       const torch::Tensor& images, const torch::Tensor& classes,
                       const ClassifierFn& classifier, const EvalConfig& cfg) {
    const int64_t n = signals.size(0);
    TORCH_CHECK(images.size(0) == n && classes.size(0) == n, "evaluate: split size mismatch");
    MetricsReport report;
    report.n = cfg.n_way;
    report.trials = cfg.trials;
    report.run_meta = cfg.run_meta;
    report.per_sample.reserve(n);
    int64_t degenerate_pcc = 0;
    double sum_acc = 0.0, sum_pcc = 0.0, sum_ssim = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        SampleRecord rec;
        rec.index = i;
        rec.class_id = classes[i].item<int64_t>();
        rec.seed = mix_seed(cfg.seed, uint64_t(i));
        auto generated = gen(signals[i], rec.seed);
        try {
            rec.pcc = pcc(grayscale_flat(generated), grayscale_flat(images[i])).item<double>();
        } catch (const std::invalid_argument&) {
            rec.pcc = 0.0;  // constant image: correlation undefined, scored 0
            ++degenerate_pcc;
        }
        rec.ssim = ssim_global(generated.to(torch::kFloat64), images[i].to(torch::kFloat64))
                       .item<double>();
        auto scores = classifier(generated.unsqueeze(0));
        auto rng = make_stream(cfg.seed ^ 0xACCull, uint64_t(i));
        rec.acc = n_way_accuracy(scores, classes.slice(0, i, i + 1), cfg.n_way, cfg.trials, rng);
        sum_acc += rec.acc;
        sum_pcc += rec.pcc;
        sum_ssim += rec.ssim;
        report.per_sample.push_back(rec);
    }
    report.acc_n_way = sum_acc / double(n);
    report.pcc = sum_pcc / double(n);
    report.ssim = sum_ssim / double(n);
    if (degenerate_pcc > 0) report.run_meta["degenerate_pcc_samples"] = degenerate_pcc;
    return report;
}

nlohmann::json ConsistencyReport::to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& r : per_signal)
        per.push_back({{"index", r.index},
                       {"mean_pairwise_ssim", r.mean_pairwise_ssim},
                       {"label_agreement", r.label_agreement}});
    return {{"samples_per_signal", samples_per_signal},
            {"singleton", singleton},
            {"mean_ssim", mean_ssim},
            {"mean_agreement", mean_agreement},
            {"per_signal", per},
            {"run_meta", run_meta}};
}

ConsistencyReport consistency(const GenerateFn& gen, const torch::Tensor& signals,
                              const ClassifierFn& classifier, int64_t samples_per_signal,
                              uint64_t seed) {
    TORCH_CHECK(samples_per_signal >= 1, "consistency: need at least one sample per signal");
    ConsistencyReport report;
    report.samples_per_signal = samples_per_signal;
    report.singleton = samples_per_signal == 1;
    const int64_t n = signals.size(0);
    if (report.singleton) {
        report.run_meta["note"] = "single sample per signal: dispersion undefined";
        return report;
    }
    double total_ssim = 0.0, total_agree = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        std::vector<torch::Tensor> samples;
        std::vector<int64_t> labels;
        for (int64_t r = 0; r < samples_per_signal; ++r) {
            auto img = gen(signals[i], mix_seed(seed, uint64_t(i) * samples_per_signal + r));
            labels.push_back(classifier(img.unsqueeze(0)).argmax(1).item<int64_t>());
            samples.push_back(img.to(torch::kFloat64));
        }
        double ssim_sum = 0.0, agree_sum = 0.0;
        int64_t pairs = 0;
        for (size_t a = 0; a < samples.size(); ++a)
            for (size_t b = a + 1; b < samples.size(); ++b, ++pairs) {
                ssim_sum += ssim_global(samples[a], samples[b]).item<double>();
                agree_sum += labels[a] == labels[b] ? 1.0 : 0.0;
            }
        ConsistencyRecord rec;
        rec.index = i;
        rec.mean_pairwise_ssim = ssim_sum / double(pairs);
        rec.label_agreement = agree_sum / double(pairs);
        total_ssim += rec.mean_pairwise_ssim;
        total_agree += rec.label_agreement;
        report.per_signal.push_back(rec);
    }
    report.mean_ssim = total_ssim / double(n);
    report.mean_agreement = total_agree / double(n);
    return report;
}

}  // namespace mindiff
