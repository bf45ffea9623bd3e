#include "mindiff/harness.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mindiff/embedder.hpp"
#include "mindiff/rng.hpp"
#include "mindiff/tensor_io.hpp"

namespace mindiff {

namespace fs = std::filesystem;

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

const char* kind_name(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

int64_t now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

nlohmann::json epochs_to_json(const StageEpochs& e) {
    return {{"encoder", e.encoder},       {"silhouette", e.silhouette},
            {"finetune", e.finetune},     {"control", e.control},
            {"autoencoder", e.autoencoder}, {"diffusion", e.diffusion},
            {"classifier", e.classifier}};
}

StageEpochs epochs_from_json(const nlohmann::json& j) {
    StageEpochs e;
    e.encoder = j.at("encoder");
    e.silhouette = j.at("silhouette");
    e.finetune = j.at("finetune");
    e.control = j.at("control");
    e.autoencoder = j.at("autoencoder");
    e.diffusion = j.at("diffusion");
    e.classifier = j.at("classifier");
    return e;
}

void write_json(const fs::path& p, const nlohmann::json& j) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    out << std::setw(2) << j << "\n";
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("missing file: " + p.string());
    nlohmann::json j;
    in >> j;
    return j;
}

void save_module(torch::nn::Module& m, const fs::path& p) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    torch::serialize::OutputArchive a;
    m.save(a);
    a.save_to(p.string());
}

void load_module(torch::nn::Module& m, const fs::path& p) {
    torch::serialize::InputArchive a;
    a.load_from(p.string());
    m.load(a);
}

}  // namespace

RunConfig RunConfig::for_preset(const std::string& name) {
    RunConfig cfg;
    cfg.preset = name;
    if (name == "god-like") {
        cfg.data.n_voxels = 512;
    } else if (name == "bold-like") {
        cfg.data.n_voxels = 128;
    } else {
        throw std::invalid_argument("unknown preset: " + name +
                                    " (expected god-like or bold-like)");
    }
    cfg.encoder.n_voxels = cfg.data.n_voxels;
    cfg.net.context_dim = cfg.encoder.embed_dim;
    return cfg;
}

nlohmann::json RunConfig::to_json() const {
    return {{"preset", preset},
            {"home", home.string()},
            {"seed", seed},
            {"data", data.to_json()},
            {"corpus", {{"signals", corpus.signals}, {"images", corpus.images},
                        {"seed", corpus.seed}}},
            {"encoder", encoder.to_json()},
            {"ae", ae.to_json()},
            {"net", net.to_json()},
            {"timesteps", timesteps},
            {"kind", kind_name(kind)},
            {"sample_steps", sample_steps},
            {"lambda_align", lambda_align},
            {"sil_weights",
             {{"a1", sil_weights.a1}, {"a2", sil_weights.a2}, {"a3", sil_weights.a3},
              {"b1", sil_weights.b1}, {"b2", sil_weights.b2}, {"b3", sil_weights.b3},
              {"b4", sil_weights.b4}, {"c1", sil_weights.c1}, {"c2", sil_weights.c2}}},
            {"epochs", epochs_to_json(epochs)},
            {"lr_pretrain", lr_pretrain},
            {"lr_finetune", lr_finetune},
            {"lr_control", lr_control},
            {"lr_diffusion", lr_diffusion},
            {"batch_size", batch_size},
            {"eval_n_way", eval_n_way},
            {"eval_trials", eval_trials}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig cfg;
    cfg.preset = j.at("preset");
    cfg.home = fs::path(j.at("home").get<std::string>());
    cfg.seed = j.at("seed");
    cfg.data = DatasetConfig::from_json(j.at("data"));
    cfg.corpus.signals = j.at("corpus").at("signals");
    cfg.corpus.images = j.at("corpus").at("images");
    cfg.corpus.seed = j.at("corpus").at("seed");
    cfg.encoder = EncoderConfig::from_json(j.at("encoder"));
    cfg.ae = AutoencoderConfig::from_json(j.at("ae"));
    cfg.net = DenoiserConfig::from_json(j.at("net"));
    cfg.timesteps = j.at("timesteps");
    cfg.kind = schedule_kind_from_string(j.at("kind"));
    cfg.sample_steps = j.at("sample_steps");
    cfg.lambda_align = j.at("lambda_align");
    {
        const auto& w = j.at("sil_weights");
        cfg.sil_weights = {w.at("a1"), w.at("a2"), w.at("a3"), w.at("b1"), w.at("b2"),
                           w.at("b3"), w.at("b4"), w.at("c1"), w.at("c2")};
        for (double v : {cfg.sil_weights.a1, cfg.sil_weights.a2, cfg.sil_weights.a3,
                         cfg.sil_weights.b1, cfg.sil_weights.b2, cfg.sil_weights.b3,
                         cfg.sil_weights.b4, cfg.sil_weights.c1, cfg.sil_weights.c2})
            if (v < 0) throw std::invalid_argument("silhouette weights must be >= 0");
    }
    cfg.epochs = epochs_from_json(j.at("epochs"));
    cfg.lr_pretrain = j.at("lr_pretrain");
    cfg.lr_finetune = j.at("lr_finetune");
    cfg.lr_control = j.at("lr_control");
    cfg.lr_diffusion = j.at("lr_diffusion");
    cfg.batch_size = j.at("batch_size");
    cfg.eval_n_way = j.at("eval_n_way");
    cfg.eval_trials = j.at("eval_trials");
    if (cfg.lambda_align < 0) throw std::invalid_argument("lambda_align must be >= 0");
    return cfg;
}

void RunConfig::apply_overrides(const nlohmann::json& patch) {
    auto j = to_json();
    j.merge_patch(patch);
    *this = from_json(j);
}

uint64_t RunConfig::config_hash() const {
    auto j = to_json();
    j.erase("home");  // the hash identifies the experiment, not its location
    return fnv1a(j.dump());
}

ExperimentLedger::ExperimentLedger(const fs::path& path) : path_(path) {
    fs::create_directories(path.parent_path());
}

int64_t ExperimentLedger::append(const std::string& stage, uint64_t config_hash,
                                 const std::string& checkpoint, int64_t wall_ms,
                                 nlohmann::json extra) {
    int64_t id = int64_t(entries().size());
    nlohmann::json rec = {{"id", id},
                          {"stage", stage},
                          {"config_hash", config_hash},
                          {"checkpoint", checkpoint},
                          {"wall_ms", wall_ms}};
    if (!extra.is_null() && !extra.empty()) rec["extra"] = extra;
    std::ofstream out(path_, std::ios::app);
    out << rec.dump() << "\n";
    return id;
}

std::vector<nlohmann::json> ExperimentLedger::entries() const {
    std::vector<nlohmann::json> out;
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    return out;
}

std::string arm_name(FinetuneArm a) { return a == FinetuneArm::Align ? "align" : "noalign"; }

std::string arm_name(ControlArm a) {
    switch (a) {
        case ControlArm::Baseline: return "baseline";
        case ControlArm::Full: return "full";
        case ControlArm::FresOff: return "fres_off";
    }
    return "?";
}

Harness::Harness(RunConfig cfg, bool take_lock) : cfg_(std::move(cfg)) {
    if (cfg_.home.empty()) {
        const char* env = std::getenv("MINDIFF_HOME");
        cfg_.home = env && *env ? fs::path(env) : fs::path("mindiff-home");
    }
    fs::create_directories(root());
    if (take_lock) {
        auto lock = root() / ".lock";
        if (fs::exists(lock))
            throw std::runtime_error("experiment dir " + root().string() +
                                     " is locked by another process (remove " + lock.string() +
                                     " if stale)");
        std::ofstream(lock) << "locked\n";
        locked_ = true;
    }
}

Harness::~Harness() {
    if (locked_) {
        std::error_code ec;
        fs::remove(root() / ".lock", ec);
    }
}

fs::path Harness::root() const { return cfg_.home / cfg_.preset; }
fs::path Harness::data_dir() const { return root() / "data"; }
fs::path Harness::corpus_dir() const { return root() / "corpus"; }
fs::path Harness::encoder_dir() const { return root() / "encoder"; }
fs::path Harness::silhouette_dir() const { return root() / "silhouette"; }
fs::path Harness::diffusion_dir() const { return root() / "diffusion"; }
fs::path Harness::classifier_dir() const { return root() / "classifier"; }
fs::path Harness::finetune_dir(FinetuneArm arm) const {
    return root() / ("finetune_" + arm_name(arm));
}
fs::path Harness::control_dir(ControlArm arm) const { return root() / ("control_" + arm_name(arm)); }

ExperimentLedger& Harness::ledger() {
    if (!ledger_) ledger_.emplace(root() / "ledger.jsonl");
    return *ledger_;
}

void Harness::require(const fs::path& dir, const std::string& stage) const {
    if (!fs::exists(dir))
        throw std::runtime_error("missing dependency checkpoint " + dir.string() +
                                 ": run `mindiff " + stage + "` first");
}

SynthDataset& Harness::dataset() {
    if (!ds_) {
        require(data_dir(), "gen-data");
        ds_ = ingest_dataset(data_dir());
    }
    return *ds_;
}

void Harness::gen_data(bool force) {
    if (fs::exists(data_dir())) {
        if (!force)
            throw std::runtime_error("dataset already exists at " + data_dir().string() +
                                     " (pass --force to overwrite)");
        fs::remove_all(data_dir());
        fs::remove_all(corpus_dir());
        ds_.reset();
    }
    auto t0 = now_ms();
    auto data_cfg = cfg_.data;
    data_cfg.seed = cfg_.seed;
    auto ds = build_paired_dataset(data_cfg);
    save_dataset(ds, data_dir());
    auto corpus_cfg = cfg_.corpus;
    corpus_cfg.seed = cfg_.seed ^ 0xC0FFEEull;
    auto corpus = build_unlabeled_corpus(corpus_cfg, data_cfg, ds.mixing, ds.spec_seeds());
    save_corpus(corpus, corpus_dir());
    ledger().append("gen-data", cfg_.config_hash(), data_dir().string(), now_ms() - t0,
                    {{"n_voxels", data_cfg.n_voxels},
                     {"k", data_cfg.k},
                     {"train", data_cfg.train},
                     {"signals_checksum", tensor_checksum(ds.train.signals)}});
}

void Harness::train_encoder(bool resume) {
    auto& ds = dataset();
    require(corpus_dir(), "gen-data");
    auto corpus = load_corpus(corpus_dir());
    auto t0 = now_ms();
    auto enc_cfg = cfg_.encoder;
    enc_cfg.n_voxels = ds.cfg.n_voxels;
    torch::manual_seed(cfg_.seed ^ 0xE4Cull);  // init must not depend on ambient RNG state
    FmriEncoder enc{nullptr};
    bool resumed = resume && fs::exists(encoder_dir() / "config.json");
    enc = resumed ? load_encoder(encoder_dir(), enc_cfg.n_voxels) : FmriEncoder(enc_cfg);
    auto stats = pretrain_encoder(enc, ds.normalize(corpus.signals), cfg_.epochs.encoder,
                                  cfg_.lr_pretrain, cfg_.batch_size, cfg_.seed ^ 0xE4Cull);
    save_encoder(enc, encoder_dir(), tensor_checksum(corpus.signals));
    ledger().append("train-encoder", cfg_.config_hash(), encoder_dir().string(), now_ms() - t0,
                    {{"initial_loss", stats.initial_loss},
                     {"final_loss", stats.final_loss},
                     {"resumed", resumed}});
}

void Harness::train_silhouette_stage(bool resume) {
    auto& ds = dataset();
    require(corpus_dir(), "gen-data");
    auto corpus = load_corpus(corpus_dir());
    auto t0 = now_ms();
    if (resume && fs::exists(silhouette_dir() / "config.json")) {
        // silhouette training restarts from scratch; a finished checkpoint stands
        ledger().append("train-silhouette", cfg_.config_hash(), silhouette_dir().string(), 0,
                        {{"resumed", true}, {"note", "checkpoint already complete"}});
        return;
    }
    SilhouetteTrainConfig scfg;
    scfg.encoder_epochs = cfg_.epochs.silhouette;
    scfg.decoder_epochs = cfg_.epochs.silhouette;
    scfg.batch_size = cfg_.batch_size;
    scfg.weights = cfg_.sil_weights;
    scfg.seed = cfg_.seed ^ 0x511ull;
    auto nets = train_silhouette(ds.normalize(ds.train.signals), ds.train.images, corpus.images,
                                 scfg);
    save_silhouette(nets, silhouette_dir());
    ledger().append("train-silhouette", cfg_.config_hash(), silhouette_dir().string(),
                    now_ms() - t0,
                    {{"encoder_final", nets.encoder_curve.back()},
                     {"decoder_final", nets.decoder_curve.back()}});
}

void Harness::ensure_diffusion_base() {
    if (fs::exists(diffusion_dir() / "config.json")) return;
    auto& ds = dataset();
    auto t0 = now_ms();
    PretrainConfig pcfg;
    pcfg.ae = cfg_.ae;
    pcfg.net = cfg_.net;
    pcfg.timesteps = cfg_.timesteps;
    pcfg.kind = cfg_.kind;
    pcfg.ae_epochs = cfg_.epochs.autoencoder;
    pcfg.denoiser_epochs = cfg_.epochs.diffusion;
    pcfg.lr = cfg_.lr_diffusion;
    pcfg.batch_size = cfg_.batch_size;
    pcfg.seed = cfg_.seed ^ 0xD1FFull;
    auto model = pretrain_base(ds.train.images, pcfg);
    NoiseSchedule sched(cfg_.timesteps, cfg_.kind);
    save_diffusion(model, sched, diffusion_dir());
    ledger().append("pretrain-diffusion", cfg_.config_hash(), diffusion_dir().string(),
                    now_ms() - t0,
                    {{"ae_psnr", model.ae_psnr},
                     {"denoiser_final", model.denoiser_curve.back()}});
}

void Harness::ensure_classifier() {
    if (fs::exists(classifier_dir() / "config.json")) return;
    auto& ds = dataset();
    auto t0 = now_ms();
    torch::manual_seed(cfg_.seed ^ 0xC1Full);
    ImageClassifier clf(ds.cfg.k);
    double acc = train_classifier(clf, ds.train.images, ds.train.classes, cfg_.epochs.classifier,
                                  1e-3, cfg_.batch_size, cfg_.seed ^ 0xC1Full);
    write_json(classifier_dir() / "config.json",
               {{"k", ds.cfg.k}, {"feat_dim", clf->feat_dim()}, {"train_acc", acc}});
    save_module(*clf, classifier_dir() / "model.pt");
    ledger().append("train-classifier", cfg_.config_hash(), classifier_dir().string(),
                    now_ms() - t0, {{"train_acc", acc}});
}

void Harness::train_finetune(FinetuneArm arm, bool resume) {
    auto& ds = dataset();
    require(encoder_dir(), "train encoder");
    ensure_diffusion_base();
    ensure_classifier();
    auto t0 = now_ms();
    auto dir = finetune_dir(arm);
    torch::manual_seed(cfg_.seed ^ 0xF17Eull ^ (arm == FinetuneArm::Align ? 1ull : 0ull));

    NoiseSchedule sched(1, ScheduleKind::Linear);
    auto base = load_diffusion(diffusion_dir(), &sched);
    auto clf_meta = read_json(classifier_dir() / "config.json");
    ImageClassifier clf(clf_meta.at("k").get<int64_t>(), clf_meta.at("feat_dim").get<int64_t>());
    load_module(*clf, classifier_dir() / "model.pt");
    clf->eval();

    FmriEncoder enc{nullptr};
    AlignmentHead head(cfg_.encoder.embed_dim, clf->feat_dim());
    Denoiser net = base.net;
    int64_t epochs_done = 0;
    bool resumed = resume && fs::exists(dir / "meta.json");
    if (resumed) {
        enc = load_encoder(dir / "encoder", ds.cfg.n_voxels);
        load_module(*net, dir / "denoiser.pt");
        load_module(*head, dir / "align_head.pt");
        epochs_done = read_json(dir / "meta.json").value("epochs_done", int64_t(0));
    } else {
        enc = load_encoder(encoder_dir(), ds.cfg.n_voxels);
    }

    auto signals = ds.normalize(ds.train.signals);
    torch::Tensor z0, feats;
    {
        torch::NoGradGuard ng;
        base.ae->eval();
        z0 = base.ae->encode(ds.train.images);
        feats = clf->features(ds.train.images);
    }

    set_finetune_trainable(net);
    std::vector<torch::Tensor> trainable;
    for (auto& p : enc->parameters()) trainable.push_back(p);
    for (auto& p : head->parameters()) trainable.push_back(p);
    for (auto& p : net->parameters())
        if (p.requires_grad()) trainable.push_back(p);
    torch::optim::AdamW opt(trainable,
                            torch::optim::AdamWOptions(cfg_.lr_finetune).betas({0.9, 0.999}).eps(
                                1e-8));

    const bool use_align = arm == FinetuneArm::Align;
    const int64_t n = signals.size(0);
    const int64_t T = sched.timesteps();
    torch::manual_seed(mix_seed(cfg_.seed ^ 0xF17Eull, uint64_t(epochs_done) + 1));
    enc->train();
    net->train();
    std::vector<double> curve;
    for (int64_t epoch = 0; epoch < cfg_.epochs.finetune; ++epoch) {
        auto perm = torch::randperm(n, torch::kInt64);
        double total = 0.0;
        int64_t batches = 0;
        for (int64_t s = 0; s < n; s += cfg_.batch_size, ++batches) {
            auto idx = perm.slice(0, s, std::min(s + cfg_.batch_size, n));
            auto ctx = enc->encode(signals.index_select(0, idx));
            auto zb = z0.index_select(0, idx);
            auto t = torch::randint(1, T + 1, {idx.size(0)}, torch::kInt64);
            auto eps = torch::randn_like(zb);
            auto loss = denoise_loss(net, sched, zb, t, ctx, eps);
            if (use_align)
                loss = loss + cfg_.lambda_align *
                                  align_loss(head(mean_pool(ctx)), feats.index_select(0, idx));
            if (!loss.isfinite().item<bool>())
                throw std::runtime_error("train_finetune: diverged at epoch " +
                                         std::to_string(epoch));
            opt.zero_grad();
            loss.backward();
            opt.step();
            total += loss.item<double>();
        }
        curve.push_back(total / double(batches));
    }
    enc->eval();
    net->eval();
    for (auto& p : net->parameters()) p.set_requires_grad(true);

    save_encoder(enc, dir / "encoder", 0);
    save_module(*net, dir / "denoiser.pt");
    save_module(*head, dir / "align_head.pt");
    nlohmann::json meta = {{"arm", arm_name(arm)},
                           {"use_align", use_align},
                           {"lambda_align", use_align ? cfg_.lambda_align : 0.0},
                           {"epochs_done", epochs_done + cfg_.epochs.finetune},
                           {"curve", curve}};
    if (resumed) meta["resumed_from_epoch"] = epochs_done;
    write_json(dir / "meta.json", meta);
    ledger().append("train-finetune-" + arm_name(arm), cfg_.config_hash(), dir.string(),
                    now_ms() - t0,
                    {{"final_loss", curve.back()},
                     {"epochs_done", epochs_done + cfg_.epochs.finetune},
                     {"resumed", resumed}});
}

void Harness::train_control_stage(ControlArm arm, bool resume) {
    auto& ds = dataset();
    const FinetuneArm ft = arm == ControlArm::Baseline ? FinetuneArm::NoAlign : FinetuneArm::Align;
    require(finetune_dir(ft), "train finetune");
    require(silhouette_dir(), "train silhouette");
    auto t0 = now_ms();
    auto dir = control_dir(arm);

    NoiseSchedule sched(1, ScheduleKind::Linear);
    auto base = load_diffusion(diffusion_dir(), &sched);
    load_module(*base.net, finetune_dir(ft) / "denoiser.pt");
    base.net->eval();
    auto enc = load_encoder(finetune_dir(ft) / "encoder", ds.cfg.n_voxels);
    auto sil = load_silhouette(silhouette_dir());

    auto signals = ds.normalize(ds.train.signals);
    torch::Tensor z0, ctx, sil_lat;
    {
        torch::NoGradGuard ng;
        base.ae->eval();
        z0 = base.ae->encode(ds.train.images);
        ctx = enc->encode(signals);
        sil_lat = base.ae->encode(extract_silhouette(sil.decoder, signals));
    }

    ControlTrainConfig ccfg;
    ccfg.epochs = cfg_.epochs.control;
    ccfg.lr = cfg_.lr_control;
    ccfg.batch_size = cfg_.batch_size;
    ccfg.seed = cfg_.seed ^ (0xC0DEull + uint64_t(arm));
    ccfg.use_fres = arm == ControlArm::Full;
    ControlModel init{nullptr};
    bool resumed = resume && fs::exists(dir / "config.json");
    if (resumed) init = load_control(dir).model;
    auto trained = train_control(base.net, sched, z0, ctx, sil_lat, signals, ccfg, init);
    save_control(trained, dir);
    write_json(dir / "meta.json",
               {{"arm", arm_name(arm)}, {"finetune_arm", arm_name(ft)}, {"resumed", resumed}});
    ledger().append("train-control-" + arm_name(arm), cfg_.config_hash(), dir.string(),
                    now_ms() - t0, {{"final_loss", trained.curve.back()}, {"resumed", resumed}});
}

GenerateFn Harness::generator_for(std::optional<ControlArm> control, FinetuneArm finetune) {
    auto& ds = dataset();
    require(finetune_dir(finetune), "train finetune");
    NoiseSchedule sched(1, ScheduleKind::Linear);
    auto base = load_diffusion(diffusion_dir(), &sched);
    load_module(*base.net, finetune_dir(finetune) / "denoiser.pt");
    base.net->eval();
    PipelineHandles h;
    h.encoder = load_encoder(finetune_dir(finetune) / "encoder", ds.cfg.n_voxels);
    h.net = base.net;
    h.ae = base.ae;
    h.steps = cfg_.sample_steps;
    if (control) {
        require(control_dir(*control), "train control");
        require(silhouette_dir(), "train silhouette");
        h.sil_decoder = load_silhouette(silhouette_dir()).decoder;
        h.control = load_control(control_dir(*control)).model;
    }
    return make_pipeline_generator(h, sched);
}

MetricsReport Harness::run_eval(std::optional<ControlArm> control, FinetuneArm finetune) {
    auto& ds = dataset();
    ensure_classifier();
    auto t0 = now_ms();
    auto clf_meta = read_json(classifier_dir() / "config.json");
    ImageClassifier clf(clf_meta.at("k").get<int64_t>(), clf_meta.at("feat_dim").get<int64_t>());
    load_module(*clf, classifier_dir() / "model.pt");
    clf->eval();
    ClassifierFn scores = [clf](const torch::Tensor& batch) mutable {
        torch::NoGradGuard ng;
        return clf->forward(batch);
    };
    auto gen = generator_for(control, finetune);
    EvalConfig ecfg;
    ecfg.n_way = cfg_.eval_n_way;
    ecfg.trials = cfg_.eval_trials;
    ecfg.seed = cfg_.seed ^ 0xE7A1ull;
    std::string arm = (control ? "control_" + arm_name(*control) : "plain") + std::string("_") +
                      arm_name(finetune);
    ecfg.run_meta = {{"config_hash", cfg_.config_hash()},
                     {"preset", cfg_.preset},
                     {"arm", arm},
                     {"sample_steps", cfg_.sample_steps}};
    auto report = evaluate(gen, ds.normalize(ds.test.signals), ds.test.images, ds.test.classes,
                           scores, ecfg);
    auto path = root() / "reports" / ("eval_" + arm + ".json");
    fs::create_directories(path.parent_path());
    report.save(path.string());
    int64_t id = ledger().append("eval-" + arm, cfg_.config_hash(), path.string(), now_ms() - t0,
                                 {{"acc", report.acc_n_way},
                                  {"pcc", report.pcc},
                                  {"ssim", report.ssim}});
    (void)id;
    return report;
}

nlohmann::json Harness::run_ablation() {
    auto t0 = now_ms();
    struct ArmSpec {
        std::string name;
        std::optional<ControlArm> control;
        FinetuneArm finetune;
    };
    const std::vector<ArmSpec> arms = {
        {"baseline", std::nullopt, FinetuneArm::NoAlign},
        {"+align", std::nullopt, FinetuneArm::Align},
        {"+control", ControlArm::Baseline, FinetuneArm::NoAlign},
        {"full", ControlArm::Full, FinetuneArm::Align},
        {"fres_off", ControlArm::FresOff, FinetuneArm::Align},
    };
    nlohmann::json table = nlohmann::json::object();
    for (const auto& a : arms) {
        auto report = run_eval(a.control, a.finetune);
        table[a.name] = {{"acc", report.acc_n_way}, {"pcc", report.pcc}, {"ssim", report.ssim}};
    }
    nlohmann::json orderings = {
        {"acc_full_gt_baseline",
         table["full"]["acc"].get<double>() > table["baseline"]["acc"].get<double>()},
        {"acc_full_gt_align",
         table["full"]["acc"].get<double>() > table["+align"]["acc"].get<double>()},
        {"acc_align_gt_baseline",
         table["+align"]["acc"].get<double>() > table["baseline"]["acc"].get<double>()},
        {"ssim_control_gt_baseline",
         table["+control"]["ssim"].get<double>() > table["baseline"]["ssim"].get<double>()},
        {"acc_fres_on_gt_off",
         table["full"]["acc"].get<double>() > table["fres_off"]["acc"].get<double>()}};
    nlohmann::json out = {{"preset", cfg_.preset},
                          {"config_hash", cfg_.config_hash()},
                          {"eval_seed", cfg_.seed ^ 0xE7A1ull},
                          {"arms", table},
                          {"orderings", orderings}};
    auto path = root() / "reports" / "ablation.json";
    write_json(path, out);
    ledger().append("ablate", cfg_.config_hash(), path.string(), now_ms() - t0, orderings);
    return out;
}

nlohmann::json Harness::run_consistency(int64_t samples_per_signal,
                                        std::optional<ControlArm> control) {
    auto& ds = dataset();
    ensure_classifier();
    auto t0 = now_ms();
    auto clf_meta = read_json(classifier_dir() / "config.json");
    ImageClassifier clf(clf_meta.at("k").get<int64_t>(), clf_meta.at("feat_dim").get<int64_t>());
    load_module(*clf, classifier_dir() / "model.pt");
    clf->eval();
    ClassifierFn scores = [clf](const torch::Tensor& batch) mutable {
        torch::NoGradGuard ng;
        return clf->forward(batch);
    };
    auto gen = generator_for(control, control ? (*control == ControlArm::Baseline
                                                     ? FinetuneArm::NoAlign
                                                     : FinetuneArm::Align)
                                              : FinetuneArm::Align);
    auto report = consistency(gen, ds.normalize(ds.test.signals), scores, samples_per_signal,
                              cfg_.seed ^ 0xC025ull);
    report.run_meta["config_hash"] = cfg_.config_hash();
    report.run_meta["preset"] = cfg_.preset;
    report.run_meta["arm"] = control ? "control_" + arm_name(*control) : "plain";
    auto j = report.to_json();
    std::string name = "consistency_" +
                       (control ? "control_" + arm_name(*control) : std::string("plain")) + "_S" +
                       std::to_string(samples_per_signal) + ".json";
    auto path = root() / "reports" / name;
    write_json(path, j);
    ledger().append("consistency", cfg_.config_hash(), path.string(), now_ms() - t0,
                    {{"S", samples_per_signal},
                     {"mean_ssim", report.mean_ssim},
                     {"mean_agreement", report.mean_agreement}});
    return j;
}

void Harness::export_grid(const fs::path& out_ppm, int64_t count,
                          std::optional<ControlArm> control) {
    auto& ds = dataset();
    auto t0 = now_ms();
    count = std::min<int64_t>(count, ds.test.size());
    auto gen = generator_for(control, FinetuneArm::Align);
    auto signals = ds.normalize(ds.test.signals);
    std::vector<torch::Tensor> rows;
    for (int64_t i = 0; i < count; ++i) rows.push_back(ds.test.images[i]);
    for (int64_t i = 0; i < count; ++i)
        rows.push_back(gen(signals[i], mix_seed(cfg_.seed ^ 0xE7A1ull, uint64_t(i))));
    write_ppm_grid(torch::stack(rows), count, out_ppm);
    ledger().append("export-grid", cfg_.config_hash(), out_ppm.string(), now_ms() - t0,
                    {{"count", count}});
}

std::string Harness::freeze_plan() {
    return "stage parameter-freeze plan:\n"
           "  encoder     trains: E_fmri (MAE objective)            frozen: everything else\n"
           "  silhouette  trains: E_sil, then D_sil (E_sil frozen)  frozen: everything else\n"
           "  finetune    trains: E_fmri, alignment head,\n"
           "              denoiser cross-attention                  frozen: denoiser body,\n"
           "                                                        autoencoder, classifier\n"
           "  control     trains: F_control clone, zero convs,\n"
           "              F_res                                     frozen: denoiser, E_fmri,\n"
           "                                                        autoencoder, silhouette\n";
}

void write_ppm_grid(const torch::Tensor& images, int64_t cols, const fs::path& path) {
    TORCH_CHECK(images.dim() == 4 && images.size(1) == 3, "write_ppm_grid: expected [n,3,S,S]");
    const int64_t n = images.size(0), s = images.size(2);
    const int64_t rows = (n + cols - 1) / cols;
    auto canvas = torch::zeros({3, rows * s, cols * s});
    for (int64_t i = 0; i < n; ++i) {
        int64_t r = i / cols, c = i % cols;
        canvas.slice(1, r * s, (r + 1) * s).slice(2, c * s, (c + 1) * s) = images[i];
    }
    auto bytes = (canvas.clamp(0, 1) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0})
                     .contiguous();
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << "P6\n" << cols * s << " " << rows * s << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data_ptr<uint8_t>()), bytes.numel());
}

}  // namespace mindiff
