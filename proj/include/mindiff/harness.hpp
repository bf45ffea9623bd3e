#ifndef MINDIFF_HARNESS_HPP
#define MINDIFF_HARNESS_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mindiff/evaluate.hpp"
#include "mindiff/silhouette.hpp"
#include "mindiff/synth_data.hpp"

namespace mindiff {

struct StageEpochs {
    int64_t encoder = 50;
    int64_t silhouette = 150;
    int64_t finetune = 100;
    int64_t control = 100;
    int64_t autoencoder = 100;
    int64_t diffusion = 100;
    int64_t classifier = 30;
};

// Layered run configuration: preset defaults, then JSON / CLI overrides.
struct RunConfig {
    std::string preset = "god-like";  // god-like (N=512) | bold-like (N=128)
    std::filesystem::path home;       // default: $MINDIFF_HOME or ./mindiff-home
    uint64_t seed = 0;

    DatasetConfig data;
    CorpusConfig corpus;
    EncoderConfig encoder;
    AutoencoderConfig ae;
    DenoiserConfig net;

    int64_t timesteps = 1000;
    ScheduleKind kind = ScheduleKind::Linear;
    int64_t sample_steps = 50;
    double lambda_align = 0.1;
    // a3/b3 shrink the lasso terms: at this parameter count the textbook 1e-3
    // swamps the data terms and collapses the decoder to a constant image
    SilhouetteLossWeights sil_weights{.a3 = 1e-6, .b3 = 1e-6};
    StageEpochs epochs;
    double lr_pretrain = 5e-3;   // MAE encoder pretraining
    double lr_finetune = 1e-4;   // AdamW, betas (0.9, 0.999), eps 1e-8
    double lr_control = 1e-4;    // AdamW, betas (0.9, 0.999), eps 1e-8
    double lr_diffusion = 1e-3;
    int64_t batch_size = 32;
    int64_t eval_n_way = 5;
    int64_t eval_trials = 100;

    static RunConfig for_preset(const std::string& name);
    void apply_overrides(const nlohmann::json& patch);  // merge-patch semantics
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    uint64_t config_hash() const;
};

// Append-only JSONL experiment log; every checkpoint gets an entry.
class ExperimentLedger {
public:
    explicit ExperimentLedger(const std::filesystem::path& path);
    int64_t append(const std::string& stage, uint64_t config_hash,
                   const std::string& checkpoint, int64_t wall_ms, nlohmann::json extra = {});
    std::vector<nlohmann::json> entries() const;

private:
    std::filesystem::path path_;
};

// Finetune arms and control arms used by the ablation.
enum class FinetuneArm { NoAlign, Align };
enum class ControlArm { Baseline, Full, FresOff };

std::string arm_name(FinetuneArm a);
std::string arm_name(ControlArm a);

class Harness {
public:
    explicit Harness(RunConfig cfg, bool take_lock = true);
    ~Harness();

    const RunConfig& config() const { return cfg_; }
    std::filesystem::path root() const;

    // stage directories
    std::filesystem::path data_dir() const;
    std::filesystem::path corpus_dir() const;
    std::filesystem::path encoder_dir() const;
    std::filesystem::path silhouette_dir() const;
    std::filesystem::path diffusion_dir() const;
    std::filesystem::path classifier_dir() const;
    std::filesystem::path finetune_dir(FinetuneArm arm) const;
    std::filesystem::path control_dir(ControlArm arm) const;

    // Stage commands. Each writes a checkpoint and a ledger entry; missing
    // dependencies raise std::runtime_error naming the stage to run first.
    void gen_data(bool force = false);
    void train_encoder(bool resume = false);
    void train_silhouette_stage(bool resume = false);

    // eps-prediction finetuning (plus the weighted alignment term for the
    // Align arm); trains the diffusion base and classifier first if missing.
    void train_finetune(FinetuneArm arm, bool resume = false);
    void train_control_stage(ControlArm arm, bool resume = false);

    MetricsReport run_eval(std::optional<ControlArm> control,
                           FinetuneArm finetune = FinetuneArm::Align);
    nlohmann::json run_ablation();
    nlohmann::json run_consistency(int64_t samples_per_signal,
                                   std::optional<ControlArm> control = ControlArm::Full);
    void export_grid(const std::filesystem::path& out_ppm, int64_t count,
                     std::optional<ControlArm> control = ControlArm::Full);

    // human-readable parameter-freeze plan, printed by --dry-run
    static std::string freeze_plan();

    // loads everything an arm needs for generation
    GenerateFn generator_for(std::optional<ControlArm> control, FinetuneArm finetune);

private:
    struct Loaded;
    void require(const std::filesystem::path& dir, const std::string& stage) const;
    SynthDataset& dataset();
    void ensure_diffusion_base();
    void ensure_classifier();

    RunConfig cfg_;
    bool locked_ = false;
    std::optional<SynthDataset> ds_;
    std::optional<ExperimentLedger> ledger_;
    ExperimentLedger& ledger();
};

// Writes images [n,3,S,S] as a binary PPM grid with `cols` per row.
void write_ppm_grid(const torch::Tensor& images, int64_t cols,
                    const std::filesystem::path& path);

}  // namespace mindiff

#endif
