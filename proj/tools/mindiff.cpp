#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mindiff/harness.hpp"

using namespace mindiff;

namespace {

struct CommonOpts {
    std::string preset = "god-like";
    std::string home;
    std::string config_file;
    uint64_t seed = 0;
    bool seed_set = false;
    std::vector<std::string> overrides;  // key=value dotted paths
    bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--preset", o.preset, "dataset preset: god-like (N=512) | bold-like (N=128)");
    cmd->add_option("--home", o.home, "output root (default: $MINDIFF_HOME or ./mindiff-home)");
    cmd->add_option("--config", o.config_file, "JSON config layered over the preset defaults");
    cmd->add_option("--seed", o.seed, "master seed")->each([&](const std::string&) {
        o.seed_set = true;
    });
    cmd->add_option("--set", o.overrides,
                    "dotted config override, e.g. --set epochs.finetune=20");
    cmd->add_flag("--dry-run", o.dry_run, "validate config and print the freeze plan");
}

nlohmann::json parse_override(const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw CLI::ValidationError("--set expects key=value, got: " + kv);
    std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    nlohmann::json leaf;
    try {
        leaf = nlohmann::json::parse(val);
    } catch (const nlohmann::json::parse_error&) {
        leaf = val;  // bare string
    }
    // build nested object from the dotted path, innermost first
    nlohmann::json node = leaf;
    size_t pos;
    while ((pos = key.rfind('.')) != std::string::npos) {
        nlohmann::json wrap;
        wrap[key.substr(pos + 1)] = node;
        node = wrap;
        key = key.substr(0, pos);
    }
    nlohmann::json out;
    out[key] = node;
    return out;
}

RunConfig build_config(const CommonOpts& o) {
    auto cfg = RunConfig::for_preset(o.preset);
    if (!o.config_file.empty()) {
        std::ifstream in(o.config_file);
        if (!in) throw CLI::ValidationError("cannot read config file: " + o.config_file);
        nlohmann::json patch;
        in >> patch;
        cfg.apply_overrides(patch);
    }
    for (const auto& kv : o.overrides) cfg.apply_overrides(parse_override(kv));
    if (!o.home.empty()) cfg.home = o.home;
    if (o.seed_set) cfg.seed = o.seed;
    return cfg;
}

bool handle_dry_run(const CommonOpts& o, const RunConfig& cfg) {
    if (!o.dry_run) return false;
    std::cout << "config (hash " << cfg.config_hash() << "):\n"
              << cfg.to_json().dump(2) << "\n\n"
              << Harness::freeze_plan();
    return true;
}

void print_report_row(const MetricsReport& r) {
    std::cout << "Acc (" << r.n << "-way, " << r.trials << " trials)\tPCC\tSSIM\n"
              << r.acc_n_way * 100.0 << "\t" << r.pcc << "\t" << r.ssim << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy fMRI-to-image diffusion pipeline"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, ablate_o, cons_o, eval_o, grid_o;
    bool force = false, resume = false;
    std::string stage, control_arm = "full", finetune_arm = "align", grid_out = "grid.ppm";
    int64_t cons_s = 4, grid_count = 8;
    bool no_control = false;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset + corpus");
    add_common(gen, gen_o);
    gen->add_flag("--force", force, "overwrite an existing dataset");

    auto* train = app.add_subcommand("train", "train one stage");
    add_common(train, train_o);
    train->add_option("stage", stage, "encoder | silhouette | finetune | control")->required();
    train->add_flag("--resume", resume, "continue from the stage's last checkpoint");
    train->add_option("--control-arm", control_arm, "baseline | full | fres_off");
    train->add_option("--finetune-arm", finetune_arm, "align | noalign");

    auto* ablate = app.add_subcommand("ablate", "run the 4-arm + F_res ablation");
    add_common(ablate, ablate_o);

    auto* cons = app.add_subcommand("consistency", "sampling-dispersion analysis");
    add_common(cons, cons_o);
    cons->add_option("-S,--samples", cons_s, "samples per signal (default 4)");
    cons->add_flag("--no-control", no_control, "evaluate the uncontrolled model");

    auto* eval = app.add_subcommand("eval", "evaluate a trained arm on the test split");
    add_common(eval, eval_o);
    eval->add_flag("--no-control", no_control, "evaluate the uncontrolled model");
    eval->add_option("--control-arm", control_arm, "baseline | full | fres_off");
    eval->add_option("--finetune-arm", finetune_arm, "align | noalign");

    auto* grid = app.add_subcommand("export-grid", "stimulus-vs-reconstruction image grid (PPM)");
    add_common(grid, grid_o);
    grid->add_option("-o,--out", grid_out, "output .ppm path");
    grid->add_option("--count", grid_count, "number of test samples");
    grid->add_flag("--no-control", no_control, "use the uncontrolled model");

    CLI11_PARSE(app, argc, argv);

    auto parse_control = [&]() -> std::optional<ControlArm> {
        if (no_control) return std::nullopt;
        if (control_arm == "baseline") return ControlArm::Baseline;
        if (control_arm == "full") return ControlArm::Full;
        if (control_arm == "fres_off") return ControlArm::FresOff;
        throw CLI::ValidationError("unknown control arm: " + control_arm);
    };
    auto parse_finetune = [&]() {
        if (finetune_arm == "align") return FinetuneArm::Align;
        if (finetune_arm == "noalign") return FinetuneArm::NoAlign;
        throw CLI::ValidationError("unknown finetune arm: " + finetune_arm);
    };

    try {
        if (gen->parsed()) {
            auto cfg = build_config(gen_o);
            if (handle_dry_run(gen_o, cfg)) return 0;
            Harness h(cfg);
            h.gen_data(force);
            std::cout << "dataset written to " << h.data_dir() << "\n";
        } else if (train->parsed()) {
            auto cfg = build_config(train_o);
            if (handle_dry_run(train_o, cfg)) return 0;
            Harness h(cfg);
            if (stage == "encoder") {
                h.train_encoder(resume);
            } else if (stage == "silhouette") {
                h.train_silhouette_stage(resume);
            } else if (stage == "finetune") {
                h.train_finetune(parse_finetune(), resume);
            } else if (stage == "control") {
                h.train_control_stage(*parse_control(), resume);
            } else {
                throw CLI::ValidationError("unknown stage: " + stage);
            }
            std::cout << "stage " << stage << " complete\n";
        } else if (ablate->parsed()) {
            auto cfg = build_config(ablate_o);
            if (handle_dry_run(ablate_o, cfg)) return 0;
            Harness h(cfg);
            auto table = h.run_ablation();
            std::cout << table.dump(2) << "\n";
        } else if (cons->parsed()) {
            auto cfg = build_config(cons_o);
            if (handle_dry_run(cons_o, cfg)) return 0;
            Harness h(cfg);
            std::cout << h.run_consistency(cons_s, parse_control()).dump(2) << "\n";
        } else if (eval->parsed()) {
            auto cfg = build_config(eval_o);
            if (handle_dry_run(eval_o, cfg)) return 0;
            Harness h(cfg);
            print_report_row(h.run_eval(parse_control(), parse_finetune()));
        } else if (grid->parsed()) {
            auto cfg = build_config(grid_o);
            if (handle_dry_run(grid_o, cfg)) return 0;
            Harness h(cfg);
            h.export_grid(grid_out, grid_count, parse_control());
            std::cout << "grid written to " << grid_out << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
