#include <string>

#include <CLI11.hpp>

#include "adaroute/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"dynamic parameter-routing adapters: training, diagnostics, ablations"};
    app.require_subcommand(1);

    std::string config_path, resume_path;
    auto* train = app.add_subcommand("train", "train from a JSON run config");
    train->add_option("config", config_path, "run config (JSON)")->required();
    train->add_option("--resume", resume_path, "checkpoint manifest to resume from");

    std::string ckpt_path, kind, head = "G1", diag_out;
    long stage = -1;
    std::size_t probes = 0;
    auto* diag = app.add_subcommand("diag", "diagnostics over a checkpoint");
    diag->add_option("checkpoint", ckpt_path, "checkpoint manifest (JSON)")->required();
    diag->add_option("--kind", kind, "cka | erf | expert-map | audit")->required();
    diag->add_option("--head", head, "gate head for expert-map (G1,G2,GA,GB,GC)");
    diag->add_option("--stage", stage, "stage index (expert-map, erf)");
    diag->add_option("--probes", probes, "number of probe inputs");
    diag->add_option("--out", diag_out, "output directory (default: checkpoint directory)");

    std::string grid_path;
    auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
    ablate->add_option("grid", grid_path, "grid spec (JSON)")->required();

    std::string arch, adapter_cfg, audit_csv;
    auto* audit = app.add_subcommand("audit", "closed-form trainable-parameter audit");
    audit->add_option("--arch", arch, "toy | swin-b | swin-l | convnext-b | convnext-l")
        ->required();
    audit->add_option("--adapter", adapter_cfg, "run config supplying the adapter settings");
    audit->add_option("--csv", audit_csv, "also write the itemized CSV here");

    bool print_defaults = false;
    auto* config = app.add_subcommand("config", "configuration helpers");
    config->add_flag("--print-defaults", print_defaults, "print the default run config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : adaroute::cli::kExitConfig;
    }

    if (train->parsed()) return adaroute::cli::cmd_train(config_path, resume_path);
    if (diag->parsed())
        return adaroute::cli::cmd_diag(ckpt_path, kind, head, stage, probes, diag_out);
    if (ablate->parsed()) return adaroute::cli::cmd_ablate(grid_path);
    if (audit->parsed()) return adaroute::cli::cmd_audit(arch, adapter_cfg, audit_csv);
    if (config->parsed()) {
        if (print_defaults) return adaroute::cli::cmd_config_defaults();
        return adaroute::cli::kExitConfig;
    }
    return adaroute::cli::kExitConfig;
}
