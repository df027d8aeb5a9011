#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaroute/artifacts.hpp"
#include "adaroute/checkpoint.hpp"
#include "adaroute/config.hpp"
#include "adaroute/diagnostics.hpp"
#include "adaroute/trainer.hpp"

namespace adaroute::cli {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

namespace detail {

inline void apply_env_seed(RunConfig& cfg) {
    if (const char* env = std::getenv("ADAROUTE_SEED")) {
        try {
            cfg.seed = std::stoull(env);
            cfg.task.seed = cfg.seed;
        } catch (...) {
            throw ConfigError("ADAROUTE_SEED is not an integer: " + std::string(env));
        }
    }
}

template <class Fn>
int guarded(Fn fn) {
    try {
        return fn();
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}

inline std::vector<Tensor> probe_images(const TaskSpec& task, std::size_t n,
                                        std::uint64_t index_offset = 1ull << 41) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(make_sample(task, index_offset + i).image);
    return out;
}

} // namespace detail

// train <config.json> [--resume ckpt.json]
inline int cmd_train(const std::string& config_path, const std::string& resume = "") {
    return detail::guarded([&] {
        RunConfig cfg;
        ModelGraph model;
        std::size_t steps_done = 0;
        LoadedCheckpoint ckpt;
        if (!resume.empty()) {
            ckpt = load_checkpoint(resume);
            cfg = ckpt.cfg;
            detail::apply_env_seed(cfg);
            model = std::move(ckpt.model);
            steps_done = ckpt.steps_done;
        } else {
            cfg = load_config(config_path);
            detail::apply_env_seed(cfg);
            model = build_model(cfg);
        }
        finite_checks() = cfg.debug_finite_checks;

        Trainer trainer(model, cfg.task, cfg.train);
        if (!resume.empty()) restore_optimizer(trainer, ckpt);
        TrainReport report = trainer.run(cfg.train.steps - steps_done);

        std::filesystem::create_directories(cfg.out_dir);
        write_train_report_csv(report, cfg.out_dir + "/report.csv");
        save_checkpoint(model, cfg, cfg.out_dir + "/checkpoint.json", &trainer.optimizer(),
                        trainer.steps_done());
        std::cout << "trained " << trainer.steps_done() << " steps; final metric "
                  << report.final_metric << "; artifacts in " << cfg.out_dir << "\n";
        return kExitOk;
    });
}

// diag <ckpt> --kind {cka,erf,expert-map,audit} [--head H] [--stage k] [--probes n] [--out dir]
inline int cmd_diag(const std::string& ckpt_path, const std::string& kind,
                    const std::string& head = "G1", long stage = -1, std::size_t probes = 0,
                    std::string out_dir = "") {
    return detail::guarded([&] {
        LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
        ModelGraph& g = ckpt.model;
        if (out_dir.empty())
            out_dir = std::filesystem::path(ckpt_path).parent_path().string();
        if (out_dir.empty()) out_dir = ".";

        if (kind == "audit") {
            ArchSpec arch{"toy", g.cfg.style, g.cfg.depths, g.cfg.dims, 0.0};
            std::size_t head_inputs = 0;
            if (g.head_kind == HeadKind::Segmentation)
                for (std::size_t d : g.cfg.dims) head_inputs += d;
            else if (g.head_kind == HeadKind::Classification)
                head_inputs = g.cfg.dims.back();
            ParamAudit audit = audit_params(arch, g.acfg, head_inputs, g.n_classes);
            std::cout << audit_text(audit);
            write_audit_csv(audit, out_dir + "/audit.csv");
            return kExitOk;
        }
        if (kind == "cka") {
            auto imgs = detail::probe_images(ckpt.cfg.task, probes ? probes : 8);
            CKAMatrix m = cka_matrix(g, imgs);
            write_cka_csv(m, out_dir + "/cka.csv");
            std::cout << "wrote " << out_dir << "/cka.csv\n";
            return kExitOk;
        }
        if (kind == "erf") {
            std::size_t layer = 0;
            std::size_t total_blocks = 0;
            for (std::size_t d : g.cfg.depths) total_blocks += d;
            if (stage < 0) {
                layer = total_blocks - 1;
            } else {
                if (static_cast<std::size_t>(stage) >= g.cfg.n_stages())
                    throw ConfigError("diag erf: stage out of range");
                layer = 0;
                for (long s = 0; s <= stage; ++s) layer += g.cfg.depths[static_cast<std::size_t>(s)];
                layer -= 1;
            }
            Shape in_shape = {g.cfg.in_channels, ckpt.cfg.task.image_size,
                              ckpt.cfg.task.image_size};
            ERFMap m = erf_map_model(g, layer, in_shape, probes ? probes : 16,
                                     mix_seed(ckpt.cfg.seed, 0xe7f1));
            write_erf_csv(m, out_dir + "/erf.csv");
            write_erf_pgm(m, out_dir + "/erf.pgm");
            std::cout << "wrote " << out_dir << "/erf.{csv,pgm}\n";
            return kExitOk;
        }
        if (kind == "expert-map") {
            const std::size_t s =
                stage < 0 ? g.cfg.n_stages() - 1 : static_cast<std::size_t>(stage);
            auto imgs = detail::probe_images(ckpt.cfg.task, probes ? probes : 20);
            ActivationMap m = expert_activation_map(g, imgs, parse_gate_head(head), s);
            write_activation_map_csv(m, out_dir + "/expert_map.csv");
            std::cout << "wrote " << out_dir << "/expert_map.csv\n";
            return kExitOk;
        }
        throw ConfigError("unknown diagnostic kind: " + kind);
    });
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

struct AblationCell {
    std::string axis;
    std::string label;
    RunConfig cfg;
};

// Grid file: {"base": <run config>, "axes": {<axis>: [values...]}}.
// One run per (axis, value) with the base config plus that single override.
inline std::vector<AblationCell> expand_grid(const json& grid) {
    if (!grid.contains("base")) throw ConfigError("ablation grid: missing base config");
    RunConfig base = config_from_json(grid.at("base"));
    std::vector<AblationCell> cells;
    if (!grid.contains("axes")) return cells;
    for (const auto& [axis, values] : grid.at("axes").items()) {
        for (const json& v : values) {
            RunConfig cfg = base;
            std::string label;
            if (axis == "m_latent") {
                cfg.adapter.m_multiplier = v.at(0).get<double>();
                cfg.adapter.latent = v.at(1).get<std::size_t>();
                label = "M=" + std::to_string(cfg.adapter.m_multiplier) +
                        "L,latent=" + std::to_string(cfg.adapter.latent);
            } else if (axis == "group_size") {
                cfg.adapter.group_size = v.get<std::size_t>();
                label = "group=" + std::to_string(cfg.adapter.group_size);
            } else if (axis == "top_k") {
                cfg.adapter.top_k = v.get<std::size_t>();
                label = cfg.adapter.top_k == 0 ? "dense"
                                               : "top" + std::to_string(cfg.adapter.top_k);
            } else if (axis == "kernel_set") {
                cfg.adapter.kernel_sizes = v.at("sizes").get<std::vector<std::size_t>>();
                cfg.adapter.use_sa = v.at("sa").get<bool>();
                label = "k=";
                for (std::size_t k : cfg.adapter.kernel_sizes) label += std::to_string(k) + "/";
                label += cfg.adapter.use_sa ? "+sa" : "-sa";
            } else if (axis == "layout") {
                cfg.adapter.layout = parse_layout(v.get<std::string>());
                label = v.get<std::string>();
            } else if (axis == "router_activation") {
                cfg.adapter.activation = parse_router_activation(v.get<std::string>());
                label = v.get<std::string>();
            } else if (axis == "init") {
                cfg.adapter.init = parse_init(v.get<std::string>());
                label = v.get<std::string>();
            } else {
                throw ConfigError("ablation grid: unknown axis " + axis);
            }
            cells.push_back({axis, label, cfg});
        }
    }
    return cells;
}

struct AblationRow {
    std::string axis, label;
    std::size_t trainable = 0;
    double final_loss = 0.0;
    double final_metric = 0.0;
};

inline AblationRow run_cell(const AblationCell& cell) {
    ModelGraph model = build_model(cell.cfg);
    Trainer trainer(model, cell.cfg.task, cell.cfg.train);
    TrainReport report = trainer.run(cell.cfg.train.steps);
    AblationRow row;
    row.axis = cell.axis;
    row.label = cell.label;
    for (const Tensor& t : model.trainable()) row.trainable += t.size();
    row.final_loss = report.steps.empty() ? 0.0 : report.steps.back().loss;
    row.final_metric = report.final_metric;
    return row;
}

// ablate <grid.json>: validates the whole grid, runs every cell, then writes
// the consolidated CSV via write-temp-then-rename.
inline int cmd_ablate(const std::string& grid_path) {
    return detail::guarded([&] {
        std::ifstream in(grid_path);
        if (!in) throw ConfigError("cannot read grid file: " + grid_path);
        json grid;
        try {
            in >> grid;
        } catch (const json::exception& e) {
            throw ConfigError("invalid grid JSON: " + std::string(e.what()));
        }
        std::vector<AblationCell> cells = expand_grid(grid); // validates before any run
        if (const char* env = std::getenv("ADAROUTE_SEED"))
            for (auto& c : cells) {
                c.cfg.seed = std::stoull(env);
                c.cfg.task.seed = c.cfg.seed;
            }

        const std::string out_dir =
            grid.contains("base") && grid.at("base").contains("out_dir")
                ? grid.at("base").at("out_dir").get<std::string>()
                : "runs/ablation";
        std::filesystem::create_directories(out_dir);
        const std::string out_path = out_dir + "/ablation.csv";
        const std::string tmp_path = out_path + ".tmp";
        {
            std::ofstream out(tmp_path, std::ios::trunc);
            if (!out) throw ConfigError("cannot write " + tmp_path);
            out << "axis,cell,trainable_params,final_loss,final_metric\n";
            for (const auto& cell : cells) {
                AblationRow row = run_cell(cell);
                out << row.axis << "," << row.label << "," << row.trainable << ","
                    << adaroute::detail::fmt(row.final_loss) << ","
                    << adaroute::detail::fmt(row.final_metric) << "\n";
                std::cout << "[ablate] " << row.axis << " / " << row.label << " -> metric "
                          << row.final_metric << "\n";
            }
        }
        std::filesystem::rename(tmp_path, out_path);
        std::cout << "wrote " << out_path << "\n";
        return kExitOk;
    });
}

// audit --arch {toy,swin-b,swin-l,convnext-b,convnext-l} [--adapter cfg.json]
inline int cmd_audit(const std::string& arch_name, const std::string& adapter_cfg_path = "",
                     const std::string& out_csv = "") {
    return detail::guarded([&] {
        RunConfig rc;
        // published defaults: global latent 128, hidden 24, kernels [3,5,7]
        rc.adapter.latent = 128;
        rc.adapter.router_hidden = 24;
        if (!adapter_cfg_path.empty()) rc = load_config(adapter_cfg_path);

        ArchSpec arch;
        if (arch_name == "toy")
            arch = {"toy", rc.backbone.style, rc.backbone.depths, rc.backbone.dims, 0.0};
        else
            arch = published_arch(arch_name);

        ParamAudit audit = audit_params(arch, rc.adapter);
        std::cout << audit_text(audit);
        if (!out_csv.empty()) write_audit_csv(audit, out_csv);
        return kExitOk;
    });
}

// config --print-defaults
inline int cmd_config_defaults() {
    return detail::guarded([&] {
        RunConfig c;
        std::cout << to_json(c).dump(2) << "\n";
        return kExitOk;
    });
}

} // namespace adaroute::cli
