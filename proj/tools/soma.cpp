#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "soma/config.hpp"
#include "soma/data.hpp"
#include "soma/errors.hpp"
#include "soma/eval.hpp"
#include "soma/fge.hpp"
#include "soma/training.hpp"

namespace fs = std::filesystem;
using namespace soma;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

fs::path run_root() {
    const char* env = std::getenv("SOMA_RUN_ROOT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

void print_summary(const std::vector<EvalRecord>& records) {
    std::cout << std::fixed << std::setprecision(2);
    for (double t : kDefaultThresholds) std::cout << "CMR@" << static_cast<int>(t) << "px " << cmr(records, t) << "%  ";
    std::cout << "R_avg " << std::setprecision(4) << r_avg(records) << " px  (" << records.size()
              << " pairs)\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Optical/SAR dense registration: training, evaluation and inference"};
    app.require_subcommand(1);

    std::string config_path;
    std::string preset;
    std::vector<std::string> overrides;
    int64_t max_steps = 0;
    std::string resume_path;
    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
    train->add_option("--preset", preset, "start from a built-in preset (paper, desk)")
        ->check(CLI::IsMember({"paper", "desk"}));
    train->add_option("--set", overrides, "extra key=value overrides");
    train->add_option("--max-steps", max_steps, "stop after this many optimizer steps");
    train->add_option("--resume", resume_path, "continue from a checkpoint")->check(CLI::ExistingFile);

    std::string ckpt;
    std::string split = "test";
    std::string out_dir;
    std::string data_root;
    auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on a split");
    evaluate->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--split", split, "dataset split")->capture_default_str();
    evaluate->add_option("--out", out_dir, "report directory (default: <run root>/eval/<name>)");
    evaluate->add_option("--data", data_root, "override the data root stored in the checkpoint");

    std::string optical;
    std::string sar;
    auto* reg = app.add_subcommand("register", "estimate the field of one optical/SAR pair");
    reg->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    reg->add_option("--optical", optical, "optical raster")->required();
    reg->add_option("--sar", sar, "SAR raster")->required();
    reg->add_option("--out", out_dir, "output directory")->required();

    MiniDatasetOptions mini;
    std::string gen_root;
    bool extended = false;
    auto* generate = app.add_subcommand("generate", "write the procedural mini dataset");
    generate->add_option("--out", gen_root, "dataset root")->required();
    generate->add_option("--size", mini.size, "tile size in pixels")->capture_default_str();
    generate->add_option("--train", mini.train, "training tiles")->capture_default_str();
    generate->add_option("--val", mini.val, "validation tiles")->capture_default_str();
    generate->add_option("--test", mini.test, "test tiles")->capture_default_str();
    generate->add_option("--seed", mini.seed, "scene seed")->capture_default_str();
    generate->add_flag("--extended", extended, "use the 50 px / 20 degree preset for val/test manifests");
    generate->add_flag("--identity", mini.identity_manifests, "identity perturbations in val/test manifests");

    auto* kernels = app.add_subcommand("kernels", "print the directional gradient kernel bank");

    int64_t ablate_steps = 10;
    std::string ablate_split;
    auto* ablate = app.add_subcommand("ablate", "train every component-analysis variant");
    ablate->add_option("--config", config_path, "base config file")->required()->check(CLI::ExistingFile);
    ablate->add_option("--steps", ablate_steps, "steps per variant")->capture_default_str();
    ablate->add_option("--split", ablate_split, "evaluate each variant on this split");
    ablate->add_option("--out", out_dir, "report directory (default: <run root>/ablation)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kUsage;
    }

    try {
        if (*train) {
            if (!resume_path.empty()) {
                auto trainer = Trainer::resume(resume_path);
                trainer.run(max_steps);
                std::cout << "resumed to step " << trainer.step() << " in " << trainer.config().run_dir << "\n";
                return 0;
            }
            if (config_path.empty() && preset.empty()) {
                std::cerr << "train: give --config, --preset or --resume\n";
                return kUsage;
            }
            RunConfig config = preset == "paper" ? paper_preset() : desk_preset();
            if (!config_path.empty()) config = load_config(config_path, config);
            std::string extra;
            for (const auto& kv : overrides) extra += kv + "\n";
            config = parse_config(extra, config);
            if (config.run_dir.empty()) config.run_dir = (run_root() / config.name).string();
            Trainer trainer(config);
            auto records = trainer.run(max_steps);
            if (!records.empty()) {
                const auto& last = records.back().loss;
                std::cout << "step " << trainer.step() << " total " << last.total << " warp " << last.warp << "\n";
            }
            std::cout << "run directory: " << config.run_dir << "\n";
        } else if (*evaluate) {
            fs::path dir = out_dir;
            if (dir.empty()) dir = run_root() / "eval" / fs::path(ckpt).parent_path().filename() / split;
            auto records = evaluate_checkpoint(ckpt, split, dir, data_root);
            print_summary(records);
            std::cout << "report: " << (dir / "metrics.csv").string() << "\n";
        } else if (*reg) {
            auto loaded = load_checkpoint(ckpt);
            auto out = register_pair(loaded.model, optical, sar, out_dir);
            std::cout << "field: " << out.field_path.string() << "\n"
                      << "warped SAR: " << out.raster_path.string() << "\n"
                      << "mean displacement: " << out.mean_displacement << " px\n";
        } else if (*generate) {
            if (extended) mini.manifest_spec = PerturbationSpec::extended();
            generate_mini_dataset(gen_root, mini);
            std::cout << "wrote " << mini.train << "/" << mini.val << "/" << mini.test << " tiles to " << gen_root
                      << "\n";
        } else if (*kernels) {
            write_kernel_bank(std::cout, build_kernel_bank());
        } else if (*ablate) {
            auto base = load_config(config_path);
            fs::path dir = out_dir.empty() ? run_root() / "ablation" : fs::path(out_dir);
            auto rows = run_ablation(base, ablate_steps, ablate_split, dir);
            for (const auto& r : rows) {
                std::cout << std::left << std::setw(16) << r.label << " trainable " << r.signature.trainable
                          << " frozen " << r.signature.frozen;
                if (!r.records.empty()) std::cout << " R_avg " << r_avg(r.records);
                std::cout << "\n";
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return 0;
}
