#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "soma/data.hpp"
#include "soma/losses.hpp"
#include "soma/model.hpp"

namespace soma {

/// Everything a run needs. Serialized as plain `key=value` lines; see
/// config_keys() and README for the schema.
struct RunConfig {
    std::string name = "soma";
    int64_t height = 128;
    int64_t width = 128;
    ModelOptions model;

    LossWeights loss;
    bool mask_padding = true;

    // AdamW with linear warm-up
    double lr = 5e-5;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0; // 0 disables
    int64_t epochs = 100;
    int64_t batch_size = 4;
    int64_t warmup_epochs = 5;
    int64_t max_steps = 0; // 0 = run all epochs

    std::string data_root;
    PerturbationSpec perturbation;
    bool resample_train = true;
    int64_t train_limit = 0;

    uint64_t seed = 0;
    bool deterministic = true;
    int64_t threads = 1;
    std::string run_dir;
    int64_t checkpoint_every = 1; // epochs between ckpt_epoch_<e>.pt files, 0 = only last.pt

    void validate() const;
    DatasetOptions dataset_options() const;
};

bool operator==(const RunConfig& a, const RunConfig& b);

RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
std::string serialize_config(const RunConfig& config);
void save_config(const std::filesystem::path& path, const RunConfig& config);
uint64_t config_hash(const RunConfig& config);
std::vector<std::string> config_keys();

/// 512x512 tiles, 100 epochs, batch 4, lr 5e-5, 5 warm-up epochs.
RunConfig paper_preset();
/// Same hyper-parameters on 128x128 tiles.
RunConfig desk_preset();

/// Component-analysis variants: baseline, dino, fge, glam, dino_fge,
/// dino_glam, fge_glam, full.
const std::vector<std::string>& ablation_names();
/// Human-readable setup label ("+DINO + FGE", "SOMA (full)", ...).
std::string ablation_label(const std::string& name);
RunConfig apply_ablation(RunConfig config, const std::string& name);

} // namespace soma
