#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "soma/config.hpp"
#include "soma/data.hpp"
#include "soma/eval.hpp"
#include "soma/losses.hpp"
#include "soma/model.hpp"

namespace soma {

struct StepRecord {
    int64_t step = 0; // 1-based
    int64_t epoch = 0;
    double lr = 0.0;
    LossValues loss;
};

/// Seeds torch, sets the thread count and (optionally) deterministic kernels.
void apply_runtime(const RunConfig& config);

/// Converts an image batch to the channel count the model expects.
torch::Tensor match_channels(const torch::Tensor& image, int64_t channels);

/// Optimizer, data order, warm-up schedule, logging and checkpoints around
/// one SomaModel. When config.run_dir is empty nothing is written to disk.
class Trainer {
public:
    /// Validates the config and the training split before anything runs.
    explicit Trainer(RunConfig config);

    /// Rebuilds a trainer from a checkpoint written by save_checkpoint().
    static Trainer resume(const std::filesystem::path& checkpoint);

    /// One optimizer step on a batch. Throws NonFiniteLossError naming the
    /// first non-finite term; the parameters are then left untouched.
    StepRecord train_step(const Batch& batch);

    /// Continues training until all epochs are done or `max_steps` total
    /// steps have run (0 = config.max_steps, then unbounded). Writes
    /// ckpt_epoch_<e>.pt every config.checkpoint_every epochs and last.pt on
    /// return.
    std::vector<StepRecord> run(int64_t max_steps = 0);

    void save_checkpoint(const std::filesystem::path& path) const;

    double lr_at(int64_t step) const;
    int64_t steps_per_epoch() const;
    int64_t step() const { return step_; }
    int64_t epoch() const { return step_ / steps_per_epoch(); }

    const RunConfig& config() const { return config_; }
    SomaModel model() const { return model_; }
    const Dataset& dataset() const { return train_; }
    const std::vector<StepRecord>& history() const { return history_; }

    /// Batch of the given epoch and position, as visited by run().
    Batch batch_at(int64_t epoch, int64_t position) const;

private:
    void log(const StepRecord& record);

    RunConfig config_;
    SomaModel model_{nullptr};
    std::unique_ptr<torch::optim::AdamW> optimizer_;
    Dataset train_;
    int64_t step_ = 0;
    std::vector<StepRecord> history_;
};

struct LoadedModel {
    RunConfig config;
    SomaModel model{nullptr};
    int64_t step = 0;
};

/// Loads the config and weights of a checkpoint, checking that the stored
/// config hash and the parameter map agree with the rebuilt model.
LoadedModel load_checkpoint(const std::filesystem::path& path);

/// Matches every pair of a dataset (no certainty) and scores the level-1
/// field against the ground truth over the pixels whose SAR sample lies
/// inside the frame.
std::vector<EvalRecord> evaluate_model(SomaModel model, const Dataset& dataset,
                                       int64_t batch_size = 4);

/// Evaluates a checkpoint on a split of its data root and writes the report
/// files to out_dir. Returns the records.
std::vector<EvalRecord> evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                            const std::string& split,
                                            const std::filesystem::path& out_dir,
                                            const std::string& data_root = {});

struct RegistrationOutput {
    std::filesystem::path field_path;
    std::filesystem::path raster_path;
    std::filesystem::path preview_path;
    double mean_displacement = 0.0;
    int64_t height = 0;
    int64_t width = 0;
};

/// Estimates the level-1 field of an optical/SAR pair and writes field.bin,
/// the SAR tile resampled onto the optical grid (warped_sar.tiff) and an
/// 8-bit preview (warped_sar.png). Inputs are zero-padded to a multiple of 16
/// and the outputs cropped back.
RegistrationOutput register_pair(SomaModel model, const std::filesystem::path& optical,
                                 const std::filesystem::path& sar,
                                 const std::filesystem::path& out_dir);

struct AblationRow {
    std::string name;
    std::string label;
    ParameterSignature signature;
    LossValues last_loss;
    std::vector<EvalRecord> records;
};

/// Trains every ablation preset for `steps` steps from the same base config
/// and, when `split` is non-empty, evaluates each on that split. Reports go
/// to out_dir when it is non-empty.
std::vector<AblationRow> run_ablation(const RunConfig& base, int64_t steps, const std::string& split,
                                      const std::filesystem::path& out_dir);

} // namespace soma
