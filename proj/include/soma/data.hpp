#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "soma/geometry.hpp"

namespace soma {

/// Bounds of the random geometric perturbation applied to SAR tiles.
struct PerturbationSpec {
    double max_translation_px = 32.0; // per axis, uniform in [-t, t]
    double scale_delta = 0.2;         // scale uniform in [1 - d, 1 + d]
    double max_rotation_deg = 5.0;    // uniform in [-r, r]

    /// 50 px / +-20 degree preset used for robustness experiments.
    static PerturbationSpec extended();
    void validate() const;
    bool operator==(const PerturbationSpec&) const = default;
};

struct PerturbationDraw {
    double tx = 0, ty = 0, scale = 1, rotation_deg = 0;
};

/// Rotation and scale about the image centre followed by a translation, as a
/// normalized-coordinate affine map for an image of the given size.
AffineParams perturbation_theta(const PerturbationDraw& draw, int64_t height, int64_t width);

AffineParams sample_perturbation(const PerturbationSpec& spec, std::mt19937_64& rng,
                                 int64_t height, int64_t width, PerturbationDraw* draw = nullptr);

struct PairMeta {
    std::string source;
    std::string tile_id;
    std::array<double, 6> theta{1, 0, 0, 0, 1, 0};
    uint64_t seed = 0;
};

/// One training/evaluation sample. gt is the level-1 field on the optical
/// grid: warp(sar, gt) re-aligns the perturbed SAR tile with the optical
/// tile. valid marks optical pixels whose SAR sample stays inside the frame.
struct ImagePair {
    torch::Tensor optical; // (C_o, H, W) float32 in [0, 1]
    torch::Tensor sar;     // (1, H, W) float32 in [0, 1], perturbed
    DisplacementField gt;  // (1, H, W, 2)
    torch::Tensor valid;   // (H, W) bool
    PairMeta meta;
};

/// Resamples `sar` so that affine_to_flow(theta) is its ground-truth field.
/// theta has shape (1, 2, 3).
ImagePair apply_perturbation(const torch::Tensor& optical, const torch::Tensor& sar,
                             const AffineParams& theta, PairMeta meta = {});

struct ManifestEntry {
    std::string tile_id;
    std::array<double, 6> theta{};
    uint64_t seed = 0;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

struct DatasetOptions {
    PerturbationSpec perturbation;
    uint64_t seed = 0;
    /// Draw a fresh perturbation per epoch on the train split. When false each
    /// train tile keeps the draw of epoch 0.
    bool resample_train = true;
    std::size_t limit = 0; // 0 = all tiles
};

/// Tiles of one split laid out as root/<split>/{optical,sar}/<tile_id>.<ext>.
/// val and test read their perturbations from root/<split>/manifest.csv.
class Dataset {
public:
    static Dataset load(const std::filesystem::path& root, const std::string& split,
                        const DatasetOptions& options = {});

    std::size_t size() const { return tiles_.size(); }
    bool empty() const { return tiles_.empty(); }
    const std::string& split() const { return split_; }
    std::vector<std::string> tile_ids() const;

    ImagePair get(std::size_t index, int64_t epoch = 0) const;
    /// Visiting order for an epoch: shuffled per epoch on train, sorted otherwise.
    std::vector<std::size_t> epoch_order(int64_t epoch) const;

private:
    struct Tile {
        std::string id;
        std::filesystem::path optical;
        std::filesystem::path sar;
        std::optional<ManifestEntry> fixed;
    };
    std::string split_;
    DatasetOptions options_;
    std::vector<Tile> tiles_;
};

/// Eagerly materialises every pair of a split (epoch 0 perturbations).
std::vector<ImagePair> load_dataset(const std::filesystem::path& root, const std::string& split,
                                    const DatasetOptions& options = {});

struct Batch {
    torch::Tensor optical; // (N, C_o, H, W)
    torch::Tensor sar;     // (N, 1, H, W)
    DisplacementField gt;  // (N, H, W, 2)
    torch::Tensor valid;   // (N, H, W)
    std::vector<std::string> ids;
};

Batch collate(const std::vector<ImagePair>& pairs);

struct MiniDatasetOptions {
    int64_t size = 128;
    int train = 16;
    int val = 4;
    int test = 8;
    uint64_t seed = 7;
    PerturbationSpec manifest_spec; // perturbations frozen into val/test manifests
    bool identity_manifests = false;
};

/// Writes a procedural pseudo-optical / pseudo-SAR dataset (PNG tiles plus
/// manifests) under root.
void generate_mini_dataset(const std::filesystem::path& root, const MiniDatasetOptions& options);

/// Renders one aligned scene: optical (3, S, S) and speckled SAR (1, S, S).
std::pair<torch::Tensor, torch::Tensor> render_scene(int64_t size, uint64_t seed);

uint64_t mix_seed(uint64_t a, uint64_t b);

} // namespace soma
