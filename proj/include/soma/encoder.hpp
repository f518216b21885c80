#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include <torch/script.h>
#include <torch/torch.h>

namespace soma {

enum class Modality { Optical, Sar };

std::string to_string(Modality m);

/// Feature width per pyramid level.
struct ChannelSchedule {
    int64_t c1 = 32;
    int64_t c2 = 64;
    int64_t c4 = 128;
    int64_t c8 = 256;
    int64_t c16 = 64;

    int64_t at(int level) const;
    bool operator==(const ChannelSchedule&) const = default;
};

struct FeaturePyramid {
    std::map<int, torch::Tensor> levels; // level -> (N, C_l, H/l, W/l)
    Modality modality = Modality::Optical;

    const torch::Tensor& at(int level) const;
};

/// Produces a coarse feature grid (N, C, h, w) from a 3-channel image in
/// [0, 1]. The grid need not be exactly H/16 x W/16; see adapt_coarse_grid.
class CoarseEncoderImpl : public torch::nn::Module {
public:
    virtual torch::Tensor forward(const torch::Tensor& image) = 0;
    virtual int64_t channels() const = 0;

    /// Stops gradient flow into every parameter; forward then runs under
    /// NoGradGuard.
    void freeze();
    bool frozen() const { return frozen_; }

protected:
    bool frozen_ = false;
};
using CoarseEncoderHandle = std::shared_ptr<CoarseEncoderImpl>;

/// Desk-scale stand-in for a pretrained self-supervised backbone: a
/// seeded random patch-embedding conv network, frozen on construction.
class RandomCoarseEncoderImpl : public CoarseEncoderImpl {
public:
    RandomCoarseEncoderImpl(int64_t channels, int64_t patch, uint64_t seed);
    torch::Tensor forward(const torch::Tensor& image) override;
    int64_t channels() const override { return channels_; }

private:
    int64_t channels_;
    int64_t patch_;
    torch::nn::Conv2d embed_{nullptr};
    torch::nn::Conv2d mix_{nullptr};
};

/// Wraps a TorchScript module exported elsewhere (for example a pretrained
/// ViT that returns a patch-token grid (N, C, h, w)). Always frozen.
class ScriptedCoarseEncoderImpl : public CoarseEncoderImpl {
public:
    ScriptedCoarseEncoderImpl(const std::filesystem::path& path, int64_t channels);
    torch::Tensor forward(const torch::Tensor& image) override;
    int64_t channels() const override { return channels_; }

private:
    torch::jit::Module module_;
    int64_t channels_;
};

CoarseEncoderHandle make_random_coarse_encoder(int64_t channels, int64_t patch, uint64_t seed);
CoarseEncoderHandle make_scripted_coarse_encoder(const std::filesystem::path& path,
                                                 int64_t channels);

/// Bilinear (align-corners) resampling of a coarse grid onto (height, width).
/// Returns `raw` itself when the sizes already agree.
torch::Tensor adapt_coarse_grid(const torch::Tensor& raw, int64_t height, int64_t width);

// conv -> GroupNorm -> ReLU, optionally residual when shapes allow it.
class ConvBlockImpl : public torch::nn::Module {
public:
    ConvBlockImpl(int64_t in, int64_t out, int64_t stride, bool residual);
    torch::Tensor forward(const torch::Tensor& x);

private:
    bool residual_;
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(ConvBlock);

int64_t group_count(int64_t channels, int64_t preferred);

/// Trainable, modality-specific CNN producing levels 1..8 (and 16 when no
/// coarse encoder is used).
class BackboneImpl : public torch::nn::Module {
public:
    BackboneImpl(int64_t in_channels, const ChannelSchedule& channels, bool with_level16);
    std::map<int, torch::Tensor> forward(const torch::Tensor& image);

private:
    bool with_level16_;
    torch::nn::Conv2d input_{nullptr};
    torch::nn::Sequential stem_{nullptr};
    std::map<int, torch::nn::Sequential> stages_;
};
TORCH_MODULE(Backbone);

struct EncoderOptions {
    ChannelSchedule channels;
    int64_t optical_channels = 3;
    int64_t sar_channels = 1;
    bool use_coarse = true;
};

/// Two modality-specific backbones plus the shared coarse encoder.
class PyramidEncoderImpl : public torch::nn::Module {
public:
    PyramidEncoderImpl(const EncoderOptions& options, CoarseEncoderHandle coarse);

    FeaturePyramid encode(const torch::Tensor& image, Modality modality);

    const EncoderOptions& options() const { return options_; }
    const CoarseEncoderHandle& coarse() const { return coarse_; }
    Backbone backbone(Modality m) const { return m == Modality::Optical ? optical_ : sar_; }

private:
    EncoderOptions options_;
    CoarseEncoderHandle coarse_;
    Backbone optical_{nullptr};
    Backbone sar_{nullptr};
    torch::nn::Conv2d coarse_proj_optical_{nullptr};
    torch::nn::Conv2d coarse_proj_sar_{nullptr};
};
TORCH_MODULE(PyramidEncoder);

} // namespace soma
