#pragma once

// Feature gradient enhancement for pyramid levels 2, 4 and 8:
//
//   F_recon = CRU(SRU(phi)) + phi
//   G_i     = ReLU(K_i * F_recon)              (8 fixed directional kernels)
//   F_grad  = Conv1x1([G_1..G_8]) + F_recon
//   F_att   = F_grad * CA(F_grad) * SA(F_grad) + F_grad
//   F_ms    = Conv1x1([Dilate_d(F_att)], d = 1, 2, 3)
//   phi_g   = F_att + Gauss(F_ms)
//
// SRU/CRU follow the spatial/channel reconstruction units of SCConv, CA/SA the
// channel/spatial attention of CBAM, each with their published defaults.

#include <array>
#include <map>
#include <ostream>
#include <utility>

#include <torch/torch.h>

#include "soma/encoder.hpp"

namespace soma {

inline constexpr int kDirections = 8;
inline constexpr std::array<int, 3> kFgeLevels{2, 4, 8};

struct GradientKernelBank {
    std::array<double, kDirections> angles_deg{};
    torch::Tensor kernels; // (8, 3, 3) float64

    /// One kernel as a (3, 3) tensor.
    torch::Tensor at(int i) const { return kernels[i]; }
};

/// Sobel-x at 0 degrees; every other direction is the continuous rotation of
/// that stencil resampled bilinearly onto the 3x3 grid (zero outside) and
/// shifted to zero sum. Angles run from +x towards +row.
GradientKernelBank build_kernel_bank();

/// Text dump: one "# theta=<deg>" line followed by three rows per kernel.
void write_kernel_bank(std::ostream& out, const GradientKernelBank& bank);

struct FgeOptions {
    bool enabled = true;
    // spatial reconstruction unit
    int64_t sru_groups = 16;
    double sru_gate_threshold = 0.5;
    // channel reconstruction unit
    double cru_alpha = 0.5;
    int64_t cru_squeeze = 2;
    int64_t cru_group_size = 2;
    int64_t cru_group_kernel = 3;
    bool cru_pass_through = false;
    // attention
    int64_t ca_reduction = 16;
    int64_t sa_kernel = 7;
    std::array<int64_t, 3> dilations{1, 2, 3};
    // smoothing
    int64_t gauss_size = 5;
    double gauss_sigma = 1.0;

    bool operator==(const FgeOptions&) const = default;
};

class SpatialReconstructionImpl : public torch::nn::Module {
public:
    SpatialReconstructionImpl(int64_t channels, int64_t groups, double gate_threshold);
    torch::Tensor forward(const torch::Tensor& x);

    double gate_threshold = 0.5;

private:
    torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(SpatialReconstruction);

class ChannelReconstructionImpl : public torch::nn::Module {
public:
    ChannelReconstructionImpl(int64_t channels, const FgeOptions& options);
    torch::Tensor forward(const torch::Tensor& x);

    bool pass_through = false;

private:
    int64_t channels_;
    int64_t upper_;
    torch::nn::Conv2d squeeze_upper_{nullptr};
    torch::nn::Conv2d squeeze_lower_{nullptr};
    torch::nn::Conv2d group_wise_{nullptr};
    torch::nn::Conv2d point_wise_upper_{nullptr};
    torch::nn::Conv2d point_wise_lower_{nullptr};
};
TORCH_MODULE(ChannelReconstruction);

class ChannelAttentionImpl : public torch::nn::Module {
public:
    ChannelAttentionImpl(int64_t channels, int64_t reduction);
    /// (N, C, 1, 1) weights in (0, 1).
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d expand{nullptr}; // last layer of the shared MLP

private:
    torch::nn::Conv2d reduce_{nullptr};
};
TORCH_MODULE(ChannelAttention);

class SpatialAttentionImpl : public torch::nn::Module {
public:
    SpatialAttentionImpl(int64_t kernel);
    /// (N, 1, H, W) weights in (0, 1).
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(SpatialAttention);

/// FGE for a single pyramid level.
class LevelEnhancerImpl : public torch::nn::Module {
public:
    LevelEnhancerImpl(int64_t channels, const FgeOptions& options, const GradientKernelBank& bank);

    torch::Tensor reduce_redundancy(const torch::Tensor& phi);
    /// ReLU'd directional responses, shape (N, C, 8, H, W).
    torch::Tensor directional_responses(const torch::Tensor& recon);
    torch::Tensor extract_gradients(const torch::Tensor& recon);
    std::pair<torch::Tensor, torch::Tensor> attend_and_fuse(const torch::Tensor& grad);
    torch::Tensor smooth(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& phi);

    int64_t channels() const { return channels_; }

    SpatialReconstruction sru{nullptr};
    ChannelReconstruction cru{nullptr};
    torch::nn::Conv2d grad_fusion{nullptr};
    ChannelAttention channel_attention{nullptr};
    SpatialAttention spatial_attention{nullptr};
    std::vector<torch::nn::Conv2d> dilated;
    torch::nn::Conv2d ms_fusion{nullptr};
    torch::nn::Conv2d gauss{nullptr};

private:
    int64_t channels_;
    torch::Tensor bank_weight_; // (8C, 1, 3, 3) buffer
};
TORCH_MODULE(LevelEnhancer);

/// Per-level enhancers for one modality branch. When disabled it owns no
/// parameters and enhance() returns its input.
class FeatureGradientEnhancerImpl : public torch::nn::Module {
public:
    FeatureGradientEnhancerImpl(const ChannelSchedule& channels, const FgeOptions& options);

    bool enabled() const { return options_.enabled; }
    LevelEnhancer level(int l) const;

    torch::Tensor reduce_redundancy(const torch::Tensor& phi, int l) { return level(l)->reduce_redundancy(phi); }
    torch::Tensor extract_gradients(const torch::Tensor& recon, int l) { return level(l)->extract_gradients(recon); }
    std::pair<torch::Tensor, torch::Tensor> attend_and_fuse(const torch::Tensor& grad, int l) {
        return level(l)->attend_and_fuse(grad);
    }
    torch::Tensor enhance(const torch::Tensor& phi, int l);

    /// Applies enhance() to levels 2, 4, 8 of a pyramid in place.
    void enhance_pyramid(FeaturePyramid& pyramid);

private:
    FgeOptions options_;
    std::map<int, LevelEnhancer> levels_;
};
TORCH_MODULE(FeatureGradientEnhancer);

} // namespace soma
