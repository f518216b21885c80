#pragma once

#include <map>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "soma/encoder.hpp"
#include "soma/geometry.hpp"

namespace soma {

struct GlamOptions {
    bool enabled = true;
    std::vector<int> affine_levels{16, 8, 4};
    std::vector<int> flow_levels{8, 4, 2, 1};
    int64_t max_decoder_width = 128;

    /// Levels actually used once `enabled` is taken into account; with GLAM
    /// disabled a single flow path runs at every level and no affine decoder
    /// exists.
    std::vector<int> effective_affine_levels() const;
    std::vector<int> effective_flow_levels() const;
    bool operator==(const GlamOptions&) const = default;
};

/// Everything one matching level produced.
struct LevelOutput {
    std::optional<AffineParams> theta;
    std::optional<DisplacementField> affine;   // affine_to_flow(theta)
    std::optional<DisplacementField> residual; // flow decoder output
    DisplacementField prev;                    // carried from the coarser level
    DisplacementField accumulated;
};

struct MatchResult {
    DisplacementField final_field;
    torch::Tensor certainty_logits; // (N, H, W); undefined when not requested
    std::map<int, LevelOutput> per_level;

    const LevelOutput& at(int level) const;
};

/// conv3x3 -> conv3x3 -> global average pool -> MLP -> 6 values added to the
/// identity transform. The last layer is zero-initialised, so a fresh
/// regressor outputs the identity for every input.
class AffineRegressorImpl : public torch::nn::Module {
public:
    AffineRegressorImpl(int64_t in_channels, int64_t width);
    AffineParams forward(const torch::Tensor& x);

    torch::nn::Linear head{nullptr};

private:
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::Linear hidden_{nullptr};
};
TORCH_MODULE(AffineRegressor);

/// Three 3x3 conv layers, the last a zero-initialised 2-channel head.
class FlowRegressorImpl : public torch::nn::Module {
public:
    FlowRegressorImpl(int64_t in_channels, int64_t width);
    /// Residual field plus the penultimate features (N, width, H, W).
    std::pair<DisplacementField, torch::Tensor> forward(const torch::Tensor& x, int level);

    torch::nn::Conv2d head{nullptr};

private:
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
};
TORCH_MODULE(FlowRegressor);

/// One 3x3 conv producing a certainty logit per pixel.
class CertaintyHeadImpl : public torch::nn::Module {
public:
    explicit CertaintyHeadImpl(int64_t width);
    torch::Tensor forward(const torch::Tensor& features); // (N, H, W)

private:
    torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(CertaintyHead);

class MatcherImpl : public torch::nn::Module {
public:
    MatcherImpl(const ChannelSchedule& channels, const GlamOptions& options);

    /// Coarse-to-fine over levels 16, 8, 4, 2, 1. At each level the SAR
    /// features are warped by the upsampled accumulated field of the coarser
    /// level, concatenated with the optical features and decoded. The
    /// accumulated field advances through the flow residual when the level
    /// has one, otherwise through the affine field.
    MatchResult match(const FeaturePyramid& optical, const FeaturePyramid& sar,
                      bool with_certainty = true);

    const GlamOptions& options() const { return options_; }
    bool has_affine(int level) const { return affine_.count(level) > 0; }
    bool has_flow(int level) const { return flow_.count(level) > 0; }
    AffineRegressor affine(int level) const { return affine_.at(level); }
    FlowRegressor flow(int level) const { return flow_.at(level); }

private:
    GlamOptions options_;
    std::map<int, AffineRegressor> affine_;
    std::map<int, FlowRegressor> flow_;
    CertaintyHead certainty_{nullptr};
};
TORCH_MODULE(Matcher);

} // namespace soma
