#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "soma/encoder.hpp"
#include "soma/fge.hpp"
#include "soma/glam.hpp"

namespace soma {

struct ModelOptions {
    ChannelSchedule channels;
    int64_t optical_channels = 3;
    bool dino = true;            // frozen coarse encoder at level 16
    int64_t coarse_channels = 64;
    int64_t coarse_patch = 16;
    uint64_t coarse_seed = 1234;
    std::filesystem::path coarse_script; // TorchScript backbone; random encoder when empty
    FgeOptions fge;
    GlamOptions glam;
};

/// Trainable/frozen parameter counts; differs between ablation variants.
struct ParameterSignature {
    int64_t trainable = 0;
    int64_t frozen = 0;
    bool operator==(const ParameterSignature&) const = default;
};

/// Encoders, per-modality enhancers and the matcher.
class SomaModelImpl : public torch::nn::Module {
public:
    explicit SomaModelImpl(const ModelOptions& options);

    /// Encoder output after enhancement, (optical, sar).
    std::pair<FeaturePyramid, FeaturePyramid> pyramids(const torch::Tensor& optical,
                                                       const torch::Tensor& sar);
    MatchResult forward(const torch::Tensor& optical, const torch::Tensor& sar,
                        bool with_certainty = true);

    std::vector<torch::Tensor> trainable_parameters() const;
    std::vector<torch::Tensor> frozen_parameters() const;
    ParameterSignature signature() const;
    /// FNV-1a over the bytes of the frozen parameters.
    uint64_t frozen_hash() const;

    const ModelOptions& options() const { return options_; }
    PyramidEncoder encoder() const { return encoder_; }
    FeatureGradientEnhancer fge(Modality m) const { return m == Modality::Optical ? fge_optical_ : fge_sar_; }
    Matcher matcher() const { return matcher_; }

private:
    ModelOptions options_;
    PyramidEncoder encoder_{nullptr};
    FeatureGradientEnhancer fge_optical_{nullptr};
    FeatureGradientEnhancer fge_sar_{nullptr};
    Matcher matcher_{nullptr};
};
TORCH_MODULE(SomaModel);

uint64_t hash_tensors(const std::vector<torch::Tensor>& tensors);

} // namespace soma
