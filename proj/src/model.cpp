#include "soma/model.hpp"

#include "soma/errors.hpp"

namespace soma {

uint64_t hash_tensors(const std::vector<torch::Tensor>& tensors) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors) {
        auto c = t.detach().contiguous().cpu();
        const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
        const auto n = static_cast<std::size_t>(c.numel() * c.element_size());
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

SomaModelImpl::SomaModelImpl(const ModelOptions& options) : options_(options) {
    CoarseEncoderHandle coarse;
    if (options_.dino) {
        coarse = options_.coarse_script.empty()
                     ? make_random_coarse_encoder(options_.coarse_channels, options_.coarse_patch,
                                                  options_.coarse_seed)
                     : make_scripted_coarse_encoder(options_.coarse_script, options_.coarse_channels);
    }
    EncoderOptions enc;
    enc.channels = options_.channels;
    enc.optical_channels = options_.optical_channels;
    enc.use_coarse = options_.dino;
    encoder_ = register_module("encoder", PyramidEncoder(enc, coarse));
    fge_optical_ = register_module("fge_optical", FeatureGradientEnhancer(options_.channels, options_.fge));
    fge_sar_ = register_module("fge_sar", FeatureGradientEnhancer(options_.channels, options_.fge));
    matcher_ = register_module("matcher", Matcher(options_.channels, options_.glam));
}

std::pair<FeaturePyramid, FeaturePyramid> SomaModelImpl::pyramids(const torch::Tensor& optical,
                                                                  const torch::Tensor& sar) {
    auto po = encoder_->encode(optical, Modality::Optical);
    auto ps = encoder_->encode(sar, Modality::Sar);
    fge_optical_->enhance_pyramid(po);
    fge_sar_->enhance_pyramid(ps);
    return {std::move(po), std::move(ps)};
}

MatchResult SomaModelImpl::forward(const torch::Tensor& optical, const torch::Tensor& sar,
                                   bool with_certainty) {
    if (optical.sizes().slice(2) != sar.sizes().slice(2) || optical.size(0) != sar.size(0)) {
        throw ValidationError("model: optical and SAR batches differ in size");
    }
    auto [po, ps] = pyramids(optical, sar);
    return matcher_->match(po, ps, with_certainty);
}

std::vector<torch::Tensor> SomaModelImpl::trainable_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& p : parameters()) {
        if (p.requires_grad()) out.push_back(p);
    }
    return out;
}

std::vector<torch::Tensor> SomaModelImpl::frozen_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& p : parameters()) {
        if (!p.requires_grad()) out.push_back(p);
    }
    return out;
}

ParameterSignature SomaModelImpl::signature() const {
    ParameterSignature s;
    for (const auto& p : parameters()) (p.requires_grad() ? s.trainable : s.frozen) += p.numel();
    return s;
}

uint64_t SomaModelImpl::frozen_hash() const { return hash_tensors(frozen_parameters()); }

} // namespace soma
