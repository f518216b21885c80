#include "soma/encoder.hpp"

#include <string>

#include "soma/errors.hpp"

namespace soma {

namespace F = torch::nn::functional;

std::string to_string(Modality m) { return m == Modality::Optical ? "optical" : "sar"; }

int64_t ChannelSchedule::at(int level) const {
    switch (level) {
    case 1: return c1;
    case 2: return c2;
    case 4: return c4;
    case 8: return c8;
    case 16: return c16;
    default: throw ValidationError("no channel width for level " + std::to_string(level));
    }
}

const torch::Tensor& FeaturePyramid::at(int level) const {
    auto it = levels.find(level);
    if (it == levels.end()) {
        throw ValidationError("pyramid has no level " + std::to_string(level));
    }
    return it->second;
}

void CoarseEncoderImpl::freeze() {
    for (auto& p : parameters()) p.set_requires_grad(false);
    frozen_ = true;
}

namespace {

torch::Tensor as_rgb(const torch::Tensor& image) {
    if (image.size(1) == 3) return image;
    if (image.size(1) == 1) return image.expand({-1, 3, -1, -1});
    return image.mean(1, true).expand({-1, 3, -1, -1});
}

} // namespace

RandomCoarseEncoderImpl::RandomCoarseEncoderImpl(int64_t channels, int64_t patch, uint64_t seed)
    : channels_(channels), patch_(patch) {
    if (channels < 1 || patch < 1) throw ConfigError("coarse encoder: invalid channels/patch");
    embed_ = register_module(
        "embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, channels, patch).stride(patch)));
    mix_ = register_module("mix", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));

    auto gen = at::detail::createCPUGenerator(seed);
    torch::NoGradGuard guard;
    const double fan_in = 3.0 * static_cast<double>(patch * patch);
    embed_->weight.copy_(torch::randn(embed_->weight.sizes(), gen) * std::sqrt(2.0 / fan_in));
    embed_->bias.zero_();
    mix_->weight.copy_(torch::randn(mix_->weight.sizes(), gen) *
                       std::sqrt(1.0 / static_cast<double>(channels)));
    mix_->bias.zero_();
    freeze();
}

torch::Tensor RandomCoarseEncoderImpl::forward(const torch::Tensor& image) {
    std::optional<torch::NoGradGuard> guard;
    if (frozen_) guard.emplace();
    auto y = mix_(F::gelu(embed_(as_rgb(image) - 0.5)));
    // per-location standardisation, like a parameter-free LayerNorm over tokens
    auto mean = y.mean(1, true);
    auto var = (y - mean).pow(2).mean(1, true);
    return (y - mean) / (var + 1e-6).sqrt();
}

ScriptedCoarseEncoderImpl::ScriptedCoarseEncoderImpl(const std::filesystem::path& path,
                                                     int64_t channels)
    : channels_(channels) {
    try {
        module_ = torch::jit::load(path.string());
    } catch (const c10::Error& e) {
        throw LoadError("cannot load scripted coarse encoder " + path.string() + ": " + e.what());
    }
    module_.eval();
    for (auto p : module_.parameters()) p.set_requires_grad(false);
    frozen_ = true;
}

torch::Tensor ScriptedCoarseEncoderImpl::forward(const torch::Tensor& image) {
    torch::NoGradGuard guard;
    auto out = module_.forward({as_rgb(image).to(torch::kFloat32)}).toTensor();
    if (out.dim() != 4 || out.size(1) != channels_) {
        throw ValidationError("scripted coarse encoder returned an unexpected shape");
    }
    return out.to(image.scalar_type());
}

CoarseEncoderHandle make_random_coarse_encoder(int64_t channels, int64_t patch, uint64_t seed) {
    return std::make_shared<RandomCoarseEncoderImpl>(channels, patch, seed);
}

CoarseEncoderHandle make_scripted_coarse_encoder(const std::filesystem::path& path,
                                                 int64_t channels) {
    return std::make_shared<ScriptedCoarseEncoderImpl>(path, channels);
}

torch::Tensor adapt_coarse_grid(const torch::Tensor& raw, int64_t height, int64_t width) {
    if (raw.dim() != 4 || raw.size(2) < 1 || raw.size(3) < 1 || height < 1 || width < 1) {
        throw ValidationError("adapt_coarse_grid: expected (N, C, h, w) with h, w >= 1");
    }
    if (raw.size(2) == height && raw.size(3) == width) return raw;
    return F::interpolate(raw, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{height, width})
                                   .mode(torch::kBilinear)
                                   .align_corners(true));
}

int64_t group_count(int64_t channels, int64_t preferred) {
    for (int64_t g = std::min(preferred, channels); g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

ConvBlockImpl::ConvBlockImpl(int64_t in, int64_t out, int64_t stride, bool residual)
    : residual_(residual && in == out && stride == 1) {
    conv_ = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1)));
    norm_ = register_module("norm", torch::nn::GroupNorm(group_count(out, 8), out));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
    auto y = norm_(conv_(x));
    if (residual_) y = y + x;
    return torch::relu(y);
}

BackboneImpl::BackboneImpl(int64_t in_channels, const ChannelSchedule& channels,
                           bool with_level16)
    : with_level16_(with_level16) {
    input_ = register_module(
        "input", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, channels.c1, 1)));
    stem_ = register_module("stem", torch::nn::Sequential(ConvBlock(channels.c1, channels.c1, 1, false),
                                                          ConvBlock(channels.c1, channels.c1, 1, true)));
    int64_t prev = channels.c1;
    for (int level : {2, 4, 8, 16}) {
        if (level == 16 && !with_level16) break;
        const auto width = channels.at(level);
        stages_.emplace(level, register_module("stage" + std::to_string(level),
                                               torch::nn::Sequential(ConvBlock(prev, width, 2, false),
                                                                     ConvBlock(width, width, 1, true))));
        prev = width;
    }
}

std::map<int, torch::Tensor> BackboneImpl::forward(const torch::Tensor& image) {
    std::map<int, torch::Tensor> out;
    auto x = stem_->forward(input_(image - 0.5));
    out[1] = x;
    for (auto& [level, stage] : stages_) {
        x = stage->forward(x);
        out[level] = x;
    }
    return out;
}

PyramidEncoderImpl::PyramidEncoderImpl(const EncoderOptions& options, CoarseEncoderHandle coarse)
    : options_(options), coarse_(std::move(coarse)) {
    if (options_.use_coarse && !coarse_) {
        throw ConfigError("encoder: coarse encoder enabled but no handle was provided");
    }
    const bool own16 = !options_.use_coarse;
    optical_ = register_module("optical", Backbone(options_.optical_channels, options_.channels, own16));
    sar_ = register_module("sar", Backbone(options_.sar_channels, options_.channels, own16));
    if (options_.use_coarse) {
        register_module("coarse", coarse_);
        auto proj = [&] {
            return torch::nn::Conv2d(
                torch::nn::Conv2dOptions(coarse_->channels(), options_.channels.c16, 1));
        };
        coarse_proj_optical_ = register_module("coarse_proj_optical", proj());
        coarse_proj_sar_ = register_module("coarse_proj_sar", proj());
    }
}

FeaturePyramid PyramidEncoderImpl::encode(const torch::Tensor& image, Modality modality) {
    if (image.dim() != 4) throw ValidationError("encode: expected an (N, C, H, W) image batch");
    const auto h = image.size(2);
    const auto w = image.size(3);
    if (h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0) {
        throw ValidationError("encode: image size " + std::to_string(h) + "x" + std::to_string(w) +
                              " is not divisible by 16");
    }
    const auto expected = modality == Modality::Optical ? options_.optical_channels
                                                        : options_.sar_channels;
    if (image.size(1) != expected) {
        throw ValidationError("encode: " + to_string(modality) + " image has " +
                              std::to_string(image.size(1)) + " channels, expected " +
                              std::to_string(expected));
    }
    FeaturePyramid pyr;
    pyr.modality = modality;
    pyr.levels = backbone(modality)->forward(image);
    if (options_.use_coarse) {
        if (!coarse_) throw ConfigError("encode: coarse encoder missing");
        auto raw = adapt_coarse_grid(coarse_->forward(image), h / 16, w / 16);
        auto& proj = modality == Modality::Optical ? coarse_proj_optical_ : coarse_proj_sar_;
        pyr.levels[16] = proj(raw);
    }
    return pyr;
}

} // namespace soma
