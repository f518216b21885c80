#include "soma/glam.hpp"

#include <algorithm>
#include <string>

#include "soma/errors.hpp"

namespace soma {

namespace F = torch::nn::functional;

namespace {

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

torch::nn::Conv2d conv3x3(int64_t in, int64_t out) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

constexpr std::array<int, 5> kCoarseToFine{16, 8, 4, 2, 1};

} // namespace

std::vector<int> GlamOptions::effective_affine_levels() const {
    return enabled ? affine_levels : std::vector<int>{};
}

std::vector<int> GlamOptions::effective_flow_levels() const {
    return enabled ? flow_levels : std::vector<int>{16, 8, 4, 2, 1};
}

const LevelOutput& MatchResult::at(int level) const {
    auto it = per_level.find(level);
    if (it == per_level.end()) throw ValidationError("match result has no level " + std::to_string(level));
    return it->second;
}

AffineRegressorImpl::AffineRegressorImpl(int64_t in_channels, int64_t width) {
    conv1_ = register_module("conv1", conv3x3(in_channels, width));
    conv2_ = register_module("conv2", conv3x3(width, width));
    hidden_ = register_module("hidden", torch::nn::Linear(width, width));
    head = register_module("head", torch::nn::Linear(width, 6));
    torch::NoGradGuard guard;
    head->weight.zero_();
    head->bias.zero_();
}

AffineParams AffineRegressorImpl::forward(const torch::Tensor& x) {
    auto y = torch::relu(conv2_(torch::relu(conv1_(x))));
    auto pooled = y.mean({2, 3});
    auto delta = head(torch::relu(hidden_(pooled))).view({-1, 2, 3});
    auto identity = AffineParams::identity(x.size(0), x.options()).theta;
    return {identity + delta};
}

FlowRegressorImpl::FlowRegressorImpl(int64_t in_channels, int64_t width) {
    conv1_ = register_module("conv1", conv3x3(in_channels, width));
    conv2_ = register_module("conv2", conv3x3(width, width));
    head = register_module("head", conv3x3(width, 2));
    torch::NoGradGuard guard;
    head->weight.zero_();
    head->bias.zero_();
}

std::pair<DisplacementField, torch::Tensor> FlowRegressorImpl::forward(const torch::Tensor& x,
                                                                       int level) {
    auto features = torch::relu(conv2_(torch::relu(conv1_(x))));
    return {DisplacementField::from_channels(head(features), level), features};
}

CertaintyHeadImpl::CertaintyHeadImpl(int64_t width) {
    conv_ = register_module("conv", conv3x3(width, 1));
}

torch::Tensor CertaintyHeadImpl::forward(const torch::Tensor& features) {
    return conv_(features).squeeze(1);
}

MatcherImpl::MatcherImpl(const ChannelSchedule& channels, const GlamOptions& options)
    : options_(options) {
    const auto affine_levels = options_.effective_affine_levels();
    const auto flow_levels = options_.effective_flow_levels();
    for (int l : affine_levels) {
        if (!is_valid_level(l)) throw ConfigError("glam: invalid affine level " + std::to_string(l));
    }
    for (int l : flow_levels) {
        if (!is_valid_level(l)) throw ConfigError("glam: invalid flow level " + std::to_string(l));
    }
    if (!contains(flow_levels, 1)) throw ConfigError("glam: level 1 must run a flow decoder");
    if (!contains(flow_levels, 16) && !contains(affine_levels, 16)) {
        throw ConfigError("glam: level 16 needs an affine or flow decoder");
    }
    auto width = [&](int l) { return std::min(channels.at(l), options_.max_decoder_width); };
    for (int l : affine_levels) {
        affine_.emplace(l, register_module("affine" + std::to_string(l),
                                           AffineRegressor(2 * channels.at(l), width(l))));
    }
    for (int l : flow_levels) {
        flow_.emplace(l, register_module("flow" + std::to_string(l),
                                         FlowRegressor(2 * channels.at(l), width(l))));
    }
    certainty_ = register_module("certainty", CertaintyHead(width(1)));
}

MatchResult MatcherImpl::match(const FeaturePyramid& optical, const FeaturePyramid& sar,
                               bool with_certainty) {
    for (int l : kCoarseToFine) {
        if (optical.at(l).sizes() != sar.at(l).sizes()) {
            throw ValidationError("match: optical and SAR pyramids differ at level " + std::to_string(l));
        }
    }
    MatchResult result;
    std::optional<DisplacementField> coarser;
    for (int l : kCoarseToFine) {
        const auto& phi_o = optical.at(l);
        const auto& phi_s = sar.at(l);
        const auto n = phi_o.size(0);
        const auto h = phi_o.size(2);
        const auto w = phi_o.size(3);

        LevelOutput out;
        torch::Tensor moving = phi_s;
        if (coarser) {
            out.prev = upsample_field(*coarser, l);
            moving = warp(phi_s, out.prev);
        } else {
            out.prev = DisplacementField::zeros(n, h, w, l, phi_o.options());
        }
        auto input = torch::cat({phi_o, moving}, 1);

        if (has_affine(l)) {
            out.theta = affine_.at(l)->forward(input);
            out.affine = affine_to_flow(*out.theta, h, w, l);
        }
        if (has_flow(l)) {
            auto [residual, features] = flow_.at(l)->forward(input, l);
            out.residual = residual;
            out.accumulated = compose(out.prev, residual);
            if (l == 1 && with_certainty) result.certainty_logits = certainty_(features);
        } else if (out.affine) {
            out.accumulated = coarser ? compose(out.prev, *out.affine) : *out.affine;
        } else {
            out.accumulated = out.prev;
        }
        coarser = out.accumulated;
        result.per_level.emplace(l, std::move(out));
    }
    result.final_field = result.per_level.at(1).accumulated;
    return result;
}

} // namespace soma
