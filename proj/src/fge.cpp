#include "soma/fge.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <string>

#include "soma/errors.hpp"

namespace soma {

namespace F = torch::nn::functional;

namespace {

double snap(double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-12 ? r : v;
}

// Sobel-x on the integer lattice {-1, 0, 1}^2, zero elsewhere.
double sobel_x(int dx, int dy) {
    if (dx < -1 || dx > 1 || dy < -1 || dy > 1) return 0.0;
    return dx * (dy == 0 ? 2.0 : 1.0);
}

double sobel_x_bilinear(double u, double v) {
    const double u0 = std::floor(u);
    const double v0 = std::floor(v);
    const double fu = u - u0;
    const double fv = v - v0;
    const int iu = static_cast<int>(u0);
    const int iv = static_cast<int>(v0);
    return (1 - fu) * (1 - fv) * sobel_x(iu, iv) + fu * (1 - fv) * sobel_x(iu + 1, iv) +
           (1 - fu) * fv * sobel_x(iu, iv + 1) + fu * fv * sobel_x(iu + 1, iv + 1);
}

bool contains_level(int l) {
    return std::find(kFgeLevels.begin(), kFgeLevels.end(), l) != kFgeLevels.end();
}

} // namespace

GradientKernelBank build_kernel_bank() {
    GradientKernelBank bank;
    bank.kernels = torch::zeros({kDirections, 3, 3}, torch::kFloat64);
    auto acc = bank.kernels.accessor<double, 3>();
    for (int i = 0; i < kDirections; ++i) {
        const double deg = 22.5 * i;
        bank.angles_deg[i] = deg;
        const double rad = deg * std::numbers::pi / 180.0;
        const double c = snap(std::cos(rad));
        const double s = snap(std::sin(rad));
        double sum = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                // sample the base stencil at the point rotated back by theta
                const double u = snap(c * dx + s * dy);
                const double v = snap(-s * dx + c * dy);
                const double value = sobel_x_bilinear(u, v);
                acc[i][dy + 1][dx + 1] = value;
                sum += value;
            }
        }
        const double mean = sum / 9.0;
        double gain = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                acc[i][dy + 1][dx + 1] -= mean;
                gain += acc[i][dy + 1][dx + 1] * (c * dx + s * dy);
            }
        }
        // equal response to a unit ramp along theta in every direction (Sobel-x gives 8)
        const double scale = snap(8.0 / gain);
        for (int r = 0; r < 3; ++r)
            for (int col = 0; col < 3; ++col) acc[i][r][col] *= scale;
    }
    return bank;
}

void write_kernel_bank(std::ostream& out, const GradientKernelBank& bank) {
    auto acc = bank.kernels.accessor<double, 3>();
    out << std::setprecision(9);
    for (int i = 0; i < kDirections; ++i) {
        out << "# theta=" << bank.angles_deg[i] << '\n';
        for (int r = 0; r < 3; ++r) {
            out << acc[i][r][0] << ' ' << acc[i][r][1] << ' ' << acc[i][r][2] << '\n';
        }
    }
}

SpatialReconstructionImpl::SpatialReconstructionImpl(int64_t channels, int64_t groups,
                                                     double threshold)
    : gate_threshold(threshold) {
    if (channels % 2 != 0) throw ConfigError("SRU: channel count must be even");
    norm_ = register_module("norm", torch::nn::GroupNorm(group_count(channels, groups), channels));
}

torch::Tensor SpatialReconstructionImpl::forward(const torch::Tensor& x) {
    auto normed = norm_(x);
    auto w_gamma = (norm_->weight / norm_->weight.sum()).view({1, -1, 1, 1});
    auto gates = torch::sigmoid(normed * w_gamma);
    auto informative = gates > gate_threshold;
    auto x1 = torch::where(informative, torch::ones_like(gates), gates) * x;
    auto x2 = torch::where(informative, torch::zeros_like(gates), gates) * x;
    const auto half = x.size(1) / 2;
    auto a = x1.split(half, 1);
    auto b = x2.split(half, 1);
    return torch::cat({a[0] + b[1], a[1] + b[0]}, 1);
}

ChannelReconstructionImpl::ChannelReconstructionImpl(int64_t channels, const FgeOptions& o)
    : pass_through(o.cru_pass_through), channels_(channels) {
    upper_ = static_cast<int64_t>(o.cru_alpha * static_cast<double>(channels));
    const auto lower = channels - upper_;
    const auto sq_upper = upper_ / o.cru_squeeze;
    const auto sq_lower = lower / o.cru_squeeze;
    if (sq_upper < 1 || sq_lower < 1 || sq_upper % o.cru_group_size != 0 ||
        channels % o.cru_group_size != 0) {
        throw ConfigError("CRU: channel count " + std::to_string(channels) +
                          " incompatible with split/squeeze/group settings");
    }
    using torch::nn::Conv2dOptions;
    squeeze_upper_ = register_module("squeeze_upper",
                                     torch::nn::Conv2d(Conv2dOptions(upper_, sq_upper, 1).bias(false)));
    squeeze_lower_ = register_module("squeeze_lower",
                                     torch::nn::Conv2d(Conv2dOptions(lower, sq_lower, 1).bias(false)));
    group_wise_ = register_module(
        "group_wise", torch::nn::Conv2d(Conv2dOptions(sq_upper, channels, o.cru_group_kernel)
                                            .groups(o.cru_group_size)
                                            .padding(o.cru_group_kernel / 2)));
    point_wise_upper_ = register_module(
        "point_wise_upper", torch::nn::Conv2d(Conv2dOptions(sq_upper, channels, 1).bias(false)));
    point_wise_lower_ = register_module(
        "point_wise_lower",
        torch::nn::Conv2d(Conv2dOptions(sq_lower, channels - sq_lower, 1).bias(false)));
    torch::NoGradGuard guard;
    group_wise_->bias.zero_();
}

torch::Tensor ChannelReconstructionImpl::forward(const torch::Tensor& x) {
    if (pass_through) return x;
    auto up = squeeze_upper_(x.narrow(1, 0, upper_));
    auto low = squeeze_lower_(x.narrow(1, upper_, channels_ - upper_));
    auto y1 = group_wise_(up) + point_wise_upper_(up);
    auto y2 = torch::cat({point_wise_lower_(low), low}, 1);
    auto out = torch::cat({y1, y2}, 1);
    out = torch::softmax(F::adaptive_avg_pool2d(out, F::AdaptiveAvgPool2dFuncOptions(1)), 1) * out;
    return out.narrow(1, 0, channels_) + out.narrow(1, channels_, channels_);
}

ChannelAttentionImpl::ChannelAttentionImpl(int64_t channels, int64_t reduction) {
    const auto hidden = std::max<int64_t>(1, channels / reduction);
    using torch::nn::Conv2dOptions;
    reduce_ = register_module("reduce",
                              torch::nn::Conv2d(Conv2dOptions(channels, hidden, 1).bias(false)));
    expand = register_module("expand",
                             torch::nn::Conv2d(Conv2dOptions(hidden, channels, 1).bias(false)));
}

torch::Tensor ChannelAttentionImpl::forward(const torch::Tensor& x) {
    auto avg = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1));
    auto mx = F::adaptive_max_pool2d(x, F::AdaptiveMaxPool2dFuncOptions(1));
    return torch::sigmoid(expand(torch::relu(reduce_(avg))) + expand(torch::relu(reduce_(mx))));
}

SpatialAttentionImpl::SpatialAttentionImpl(int64_t kernel) {
    conv = register_module(
        "conv",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(2, 1, kernel).padding(kernel / 2).bias(false)));
}

torch::Tensor SpatialAttentionImpl::forward(const torch::Tensor& x) {
    auto stacked = torch::cat({x.mean(1, true), std::get<0>(x.max(1, true))}, 1);
    return torch::sigmoid(conv(stacked));
}

LevelEnhancerImpl::LevelEnhancerImpl(int64_t channels, const FgeOptions& o,
                                     const GradientKernelBank& bank)
    : channels_(channels) {
    using torch::nn::Conv2dOptions;
    sru = register_module("sru", SpatialReconstruction(channels, o.sru_groups, o.sru_gate_threshold));
    cru = register_module("cru", ChannelReconstruction(channels, o));

    bank_weight_ = register_buffer(
        "bank", bank.kernels.to(torch::kFloat32).repeat({channels, 1, 1}).unsqueeze(1));
    grad_fusion = register_module(
        "grad_fusion", torch::nn::Conv2d(Conv2dOptions(kDirections * channels, channels, 1)));

    channel_attention = register_module("channel_attention", ChannelAttention(channels, o.ca_reduction));
    spatial_attention = register_module("spatial_attention", SpatialAttention(o.sa_kernel));

    for (std::size_t i = 0; i < o.dilations.size(); ++i) {
        const auto d = o.dilations[i];
        dilated.push_back(register_module(
            "dilated" + std::to_string(d),
            torch::nn::Conv2d(Conv2dOptions(channels, channels, 3).dilation(d).padding(d))));
    }
    ms_fusion = register_module(
        "ms_fusion",
        torch::nn::Conv2d(Conv2dOptions(static_cast<int64_t>(dilated.size()) * channels, channels, 1)));

    gauss = register_module("gauss", torch::nn::Conv2d(Conv2dOptions(channels, channels, o.gauss_size)
                                                           .groups(channels)
                                                           .bias(false)));

    torch::NoGradGuard guard;
    grad_fusion->bias.zero_();
    auto r = torch::arange(o.gauss_size, torch::kFloat64) - static_cast<double>(o.gauss_size / 2);
    auto g1 = torch::exp(-r.pow(2) / (2.0 * o.gauss_sigma * o.gauss_sigma));
    auto g2 = torch::outer(g1, g1);
    g2 = g2 / g2.sum();
    gauss->weight.copy_(g2.to(torch::kFloat32).expand_as(gauss->weight));
}

torch::Tensor LevelEnhancerImpl::reduce_redundancy(const torch::Tensor& phi) {
    if (phi.dim() != 4 || phi.size(1) != channels_) {
        throw ValidationError("fge: expected " + std::to_string(channels_) + " input channels");
    }
    return cru(sru(phi)) + phi;
}

torch::Tensor LevelEnhancerImpl::directional_responses(const torch::Tensor& recon) {
    auto padded = F::pad(recon, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
    auto g = torch::relu(F::conv2d(padded, bank_weight_, F::Conv2dFuncOptions().groups(channels_)));
    return g.view({recon.size(0), channels_, kDirections, recon.size(2), recon.size(3)});
}

torch::Tensor LevelEnhancerImpl::extract_gradients(const torch::Tensor& recon) {
    auto g = directional_responses(recon).flatten(1, 2);
    return grad_fusion(g) + recon;
}

std::pair<torch::Tensor, torch::Tensor> LevelEnhancerImpl::attend_and_fuse(const torch::Tensor& grad) {
    auto att = grad * channel_attention(grad) * spatial_attention(grad) + grad;
    std::vector<torch::Tensor> branches;
    branches.reserve(dilated.size());
    for (auto& conv : dilated) branches.push_back(conv(att));
    return {att, ms_fusion(torch::cat(branches, 1))};
}

torch::Tensor LevelEnhancerImpl::smooth(const torch::Tensor& x) {
    const auto pad = gauss->options.kernel_size()->at(0) / 2;
    return gauss(F::pad(x, F::PadFuncOptions({pad, pad, pad, pad}).mode(torch::kReplicate)));
}

torch::Tensor LevelEnhancerImpl::forward(const torch::Tensor& phi) {
    auto recon = reduce_redundancy(phi);
    auto grad = extract_gradients(recon);
    auto [att, ms] = attend_and_fuse(grad);
    return att + smooth(ms);
}

FeatureGradientEnhancerImpl::FeatureGradientEnhancerImpl(const ChannelSchedule& channels,
                                                         const FgeOptions& options)
    : options_(options) {
    if (!options_.enabled) return;
    const auto bank = build_kernel_bank();
    for (int l : kFgeLevels) {
        levels_.emplace(l, register_module("level" + std::to_string(l),
                                           LevelEnhancer(channels.at(l), options_, bank)));
    }
}

LevelEnhancer FeatureGradientEnhancerImpl::level(int l) const {
    if (!contains_level(l)) {
        throw ValidationError("fge: level " + std::to_string(l) + " is not one of 2, 4, 8");
    }
    if (!options_.enabled) throw ConfigError("fge: enhancer is disabled");
    return levels_.at(l);
}

torch::Tensor FeatureGradientEnhancerImpl::enhance(const torch::Tensor& phi, int l) {
    if (!contains_level(l)) {
        throw ValidationError("fge: level " + std::to_string(l) + " is not one of 2, 4, 8");
    }
    if (!options_.enabled) return phi;
    return levels_.at(l)->forward(phi);
}

void FeatureGradientEnhancerImpl::enhance_pyramid(FeaturePyramid& pyramid) {
    for (int l : kFgeLevels) pyramid.levels[l] = enhance(pyramid.at(l), l);
}

} // namespace soma
