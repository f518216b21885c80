#include "soma/geometry.hpp"

#include <algorithm>
#include <string>

#include "soma/errors.hpp"

namespace soma {

bool is_valid_level(int level) {
    return std::find(kLevels.begin(), kLevels.end(), level) != kLevels.end();
}

DisplacementField DisplacementField::zeros(int64_t n, int64_t h, int64_t w, int level,
                                           torch::TensorOptions options) {
    return {torch::zeros({n, h, w, 2}, options), level};
}

DisplacementField DisplacementField::from_channels(const torch::Tensor& nchw, int level) {
    if (nchw.dim() != 4 || nchw.size(1) != 2) {
        throw ValidationError("from_channels: expected (N, 2, H, W), got " +
                              std::to_string(nchw.dim()) + "-d tensor");
    }
    return {nchw.permute({0, 2, 3, 1}), level};
}

AffineParams AffineParams::identity(int64_t n, torch::TensorOptions options) {
    auto eye = torch::zeros({2, 3}, options);
    eye[0][0] = 1;
    eye[1][1] = 1;
    return {eye.unsqueeze(0).repeat({n, 1, 1})};
}

Grid make_grid(int64_t height, int64_t width, GridConvention convention,
               torch::TensorOptions options) {
    auto xs = torch::arange(width, options);
    auto ys = torch::arange(height, options);
    if (convention == GridConvention::Normalized) {
        xs = xs * (2.0 / static_cast<double>(width - 1)) - 1.0;
        ys = ys * (2.0 / static_cast<double>(height - 1)) - 1.0;
    }
    auto gx = xs.view({1, width}).expand({height, width});
    auto gy = ys.view({height, 1}).expand({height, width});
    return {torch::stack({gx, gy}, -1), convention};
}

void check_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>()) {
        throw ValidationError(std::string(what) + ": non-finite entries");
    }
}

void check_same_shape(const DisplacementField& a, const DisplacementField& b, const char* what) {
    if (a.data.sizes() != b.data.sizes()) {
        throw ValidationError(std::string(what) + ": field shapes differ");
    }
}

namespace {

void check_theta(const AffineParams& theta) {
    const auto& t = theta.theta;
    if (t.dim() != 3 || t.size(1) != 2 || t.size(2) != 3) {
        throw ValidationError("affine: theta must have shape (N, 2, 3)");
    }
    check_finite(t, "affine");
}

torch::Tensor to_homogeneous(const AffineParams& theta) {
    auto n = theta.batch();
    auto last = torch::zeros({n, 1, 3}, theta.theta.options());
    last.select(2, 2).fill_(1);
    return torch::cat({theta.theta, last}, 1);
}

} // namespace

DisplacementField affine_to_flow(const AffineParams& theta, int64_t height, int64_t width,
                                 int level) {
    if (height < 2 || width < 2) {
        throw ValidationError("affine_to_flow: height and width must be >= 2");
    }
    check_theta(theta);
    auto opts = theta.theta.options();
    auto norm = make_grid(height, width, GridConvention::Normalized, opts).coords;
    auto hom = torch::cat({norm.reshape({height * width, 2}),
                           torch::ones({height * width, 1}, opts)},
                          1);
    // P is affine with P(N(x)) = x, so P(A n) - x = scale * ((A - I) n); this
    // keeps the identity transform exactly zero.
    auto offset = theta.theta - AffineParams::identity(theta.batch(), opts).theta;
    auto moved = torch::matmul(hom, offset.transpose(1, 2)); // (N, HW, 2)
    auto scale = torch::tensor({(width - 1) / 2.0, (height - 1) / 2.0}, opts);
    auto disp = (moved * scale).reshape({theta.batch(), height, width, 2});
    return {disp, level};
}

AffineParams affine_then(const AffineParams& first, const AffineParams& second) {
    check_theta(first);
    check_theta(second);
    auto product = torch::matmul(to_homogeneous(second), to_homogeneous(first));
    return {product.narrow(1, 0, 2)};
}

AffineParams affine_inverse(const AffineParams& theta) {
    check_theta(theta);
    return {torch::inverse(to_homogeneous(theta)).narrow(1, 0, 2)};
}

torch::Tensor sample_bilinear(const torch::Tensor& feature, const torch::Tensor& coords,
                              Padding padding) {
    if (feature.dim() != 4 || coords.dim() != 4 || coords.size(3) != 2 ||
        coords.size(0) != feature.size(0)) {
        throw ValidationError("sample_bilinear: expected feature (N,C,H,W) and coords (N,Ho,Wo,2)");
    }
    const auto n = feature.size(0);
    const auto c = feature.size(1);
    const auto h = feature.size(2);
    const auto w = feature.size(3);
    const auto ho = coords.size(1);
    const auto wo = coords.size(2);

    auto x = coords.select(3, 0);
    auto y = coords.select(3, 1);
    if (padding == Padding::Border) {
        x = x.clamp(0, static_cast<double>(w - 1));
        y = y.clamp(0, static_cast<double>(h - 1));
    }
    auto x0 = x.detach().floor();
    auto y0 = y.detach().floor();
    auto wx1 = x - x0;
    auto wy1 = y - y0;
    auto wx0 = 1 - wx1;
    auto wy0 = 1 - wy1;

    auto ix0 = x0.to(torch::kLong);
    auto iy0 = y0.to(torch::kLong);
    auto ix1 = ix0 + 1;
    auto iy1 = iy0 + 1;

    auto flat = feature.reshape({n, c, h * w});
    auto tap = [&](const torch::Tensor& ix, const torch::Tensor& iy, const torch::Tensor& weight) {
        auto valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h);
        auto index = (iy.clamp(0, h - 1) * w + ix.clamp(0, w - 1))
                         .reshape({n, 1, ho * wo})
                         .expand({n, c, ho * wo});
        auto values = flat.gather(2, index).reshape({n, c, ho, wo});
        auto wt = torch::where(valid, weight, torch::zeros_like(weight));
        return values * wt.unsqueeze(1);
    };
    return tap(ix0, iy0, wx0 * wy0) + tap(ix1, iy0, wx1 * wy0) + tap(ix0, iy1, wx0 * wy1) +
           tap(ix1, iy1, wx1 * wy1);
}

torch::Tensor warp(const torch::Tensor& feature, const DisplacementField& field, Padding padding) {
    if (feature.dim() != 4 || feature.size(0) != field.batch() ||
        feature.size(2) != field.height() || feature.size(3) != field.width()) {
        throw ValidationError("warp: feature (N,C,H,W) does not match field (N,H,W,2)");
    }
    auto grid = make_grid(field.height(), field.width(), GridConvention::Pixel,
                          field.data.options());
    return sample_bilinear(feature, grid.coords.unsqueeze(0) + field.data, padding);
}

DisplacementField compose(const DisplacementField& prev, const DisplacementField& delta) {
    if (prev.level != delta.level) {
        throw ValidationError("compose: level mismatch (" + std::to_string(prev.level) + " vs " +
                              std::to_string(delta.level) + ")");
    }
    check_same_shape(prev, delta, "compose");
    auto carried = warp(prev.channels(), delta, Padding::Border).permute({0, 2, 3, 1});
    return {carried + delta.data, prev.level};
}

DisplacementField upsample_field(const DisplacementField& field, int target_level) {
    if (!is_valid_level(field.level) || !is_valid_level(target_level) ||
        target_level >= field.level) {
        throw ValidationError("upsample_field: invalid level pair " + std::to_string(field.level) +
                              " -> " + std::to_string(target_level));
    }
    const int scale = field.level / target_level;
    const auto h = field.height() * scale;
    const auto w = field.width() * scale;
    auto fine = make_grid(h, w, GridConvention::Pixel, field.data.options()).coords;
    auto coarse = (fine / static_cast<double>(scale)).unsqueeze(0).expand({field.batch(), h, w, 2});
    auto sampled = sample_bilinear(field.channels(), coarse, Padding::Border);
    return {sampled.permute({0, 2, 3, 1}) * static_cast<double>(scale), target_level};
}

torch::Tensor safe_sqrt(const torch::Tensor& x) {
    auto zero = x <= 0;
    auto safe = torch::where(zero, torch::ones_like(x), x);
    return torch::where(zero, torch::zeros_like(x), safe.sqrt());
}

torch::Tensor field_rmse_per_sample(const DisplacementField& a, const DisplacementField& b,
                                    const torch::Tensor& mask) {
    check_same_shape(a, b, "field_rmse");
    auto sq = (a.data - b.data).pow(2).sum(3);
    torch::Tensor mean;
    if (mask.defined()) {
        if (mask.sizes() != sq.sizes()) {
            throw ValidationError("field_rmse: mask must have shape (N, H, W)");
        }
        auto m = mask.to(sq.dtype());
        mean = (sq * m).sum({1, 2}) / m.sum({1, 2}).clamp_min(1.0);
    } else {
        mean = sq.mean({1, 2});
    }
    return safe_sqrt(mean);
}

torch::Tensor field_rmse(const DisplacementField& a, const DisplacementField& b) {
    return field_rmse_per_sample(a, b).mean();
}

} // namespace soma
