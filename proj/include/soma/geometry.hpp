#pragma once

// Coordinate conventions and deformation-field algebra.
//
// Pixel coordinates: x runs along columns, y along rows, pixel centres sit on
// integers. Normalized coordinates map the centres of the first and last pixel
// of an axis to -1 and +1 (align-corners). A level-l grid samples the full
// resolution image at x_full = l * x_l, which is the layout a stride-2 conv
// with padding 1 produces.
//
// Fields use the backward convention: for a pixel x of the reference (optical)
// grid, x + field(x) is where the moving (SAR) image is sampled. warp() applies
// that convention to arbitrary feature maps.

#include <array>
#include <cstdint>
#include <filesystem>

#include <torch/torch.h>

namespace soma {

inline constexpr std::array<int, 5> kLevels{1, 2, 4, 8, 16};

bool is_valid_level(int level);

enum class Padding { Zeros, Border };

enum class GridConvention { Pixel, Normalized };

/// Dense per-pixel displacement. data has shape (N, H_l, W_l, 2) holding
/// (dx, dy) in pixels of its own level.
struct DisplacementField {
    torch::Tensor data;
    int level = 1;

    int64_t batch() const { return data.size(0); }
    int64_t height() const { return data.size(1); }
    int64_t width() const { return data.size(2); }

    static DisplacementField zeros(int64_t n, int64_t h, int64_t w, int level,
                                   torch::TensorOptions options = torch::kFloat32);
    /// Wraps a decoder output of shape (N, 2, H, W).
    static DisplacementField from_channels(const torch::Tensor& nchw, int level);
    /// (N, 2, H, W) view for convolution / sampling.
    torch::Tensor channels() const { return data.permute({0, 3, 1, 2}); }
};

/// 2x3 affine matrices in normalized coordinates, one per batch element:
/// theta has shape (N, 2, 3).
struct AffineParams {
    torch::Tensor theta;

    static AffineParams identity(int64_t n, torch::TensorOptions options = torch::kFloat32);
    int64_t batch() const { return theta.size(0); }
};

struct Grid {
    torch::Tensor coords; // (H, W, 2)
    GridConvention convention = GridConvention::Pixel;
};

Grid make_grid(int64_t height, int64_t width, GridConvention convention,
               torch::TensorOptions options = torch::kFloat32);

/// Displacement induced by theta: D(x) = P(A(N(x))) - x.
DisplacementField affine_to_flow(const AffineParams& theta, int64_t height, int64_t width,
                                 int level = 1);

/// Composes two affine maps so that the result applies `first` then `second`
/// to a point (the matrix product second * first in homogeneous form).
AffineParams affine_then(const AffineParams& first, const AffineParams& second);

/// Inverse of each affine map.
AffineParams affine_inverse(const AffineParams& theta);

/// Bilinear sampling of feature (N, C, H, W) at pixel coordinates
/// coords (N, Ho, Wo, 2). Out-of-range taps read zero (Zeros) or are clamped
/// onto the image (Border). Differentiable in both arguments.
torch::Tensor sample_bilinear(const torch::Tensor& feature, const torch::Tensor& coords,
                              Padding padding = Padding::Zeros);

/// output(x) = feature(x + field(x)).
torch::Tensor warp(const torch::Tensor& feature, const DisplacementField& field,
                   Padding padding = Padding::Zeros);

/// result(x) = prev(x + delta(x)) + delta(x). prev is sampled with border
/// replication so the composition stays defined near the image edge.
DisplacementField compose(const DisplacementField& prev, const DisplacementField& delta);

/// Bilinear upsampling to a finer level; values are rescaled into the target
/// level's pixel units.
DisplacementField upsample_field(const DisplacementField& field, int target_level);

/// sqrt with a zero (instead of infinite) derivative at 0.
torch::Tensor safe_sqrt(const torch::Tensor& x);

/// Per-sample end-point RMSE, shape (N). `mask` (N, H, W) restricts the mean
/// to valid pixels when defined.
torch::Tensor field_rmse_per_sample(const DisplacementField& a, const DisplacementField& b,
                                    const torch::Tensor& mask = {});

/// Scalar end-point RMSE averaged over the batch.
torch::Tensor field_rmse(const DisplacementField& a, const DisplacementField& b);

void check_finite(const torch::Tensor& t, const char* what);
void check_same_shape(const DisplacementField& a, const DisplacementField& b, const char* what);

/// Binary field container, see README ("Field file format").
void save_field(const std::filesystem::path& path, const DisplacementField& field);
DisplacementField load_field(const std::filesystem::path& path);

} // namespace soma
