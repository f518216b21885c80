#pragma once

// Training objective:
//
//   total = warp + lambda * cons + alpha_c * cert + alpha_d * delta + alpha_u * uni
//
// Every term is computed per sample and averaged over the batch. Optional
// masks (N, H, W) at level 1 restrict level-1 reductions to valid pixels.

#include <map>
#include <vector>

#include <torch/torch.h>

#include "soma/geometry.hpp"
#include "soma/glam.hpp"

namespace soma {

struct LossWeights {
    double lambda_cons = 0.5;
    double alpha_cert = 0.1;
    double alpha_delta = 0.1;
    double alpha_uni = 0.1;
    std::map<int, double> level_weights{{8, 0.125}, {4, 0.25}, {2, 0.5}, {1, 1.0}};

    bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
    torch::Tensor warp;
    torch::Tensor cons;
    torch::Tensor cert;
    torch::Tensor delta;
    torch::Tensor uni;
    torch::Tensor total;
};

/// Detached scalar copy of a breakdown, for logging.
struct LossValues {
    double warp = 0, cons = 0, cert = 0, delta = 0, uni = 0, total = 0;
    bool operator==(const LossValues&) const = default;
};
LossValues values(const LossBreakdown& b);

/// RMSE(W_1, W_gt).
torch::Tensor warp_loss(const MatchResult& result, const DisplacementField& gt,
                        const torch::Tensor& mask = {});

/// Sum over `levels` of RMSE(residual_l, affine_l) at each level's own
/// resolution.
torch::Tensor consistency_loss(const MatchResult& result, const std::vector<int>& levels = {8, 4});

/// mean over pixels of (sigmoid(logit) - exp(-|W_1 - W_gt|))^2.
torch::Tensor certainty_loss(const torch::Tensor& logits, const DisplacementField& predicted,
                             const DisplacementField& gt, const torch::Tensor& mask = {});

/// sum_l w_l * meanL1(up(residual_l) - (W_gt - up(prev_l))), with the mean
/// taken over pixels and both components.
torch::Tensor delta_loss(const MatchResult& result, const DisplacementField& gt,
                         const std::map<int, double>& level_weights,
                         const torch::Tensor& mask = {});

/// Population standard deviation of the RMSE in the four image quadrants
/// (top-left, top-right, bottom-left, bottom-right).
torch::Tensor uniformity_loss(const DisplacementField& predicted, const DisplacementField& gt,
                              const torch::Tensor& mask = {});

/// Per-quadrant RMSE, shape (N, 4).
torch::Tensor quadrant_rmse(const DisplacementField& predicted, const DisplacementField& gt,
                            const torch::Tensor& mask = {});

/// Combines all terms. The consistency term covers the levels where both an
/// affine and a flow output exist (zero if there are none).
LossBreakdown total_loss(const MatchResult& result, const DisplacementField& gt,
                         const LossWeights& weights, const torch::Tensor& mask = {});

} // namespace soma
