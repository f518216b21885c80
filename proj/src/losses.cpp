#include "soma/losses.hpp"

#include <string>

#include "soma/errors.hpp"

namespace soma {

namespace {

void check_level1(const DisplacementField& f, const DisplacementField& gt, const char* what) {
    if (gt.level != 1 || f.level != 1) {
        throw ValidationError(std::string(what) + ": fields must be at level 1");
    }
    check_same_shape(f, gt, what);
}

torch::Tensor mask_as(const torch::Tensor& mask, const torch::Tensor& like) {
    return mask.to(like.dtype());
}

// Mean over (H, W) of x (N, H, W), optionally restricted to mask.
torch::Tensor masked_mean_hw(const torch::Tensor& x, const torch::Tensor& mask) {
    if (!mask.defined()) return x.mean({1, 2});
    if (mask.sizes() != x.sizes()) throw ValidationError("loss: mask must have shape (N, H, W)");
    auto m = mask_as(mask, x);
    return (x * m).sum({1, 2}) / m.sum({1, 2}).clamp_min(1.0);
}

} // namespace

LossValues values(const LossBreakdown& b) {
    auto v = [](const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; };
    return {v(b.warp), v(b.cons), v(b.cert), v(b.delta), v(b.uni), v(b.total)};
}

torch::Tensor warp_loss(const MatchResult& result, const DisplacementField& gt,
                        const torch::Tensor& mask) {
    check_level1(result.final_field, gt, "warp_loss");
    return field_rmse_per_sample(result.final_field, gt, mask).mean();
}

torch::Tensor consistency_loss(const MatchResult& result, const std::vector<int>& levels) {
    if (levels.empty()) throw ValidationError("consistency_loss: no levels given");
    torch::Tensor sum;
    for (int l : levels) {
        auto it = result.per_level.find(l);
        if (it == result.per_level.end() || !it->second.residual || !it->second.affine) {
            throw ValidationError("consistency_loss: level " + std::to_string(l) +
                                  " lacks a flow or affine output");
        }
        auto term = field_rmse_per_sample(*it->second.residual, *it->second.affine).mean();
        sum = sum.defined() ? sum + term : term;
    }
    return sum;
}

torch::Tensor certainty_loss(const torch::Tensor& logits, const DisplacementField& predicted,
                             const DisplacementField& gt, const torch::Tensor& mask) {
    check_level1(predicted, gt, "certainty_loss");
    if (!logits.defined() || logits.dim() != 3 || logits.size(0) != gt.batch() ||
        logits.size(1) != gt.height() || logits.size(2) != gt.width()) {
        throw ValidationError("certainty_loss: logits must have shape (N, H, W)");
    }
    auto epe = safe_sqrt((predicted.data - gt.data).pow(2).sum(3));
    auto sq = (torch::sigmoid(logits) - torch::exp(-epe)).pow(2);
    return masked_mean_hw(sq, mask).mean();
}

torch::Tensor delta_loss(const MatchResult& result, const DisplacementField& gt,
                         const std::map<int, double>& level_weights, const torch::Tensor& mask) {
    if (gt.level != 1) throw ValidationError("delta_loss: ground truth must be at level 1");
    torch::Tensor sum;
    for (const auto& [l, weight] : level_weights) {
        auto it = result.per_level.find(l);
        if (it == result.per_level.end() || !it->second.residual) {
            throw ValidationError("delta_loss: level " + std::to_string(l) + " has no residual flow");
        }
        const auto& out = it->second;
        auto residual = l == 1 ? *out.residual : upsample_field(*out.residual, 1);
        auto prev = l == 1 ? out.prev : upsample_field(out.prev, 1);
        check_same_shape(residual, gt, "delta_loss");
        auto gap = gt.data - prev.data;
        auto l1 = (residual.data - gap).abs().mean(3); // (N, H, W), mean over components
        auto term = masked_mean_hw(l1, mask).mean() * weight;
        sum = sum.defined() ? sum + term : term;
    }
    if (!sum.defined()) sum = torch::zeros({}, gt.data.options());
    return sum;
}

torch::Tensor quadrant_rmse(const DisplacementField& predicted, const DisplacementField& gt,
                            const torch::Tensor& mask) {
    check_level1(predicted, gt, "uniformity_loss");
    const auto h = gt.height();
    const auto w = gt.width();
    if (h % 2 != 0 || w % 2 != 0) {
        throw ValidationError("uniformity_loss: height and width must be even");
    }
    auto sq = (predicted.data - gt.data).pow(2).sum(3);
    std::vector<torch::Tensor> parts;
    for (int64_t qy : {0, 1}) {
        for (int64_t qx : {0, 1}) {
            auto block = sq.narrow(1, qy * h / 2, h / 2).narrow(2, qx * w / 2, w / 2);
            torch::Tensor m;
            if (mask.defined()) m = mask.narrow(1, qy * h / 2, h / 2).narrow(2, qx * w / 2, w / 2);
            parts.push_back(safe_sqrt(masked_mean_hw(block, m)));
        }
    }
    return torch::stack(parts, 1);
}

torch::Tensor uniformity_loss(const DisplacementField& predicted, const DisplacementField& gt,
                              const torch::Tensor& mask) {
    auto q = quadrant_rmse(predicted, gt, mask);
    auto var = (q - q.mean(1, true)).pow(2).mean(1);
    return safe_sqrt(var).mean();
}

LossBreakdown total_loss(const MatchResult& result, const DisplacementField& gt,
                         const LossWeights& weights, const torch::Tensor& mask) {
    LossBreakdown b;
    b.warp = warp_loss(result, gt, mask);

    std::vector<int> coupled;
    for (const auto& [l, out] : result.per_level) {
        if (out.residual && out.affine) coupled.push_back(l);
    }
    b.cons = coupled.empty() ? torch::zeros({}, gt.data.options()) : consistency_loss(result, coupled);

    b.cert = result.certainty_logits.defined()
                 ? certainty_loss(result.certainty_logits, result.final_field, gt, mask)
                 : torch::zeros({}, gt.data.options());

    std::map<int, double> present;
    for (const auto& [l, wl] : weights.level_weights) {
        auto it = result.per_level.find(l);
        if (it != result.per_level.end() && it->second.residual) present[l] = wl;
    }
    b.delta = delta_loss(result, gt, present, mask);
    b.uni = uniformity_loss(result.final_field, gt, mask);

    b.total = b.warp + weights.lambda_cons * b.cons + weights.alpha_cert * b.cert +
              weights.alpha_delta * b.delta + weights.alpha_uni * b.uni;
    return b;
}

} // namespace soma
