#pragma once

// Shared fixtures for the unit and acceptance tests: loop-based reference
// implementations, a central finite-difference checker and small model and
// dataset builders.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "soma/data.hpp"
#include "soma/geometry.hpp"
#include "soma/glam.hpp"
#include "soma/model.hpp"

namespace soma::testing {

inline torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("soma_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline DisplacementField random_field(int64_t n, int64_t h, int64_t w, int level, double scale,
                                      torch::Generator& gen) {
    return {torch::randn({n, h, w, 2}, gen, f64()) * scale, level};
}

inline torch::Tensor random_mask(int64_t n, int64_t h, int64_t w, torch::Generator& gen) {
    auto m = torch::rand({n, h, w}, gen, f64()) > 0.3;
    m.index_put_({torch::indexing::Slice(), 0, 0}, true); // never empty
    return m;
}

// Reference implementations written as plain loops over doubles.
namespace oracle {

inline double at4(const torch::Tensor& t, int64_t a, int64_t b, int64_t c, int64_t d) {
    return t.accessor<double, 4>()[a][b][c][d];
}

/// Per-sample masked end-point RMSE.
inline std::vector<double> rmse(const torch::Tensor& a_in, const torch::Tensor& b_in,
                                const torch::Tensor& mask_in = {}) {
    auto a = a_in.to(torch::kFloat64).contiguous();
    auto b = b_in.to(torch::kFloat64).contiguous();
    auto A = a.accessor<double, 4>();
    auto B = b.accessor<double, 4>();
    torch::Tensor mask;
    if (mask_in.defined()) mask = mask_in.to(torch::kFloat64).contiguous();
    std::vector<double> out;
    for (int64_t n = 0; n < a.size(0); ++n) {
        double sum = 0.0;
        double count = 0.0;
        for (int64_t y = 0; y < a.size(1); ++y) {
            for (int64_t x = 0; x < a.size(2); ++x) {
                const double m = mask.defined() ? mask.accessor<double, 3>()[n][y][x] : 1.0;
                const double dx = A[n][y][x][0] - B[n][y][x][0];
                const double dy = A[n][y][x][1] - B[n][y][x][1];
                sum += m * (dx * dx + dy * dy);
                count += m;
            }
        }
        out.push_back(std::sqrt(sum / std::max(count, 1.0)));
    }
    return out;
}

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double warp_loss(const DisplacementField& pred, const DisplacementField& gt,
                        const torch::Tensor& mask = {}) {
    return mean(rmse(pred.data, gt.data, mask));
}

inline double consistency_loss(const MatchResult& r, const std::vector<int>& levels) {
    double sum = 0.0;
    for (int l : levels) {
        const auto& out = r.per_level.at(l);
        sum += mean(rmse(out.residual->data, out.affine->data));
    }
    return sum;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double certainty_loss(const torch::Tensor& logits_in, const DisplacementField& pred,
                             const DisplacementField& gt, const torch::Tensor& mask_in = {}) {
    auto logits = logits_in.to(torch::kFloat64).contiguous();
    auto P = pred.data.to(torch::kFloat64).contiguous();
    auto G = gt.data.to(torch::kFloat64).contiguous();
    torch::Tensor mask;
    if (mask_in.defined()) mask = mask_in.to(torch::kFloat64).contiguous();
    std::vector<double> per;
    for (int64_t n = 0; n < P.size(0); ++n) {
        double sum = 0.0;
        double count = 0.0;
        for (int64_t y = 0; y < P.size(1); ++y) {
            for (int64_t x = 0; x < P.size(2); ++x) {
                const double m = mask.defined() ? mask.accessor<double, 3>()[n][y][x] : 1.0;
                const double dx = at4(P, n, y, x, 0) - at4(G, n, y, x, 0);
                const double dy = at4(P, n, y, x, 1) - at4(G, n, y, x, 1);
                const double e = std::sqrt(dx * dx + dy * dy);
                const double d = sigmoid(logits.accessor<double, 3>()[n][y][x]) - std::exp(-e);
                sum += m * d * d;
                count += m;
            }
        }
        per.push_back(sum / std::max(count, 1.0));
    }
    return mean(per);
}

/// Bilinear value of a level-`from` field at a level-`to` pixel, in level-`to`
/// units, with border clamping.
inline double upsampled(const torch::Tensor& field, int64_t n, int from, int to, int64_t y, int64_t x,
                        int comp) {
    const double s = static_cast<double>(from) / to;
    const int64_t h = field.size(1);
    const int64_t w = field.size(2);
    const double cy = std::clamp(static_cast<double>(y) / s, 0.0, static_cast<double>(h - 1));
    const double cx = std::clamp(static_cast<double>(x) / s, 0.0, static_cast<double>(w - 1));
    const auto y0 = static_cast<int64_t>(std::floor(cy));
    const auto x0 = static_cast<int64_t>(std::floor(cx));
    const auto y1 = std::min(y0 + 1, h - 1);
    const auto x1 = std::min(x0 + 1, w - 1);
    const double fy = cy - static_cast<double>(y0);
    const double fx = cx - static_cast<double>(x0);
    const double v = (1 - fy) * ((1 - fx) * at4(field, n, y0, x0, comp) + fx * at4(field, n, y0, x1, comp)) +
                     fy * ((1 - fx) * at4(field, n, y1, x0, comp) + fx * at4(field, n, y1, x1, comp));
    return v * s;
}

inline double delta_loss(const MatchResult& r, const DisplacementField& gt_in,
                         const std::map<int, double>& weights, const torch::Tensor& mask_in = {}) {
    auto G = gt_in.data.to(torch::kFloat64).contiguous();
    torch::Tensor mask;
    if (mask_in.defined()) mask = mask_in.to(torch::kFloat64).contiguous();
    double total = 0.0;
    for (const auto& [l, wl] : weights) {
        const auto& out = r.per_level.at(l);
        auto res = out.residual->data.to(torch::kFloat64).contiguous();
        auto prev = out.prev.data.to(torch::kFloat64).contiguous();
        std::vector<double> per;
        for (int64_t n = 0; n < G.size(0); ++n) {
            double sum = 0.0;
            double count = 0.0;
            for (int64_t y = 0; y < G.size(1); ++y) {
                for (int64_t x = 0; x < G.size(2); ++x) {
                    const double m = mask.defined() ? mask.accessor<double, 3>()[n][y][x] : 1.0;
                    double l1 = 0.0;
                    for (int c = 0; c < 2; ++c) {
                        const double gap = at4(G, n, y, x, c) - upsampled(prev, n, l, 1, y, x, c);
                        l1 += std::abs(upsampled(res, n, l, 1, y, x, c) - gap);
                    }
                    sum += m * l1 / 2.0;
                    count += m;
                }
            }
            per.push_back(sum / std::max(count, 1.0));
        }
        total += wl * mean(per);
    }
    return total;
}

/// Quadrant RMSEs (TL, TR, BL, BR) of one sample.
inline std::vector<double> quadrants(const torch::Tensor& P, const torch::Tensor& G, const torch::Tensor& mask,
                                     int64_t n) {
    const int64_t h = P.size(1);
    const int64_t w = P.size(2);
    std::vector<double> q;
    for (int qy = 0; qy < 2; ++qy) {
        for (int qx = 0; qx < 2; ++qx) {
            double sum = 0.0;
            double count = 0.0;
            for (int64_t y = qy * h / 2; y < (qy + 1) * h / 2; ++y) {
                for (int64_t x = qx * w / 2; x < (qx + 1) * w / 2; ++x) {
                    const double m = mask.defined() ? mask.accessor<double, 3>()[n][y][x] : 1.0;
                    const double dx = at4(P, n, y, x, 0) - at4(G, n, y, x, 0);
                    const double dy = at4(P, n, y, x, 1) - at4(G, n, y, x, 1);
                    sum += m * (dx * dx + dy * dy);
                    count += m;
                }
            }
            q.push_back(std::sqrt(sum / std::max(count, 1.0)));
        }
    }
    return q;
}

inline double uniformity_loss(const DisplacementField& pred, const DisplacementField& gt,
                              const torch::Tensor& mask_in = {}) {
    auto P = pred.data.to(torch::kFloat64).contiguous();
    auto G = gt.data.to(torch::kFloat64).contiguous();
    torch::Tensor mask;
    if (mask_in.defined()) mask = mask_in.to(torch::kFloat64).contiguous();
    std::vector<double> per;
    for (int64_t n = 0; n < P.size(0); ++n) {
        auto q = quadrants(P, G, mask, n);
        const double mu = mean(q);
        double var = 0.0;
        for (double v : q) var += (v - mu) * (v - mu);
        per.push_back(std::sqrt(var / 4.0));
    }
    return mean(per);
}

} // namespace oracle

/// Relative error ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)
/// of the gradient of a scalar function, using central differences.
inline double gradient_rel_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                 const torch::Tensor& x0, double eps = 1e-6) {
    auto x = x0.detach().clone().to(torch::kFloat64).set_requires_grad(true);
    auto y = f(x);
    auto analytic = torch::autograd::grad({y}, {x}, {}, false, false, true)[0];
    if (!analytic.defined()) analytic = torch::zeros_like(x);
    auto numeric = torch::zeros_like(x);
    auto flat = x.detach().clone().view(-1);
    auto num_flat = numeric.view(-1);
    torch::NoGradGuard guard;
    for (int64_t i = 0; i < flat.numel(); ++i) {
        const double orig = flat[i].item<double>();
        flat[i] = orig + eps;
        const double up = f(flat.view(x.sizes())).item<double>();
        flat[i] = orig - eps;
        const double down = f(flat.view(x.sizes())).item<double>();
        flat[i] = orig;
        num_flat[i] = (up - down) / (2.0 * eps);
    }
    const double diff = (analytic - numeric).norm().item<double>();
    const double scale = std::max({analytic.norm().item<double>(), numeric.norm().item<double>(), 1e-12});
    return diff / scale;
}

/// A MatchResult with random fields at every level, laid out like the matcher
/// output for an h x w input (levels 16..1, affine at 16/8/4, flow at 8/4/2/1).
inline MatchResult random_match_result(int64_t n, int64_t h, int64_t w, torch::Generator& gen,
                                       double scale = 2.0) {
    MatchResult r;
    for (int l : {16, 8, 4, 2, 1}) {
        LevelOutput out;
        const auto hl = h / l;
        const auto wl = w / l;
        if (hl < 1 || wl < 1) continue;
        out.prev = random_field(n, hl, wl, l, scale, gen);
        if (l == 16 || l == 8 || l == 4) out.affine = random_field(n, hl, wl, l, scale, gen);
        if (l != 16) out.residual = random_field(n, hl, wl, l, scale, gen);
        out.accumulated = random_field(n, hl, wl, l, scale, gen);
        r.per_level.emplace(l, out);
    }
    r.final_field = random_field(n, h, w, 1, scale, gen);
    r.certainty_logits = torch::randn({n, h, w}, gen, f64()) * 2.0;
    return r;
}

/// Small widths that keep every FGE unit valid.
inline ChannelSchedule tiny_schedule() { return {8, 16, 16, 16, 16}; }

inline ModelOptions tiny_model(bool dino = true, bool fge = true, bool glam = true) {
    ModelOptions o;
    o.channels = tiny_schedule();
    o.coarse_channels = 16;
    o.dino = dino;
    o.fge.enabled = fge;
    o.glam.enabled = glam;
    o.glam.max_decoder_width = 16;
    return o;
}

inline torch::Generator make_gen(uint64_t seed) { return at::detail::createCPUGenerator(seed); }

} // namespace soma::testing
