#include "soma/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "soma/errors.hpp"
#include "soma/raster.hpp"

namespace soma {

namespace fs = std::filesystem;

uint64_t mix_seed(uint64_t a, uint64_t b) {
    // splitmix64 finaliser over the combined words
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

PerturbationSpec PerturbationSpec::extended() { return {50.0, 0.2, 20.0}; }

void PerturbationSpec::validate() const {
    if (!(max_translation_px >= 0) || !(scale_delta >= 0) || !(max_rotation_deg >= 0) ||
        scale_delta >= 1.0) {
        throw ValidationError("perturbation bounds must be non-negative (and scale_delta < 1)");
    }
}

AffineParams perturbation_theta(const PerturbationDraw& d, int64_t height, int64_t width) {
    const double ax = (static_cast<double>(width) - 1.0) / 2.0;
    const double ay = (static_cast<double>(height) - 1.0) / 2.0;
    const double r = d.rotation_deg * std::numbers::pi / 180.0;
    const double c = d.scale * std::cos(r);
    const double s = d.scale * std::sin(r);
    auto theta = torch::tensor({c, -s * ay / ax, d.tx / ax, s * ax / ay, c, d.ty / ay}, torch::kFloat64);
    return {theta.view({1, 2, 3})};
}

AffineParams sample_perturbation(const PerturbationSpec& spec, std::mt19937_64& rng, int64_t height,
                                 int64_t width, PerturbationDraw* out) {
    spec.validate();
    auto uniform = [&rng](double bound) {
        if (bound == 0.0) return 0.0;
        return std::uniform_real_distribution<double>(-bound, bound)(rng);
    };
    PerturbationDraw d;
    d.rotation_deg = uniform(spec.max_rotation_deg);
    d.scale = 1.0 + uniform(spec.scale_delta);
    d.tx = uniform(spec.max_translation_px);
    d.ty = uniform(spec.max_translation_px);
    if (out) *out = d;
    return perturbation_theta(d, height, width);
}

ImagePair apply_perturbation(const torch::Tensor& optical, const torch::Tensor& sar,
                             const AffineParams& theta, PairMeta meta) {
    if (optical.dim() != 3 || sar.dim() != 3 || sar.size(0) != 1 ||
        optical.size(1) != sar.size(1) || optical.size(2) != sar.size(2)) {
        throw ValidationError("apply_perturbation: tiles must be (C, H, W) of equal size, SAR single-channel");
    }
    if (theta.theta.dim() != 3 || theta.batch() != 1) {
        throw ValidationError("apply_perturbation: theta must have shape (1, 2, 3)");
    }
    const auto h = sar.size(1);
    const auto w = sar.size(2);
    AffineParams th{theta.theta.to(torch::kFloat64)};
    auto gt = affine_to_flow(th, h, w);
    auto back = affine_to_flow(affine_inverse(th), h, w);
    auto moved = warp(sar.to(torch::kFloat64).unsqueeze(0), back, Padding::Zeros).squeeze(0);

    auto grid = make_grid(h, w, GridConvention::Pixel, torch::kFloat64).coords;
    auto target = grid + gt.data[0];
    const double tol = 1e-9;
    auto tx = target.select(2, 0);
    auto ty = target.select(2, 1);
    auto valid = (tx >= -tol) & (tx <= w - 1 + tol) & (ty >= -tol) & (ty <= h - 1 + tol);

    auto acc = th.theta.contiguous();
    for (int i = 0; i < 6; ++i) meta.theta[i] = acc.view({6})[i].item<double>();

    ImagePair pair;
    pair.optical = optical.to(torch::kFloat32);
    pair.sar = moved.clamp(0.0, 1.0).to(torch::kFloat32);
    pair.gt = {gt.data.to(torch::kFloat32), 1};
    pair.valid = valid;
    pair.meta = std::move(meta);
    return pair;
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("perturbation manifest missing: " + path.string());
    std::vector<ManifestEntry> entries;
    std::string line;
    std::getline(in, line); // header
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 8) {
            throw LoadError(path.string() + ":" + std::to_string(lineno) + ": expected 8 columns");
        }
        ManifestEntry e;
        e.tile_id = cells[0];
        try {
            for (int i = 0; i < 6; ++i) e.theta[i] = std::stod(cells[1 + i]);
            e.seed = std::stoull(cells[7]);
        } catch (const std::exception&) {
            throw LoadError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
        entries.push_back(e);
    }
    return entries;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write manifest: " + path.string());
    out << "tile_id,t00,t01,t02,t10,t11,t12,seed\n";
    out.precision(17);
    for (const auto& e : entries) {
        out << e.tile_id;
        for (double v : e.theta) out << ',' << v;
        out << ',' << e.seed << '\n';
    }
}

namespace {

const std::set<std::string> kRasterExt{".png", ".tif", ".tiff", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp"};

std::map<std::string, fs::path> list_tiles(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (kRasterExt.count(ext)) out[entry.path().stem().string()] = entry.path();
    }
    return out;
}

} // namespace

Dataset Dataset::load(const fs::path& root, const std::string& split, const DatasetOptions& options) {
    options.perturbation.validate();
    Dataset ds;
    ds.split_ = split;
    ds.options_ = options;
    const auto dir = root / split;
    auto optical = list_tiles(dir / "optical");
    auto sar = list_tiles(dir / "sar");
    for (const auto& [id, path] : sar) {
        if (!optical.count(id)) throw LoadError("tile '" + id + "' has a SAR image but no optical image");
    }
    for (const auto& [id, path] : optical) {
        auto it = sar.find(id);
        if (it == sar.end()) throw LoadError("tile '" + id + "' has an optical image but no SAR image");
        ds.tiles_.push_back({id, path, it->second, std::nullopt});
        if (options.limit && ds.tiles_.size() == options.limit) break;
    }
    if (split != "train" && !ds.tiles_.empty()) {
        std::map<std::string, ManifestEntry> manifest;
        for (auto& e : read_manifest(dir / "manifest.csv")) manifest[e.tile_id] = e;
        for (auto& tile : ds.tiles_) {
            auto it = manifest.find(tile.id);
            if (it == manifest.end()) throw LoadError("tile '" + tile.id + "' missing from " + split + " manifest");
            tile.fixed = it->second;
        }
    }
    return ds;
}

std::vector<std::string> Dataset::tile_ids() const {
    std::vector<std::string> ids;
    for (const auto& t : tiles_) ids.push_back(t.id);
    return ids;
}

ImagePair Dataset::get(std::size_t index, int64_t epoch) const {
    const auto& tile = tiles_.at(index);
    auto optical = read_raster(tile.optical);
    auto sar = read_raster(tile.sar);
    if (sar.size(0) == 3) sar = sar.mean(0, true);
    if (optical.size(1) != sar.size(1) || optical.size(2) != sar.size(2)) {
        throw LoadError("tile '" + tile.id + "': optical and SAR sizes differ");
    }
    if (optical.size(1) % 16 != 0 || optical.size(2) % 16 != 0) {
        throw LoadError("tile '" + tile.id + "': size is not divisible by 16");
    }
    PairMeta meta;
    meta.source = split_;
    meta.tile_id = tile.id;
    AffineParams theta;
    if (tile.fixed) {
        meta.seed = tile.fixed->seed;
        theta.theta = torch::tensor(std::vector<double>(tile.fixed->theta.begin(), tile.fixed->theta.end()),
                                    torch::kFloat64)
                          .view({1, 2, 3});
    } else {
        const uint64_t round = options_.resample_train ? static_cast<uint64_t>(epoch) : 0;
        meta.seed = mix_seed(mix_seed(options_.seed, round), index);
        std::mt19937_64 rng(meta.seed);
        theta = sample_perturbation(options_.perturbation, rng, optical.size(1), optical.size(2));
    }
    return apply_perturbation(optical, sar, theta, meta);
}

std::vector<std::size_t> Dataset::epoch_order(int64_t epoch) const {
    std::vector<std::size_t> order(tiles_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (split_ == "train") {
        std::mt19937_64 rng(mix_seed(options_.seed ^ 0x5eedULL, static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
    }
    return order;
}

std::vector<ImagePair> load_dataset(const fs::path& root, const std::string& split,
                                    const DatasetOptions& options) {
    auto ds = Dataset::load(root, split, options);
    std::vector<ImagePair> pairs;
    for (auto i : ds.epoch_order(0)) pairs.push_back(ds.get(i, 0));
    return pairs;
}

Batch collate(const std::vector<ImagePair>& pairs) {
    if (pairs.empty()) throw ValidationError("collate: empty batch");
    std::vector<torch::Tensor> o, s, g, v;
    Batch b;
    for (const auto& p : pairs) {
        o.push_back(p.optical);
        s.push_back(p.sar);
        g.push_back(p.gt.data);
        v.push_back(p.valid);
        b.ids.push_back(p.meta.tile_id);
    }
    b.optical = torch::stack(o);
    b.sar = torch::stack(s);
    b.gt = {torch::cat(g), 1};
    b.valid = torch::stack(v);
    return b;
}

// ---------------------------------------------------------------------------
// Procedural mini-dataset

namespace {

enum Cover { Soil, Vegetation, Field, Building, Water, Road, kCoverCount };

struct CoverLook {
    std::array<float, 3> rgb;
    float backscatter;
};

// Optical colour and SAR backscatter per land-cover class. The two modalities
// deliberately disagree (roads bright in optical, dark in SAR; buildings
// moderate in optical, very bright in SAR).
constexpr std::array<CoverLook, kCoverCount> kLooks{{
    {{0.55f, 0.45f, 0.35f}, 0.30f},
    {{0.20f, 0.45f, 0.18f}, 0.50f},
    {{0.65f, 0.62f, 0.30f}, 0.22f},
    {{0.60f, 0.58f, 0.60f}, 0.85f},
    {{0.10f, 0.18f, 0.35f}, 0.04f},
    {{0.80f, 0.80f, 0.78f}, 0.12f},
}};

} // namespace

std::pair<torch::Tensor, torch::Tensor> render_scene(int64_t size, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const int n = static_cast<int>(size);
    const double sz = static_cast<double>(size);
    std::vector<int> cover(static_cast<std::size_t>(n * n));

    // low-frequency background: soil vs vegetation
    std::array<double, 12> wave{};
    for (auto& v : wave) v = u01(rng);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            double f = 0;
            for (int k = 0; k < 3; ++k) {
                const double fx = 1.0 + 3.0 * wave[4 * k], fy = 1.0 + 3.0 * wave[4 * k + 1];
                f += std::sin(2 * std::numbers::pi * (fx * x / sz + fy * y / sz + wave[4 * k + 2]));
            }
            cover[y * n + x] = f > 0.3 ? Vegetation : Soil;
        }
    }
    auto paint_rotated_rect = [&](int cls) {
        const double cx = u01(rng) * sz, cy = u01(rng) * sz;
        const double hw = sz * (0.04 + 0.12 * u01(rng)), hh = sz * (0.04 + 0.12 * u01(rng));
        const double a = u01(rng) * std::numbers::pi;
        const double ca = std::cos(a), sa = std::sin(a);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double dx = x - cx, dy = y - cy;
                const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
                if (std::abs(u) <= hw && std::abs(v) <= hh) cover[y * n + x] = cls;
            }
    };
    const int fields = 2 + static_cast<int>(u01(rng) * 3);
    for (int i = 0; i < fields; ++i) paint_rotated_rect(Field);
    // pond
    {
        const double cx = u01(rng) * sz, cy = u01(rng) * sz, r = sz * (0.06 + 0.08 * u01(rng));
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) cover[y * n + x] = Water;
    }
    // roads
    const int roads = 1 + static_cast<int>(u01(rng) * 2);
    for (int i = 0; i < roads; ++i) {
        const double px = u01(rng) * sz, py = u01(rng) * sz, a = u01(rng) * std::numbers::pi;
        const double nx = -std::sin(a), ny = std::cos(a), half = 1.0 + 1.5 * u01(rng);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                if (std::abs((x - px) * nx + (y - py) * ny) <= half) cover[y * n + x] = Road;
    }
    const int buildings = 4 + static_cast<int>(u01(rng) * 5);
    for (int i = 0; i < buildings; ++i) {
        const double cx = u01(rng) * sz, cy = u01(rng) * sz;
        const int hw = 2 + static_cast<int>(u01(rng) * 5), hh = 2 + static_cast<int>(u01(rng) * 5);
        for (int y = std::max(0, static_cast<int>(cy) - hh); y < std::min(n, static_cast<int>(cy) + hh); ++y)
            for (int x = std::max(0, static_cast<int>(cx) - hw); x < std::min(n, static_cast<int>(cx) + hw); ++x)
                cover[y * n + x] = Building;
    }

    auto optical = torch::empty({3, size, size}, torch::kFloat32);
    auto sar = torch::empty({1, size, size}, torch::kFloat32);
    auto o = optical.accessor<float, 3>();
    auto s = sar.accessor<float, 3>();
    std::normal_distribution<float> noise(0.0f, 0.02f);
    std::gamma_distribution<float> speckle(4.0f, 0.25f); // 4-look intensity speckle, unit mean
    const double shade_phase = u01(rng) * 6.28;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const int cls = cover[y * n + x];
            const auto& look = kLooks[cls];
            const float shade = 0.9f + 0.1f * static_cast<float>(std::sin(x * 0.05 + y * 0.03 + shade_phase));
            for (int c = 0; c < 3; ++c) o[c][y][x] = std::clamp(look.rgb[c] * shade + noise(rng), 0.0f, 1.0f);

            // double-bounce: bright returns on building borders
            bool border = false;
            if (cls == Building) {
                for (auto [dx, dy] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
                    const int xx = x + dx, yy = y + dy;
                    if (xx >= 0 && yy >= 0 && xx < n && yy < n && cover[yy * n + xx] != Building) border = true;
                }
            }
            const float sigma0 = border ? 1.0f : look.backscatter;
            s[0][y][x] = std::clamp(std::sqrt(sigma0 * speckle(rng)) * 0.8f, 0.0f, 1.0f);
        }
    }
    return {optical, sar};
}

void generate_mini_dataset(const fs::path& root, const MiniDatasetOptions& options) {
    if (options.size % 16 != 0) throw ValidationError("mini dataset: tile size must be divisible by 16");
    const std::array<std::pair<const char*, int>, 3> splits{{{"train", options.train},
                                                             {"val", options.val},
                                                             {"test", options.test}}};
    uint64_t scene = 0;
    for (const auto& [split, count] : splits) {
        std::vector<ManifestEntry> manifest;
        for (int i = 0; i < count; ++i, ++scene) {
            char id[32];
            std::snprintf(id, sizeof(id), "tile_%04d", i);
            auto [optical, sar] = render_scene(options.size, mix_seed(options.seed, scene));
            write_raster(root / split / "optical" / (std::string(id) + ".png"), optical);
            write_raster(root / split / "sar" / (std::string(id) + ".png"), sar);

            ManifestEntry e;
            e.tile_id = id;
            e.seed = mix_seed(options.seed ^ 0xabcdefULL, scene);
            std::mt19937_64 rng(e.seed);
            auto theta = options.identity_manifests
                             ? AffineParams::identity(1, torch::kFloat64)
                             : sample_perturbation(options.manifest_spec, rng, options.size, options.size);
            auto flat = theta.theta.contiguous().view({6});
            for (int k = 0; k < 6; ++k) e.theta[k] = flat[k].item<double>();
            manifest.push_back(e);
        }
        if (std::string(split) != "train") write_manifest(root / split / "manifest.csv", manifest);
    }
}

} // namespace soma
