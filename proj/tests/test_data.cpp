#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <set>

#include "soma/data.hpp"
#include "soma/errors.hpp"
#include "support.hpp"

using namespace soma;
using namespace soma::testing;
namespace fs = std::filesystem;

namespace {

void check_bounds(const PerturbationSpec& spec, uint64_t seed) {
    std::mt19937_64 rng(seed);
    double max_t = 0.0, max_r = 0.0, max_s = 0.0;
    for (int i = 0; i < 10000; ++i) {
        PerturbationDraw d;
        auto theta = sample_perturbation(spec, rng, 128, 96, &d);
        max_t = std::max({max_t, std::abs(d.tx), std::abs(d.ty)});
        max_r = std::max(max_r, std::abs(d.rotation_deg));
        max_s = std::max(max_s, std::abs(d.scale - 1.0));
        // the image centre moves by exactly (tx, ty)
        auto t = theta.theta[0];
        REQUIRE(std::abs(t[0][2].item<double>() * 47.5 - d.tx) < 1e-9);
        REQUIRE(std::abs(t[1][2].item<double>() * 63.5 - d.ty) < 1e-9);
    }
    CHECK(max_t <= spec.max_translation_px);
    CHECK(max_r <= spec.max_rotation_deg);
    CHECK(max_s <= spec.scale_delta);
    // the draws actually explore the range
    CHECK(max_t > 0.95 * spec.max_translation_px);
    CHECK(max_r > 0.95 * spec.max_rotation_deg);
    CHECK(max_s > 0.95 * spec.scale_delta);
}

torch::Tensor smooth_image(int64_t size) {
    auto y = torch::arange(size, torch::kFloat64).view({size, 1});
    auto x = torch::arange(size, torch::kFloat64).view({1, size});
    return (0.5 + 0.25 * torch::sin(x / 5.0) * torch::cos(y / 7.0) + 0.1 * torch::sin((x + y) / 11.0))
        .unsqueeze(0)
        .to(torch::kFloat32);
}

MiniDatasetOptions mini(int64_t size = 32) {
    MiniDatasetOptions o;
    o.size = size;
    o.train = 5;
    o.val = 2;
    o.test = 3;
    return o;
}

} // namespace

TEST_SUITE("data") {

TEST_CASE("perturbation draws stay within the default bounds") {
    PerturbationSpec spec;
    CHECK(spec.max_translation_px == 32.0);
    CHECK(spec.scale_delta == 0.2);
    CHECK(spec.max_rotation_deg == 5.0);
    check_bounds(spec, 1);
}

TEST_CASE("perturbation draws stay within the extended bounds") {
    auto spec = PerturbationSpec::extended();
    CHECK(spec.max_translation_px == 50.0);
    CHECK(spec.max_rotation_deg == 20.0);
    check_bounds(spec, 2);
}

TEST_CASE("perturbation sampling is seed-deterministic") {
    PerturbationSpec spec;
    std::mt19937_64 a(99), b(99), c(100);
    auto ta = sample_perturbation(spec, a, 64, 64);
    auto tb = sample_perturbation(spec, b, 64, 64);
    auto tc = sample_perturbation(spec, c, 64, 64);
    CHECK(torch::equal(ta.theta, tb.theta));
    CHECK_FALSE(torch::equal(ta.theta, tc.theta));
}

TEST_CASE("zero bounds give the identity") {
    PerturbationSpec zero{0.0, 0.0, 0.0};
    std::mt19937_64 rng(3);
    auto theta = sample_perturbation(zero, rng, 64, 64);
    CHECK(torch::equal(theta.theta, AffineParams::identity(1, f64()).theta));
    CHECK_THROWS_AS((PerturbationSpec{-1.0, 0.2, 5.0}.validate()), ValidationError);
    CHECK_THROWS_AS((PerturbationSpec{1.0, 1.0, 5.0}.validate()), ValidationError);
}

TEST_CASE("apply_perturbation") {
    const int64_t s = 48;
    auto sar = smooth_image(s);
    auto optical = sar.expand({3, s, s}).contiguous();

    SUBCASE("ground truth is the dense affine field") {
        std::mt19937_64 rng(4);
        auto theta = sample_perturbation(PerturbationSpec{}, rng, s, s);
        auto pair = apply_perturbation(optical, sar, theta);
        auto expected = affine_to_flow(theta, s, s);
        CHECK((pair.gt.data.to(torch::kFloat64) - expected.data).abs().max().item<double>() < 1e-4);
        CHECK(pair.gt.level == 1);
        CHECK(pair.sar.sizes() == torch::IntArrayRef({1, s, s}));
        CHECK(pair.optical.sizes() == torch::IntArrayRef({3, s, s}));
        for (int i = 0; i < 6; ++i) {
            CHECK(pair.meta.theta[i] == theta.theta.view({6})[i].item<double>());
        }
    }
    SUBCASE("warping the perturbed SAR by the ground truth restores it") {
        PerturbationDraw d;
        d.tx = 8.0;
        d.ty = -3.7;
        auto pair = apply_perturbation(optical, sar, perturbation_theta(d, s, s));
        auto restored = warp(pair.sar.unsqueeze(0), pair.gt)[0];
        auto inner = pair.valid.clone();
        inner.narrow(0, 0, 5).fill_(false);
        inner.narrow(0, s - 5, 5).fill_(false);
        inner.narrow(1, s - 10, 10).fill_(false);
        auto err = (restored - sar).abs()[0].masked_select(inner);
        CHECK(err.numel() > 0);
        CHECK(err.mean().item<float>() < 0.02f);
        CHECK(err.max().item<float>() < 0.05f);
    }
    SUBCASE("valid mask marks pixels whose SAR sample is inside the frame") {
        PerturbationDraw d;
        d.tx = 8.0;
        auto pair = apply_perturbation(optical, sar, perturbation_theta(d, s, s));
        CHECK((pair.valid.scalar_type() == torch::kBool));
        CHECK(pair.valid.sum().item<int64_t>() == s * (s - 8));
        CHECK(pair.valid.narrow(1, 0, s - 8).all().item<bool>());
        CHECK_FALSE(pair.valid.narrow(1, s - 8, 8).any().item<bool>());

        auto identity = apply_perturbation(optical, sar, AffineParams::identity(1, f64()));
        CHECK(identity.valid.all().item<bool>());
        CHECK(torch::equal(identity.sar, sar));
    }
    SUBCASE("shape validation") {
        CHECK_THROWS_AS(apply_perturbation(optical, optical, AffineParams::identity(1, f64())), ValidationError);
        CHECK_THROWS_AS(apply_perturbation(optical, sar, AffineParams::identity(2, f64())), ValidationError);
    }
}

TEST_CASE("manifest round trip and errors") {
    TempDir dir("manifest");
    std::vector<ManifestEntry> entries{{"a", {1.0, 0.1, -0.25, 0.0, 0.9, 1e-17}, 42},
                                       {"tile_0001", {0.99, -0.01, 0.125, 0.02, 1.01, -0.3}, 7}};
    write_manifest(dir.path() / "m.csv", entries);
    auto back = read_manifest(dir.path() / "m.csv");
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back[i].tile_id == entries[i].tile_id);
        CHECK(back[i].seed == entries[i].seed);
        CHECK(back[i].theta == entries[i].theta);
    }
    CHECK_THROWS_AS(read_manifest(dir.path() / "absent.csv"), LoadError);
    std::ofstream(dir.path() / "bad.csv") << "tile_id,a,b,c,d,e,f,seed\nx,1,0,0\n";
    CHECK_THROWS_AS(read_manifest(dir.path() / "bad.csv"), LoadError);
}

TEST_CASE("dataset loading") {
    TempDir dir("dataset");
    generate_mini_dataset(dir.path(), mini());

    SUBCASE("splits and invariants") {
        DatasetOptions o;
        o.seed = 5;
        for (auto [split, n] : {std::pair{"train", 5}, {"val", 2}, {"test", 3}}) {
            auto ds = Dataset::load(dir.path(), split, o);
            REQUIRE(ds.size() == static_cast<std::size_t>(n));
            auto ids = ds.tile_ids();
            CHECK(std::is_sorted(ids.begin(), ids.end()));
            for (std::size_t i = 0; i < ds.size(); ++i) {
                auto p = ds.get(i);
                CHECK(p.meta.tile_id == ids[i]);
                CHECK(p.optical.sizes() == torch::IntArrayRef({3, 32, 32}));
                CHECK(p.sar.sizes() == torch::IntArrayRef({1, 32, 32}));
                CHECK(p.optical.min().item<float>() >= 0.0f);
                CHECK(p.optical.max().item<float>() <= 1.0f);
                CHECK(p.sar.min().item<float>() >= 0.0f);
                CHECK(p.sar.max().item<float>() <= 1.0f);
                AffineParams theta{torch::tensor(std::vector<double>(p.meta.theta.begin(), p.meta.theta.end()),
                                                 f64())
                                       .view({1, 2, 3})};
                auto expected = affine_to_flow(theta, 32, 32);
                CHECK((p.gt.data.to(torch::kFloat64) - expected.data).abs().max().item<double>() < 1e-4);
                CHECK(p.valid.any().item<bool>());
            }
        }
        CHECK(fs::exists(dir.path() / "val" / "manifest.csv"));
        CHECK(fs::exists(dir.path() / "test" / "manifest.csv"));
        CHECK_FALSE(fs::exists(dir.path() / "train" / "manifest.csv"));
    }
    SUBCASE("test split is deterministic") {
        auto a = load_dataset(dir.path(), "test");
        DatasetOptions other;
        other.seed = 1234;
        auto b = load_dataset(dir.path(), "test", other);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(torch::equal(a[i].sar, b[i].sar));
            CHECK(torch::equal(a[i].gt.data, b[i].gt.data));
            CHECK(a[i].meta.seed == b[i].meta.seed);
        }
        auto ds = Dataset::load(dir.path(), "test");
        CHECK(torch::equal(ds.get(1, 0).gt.data, ds.get(1, 7).gt.data));
        CHECK(ds.epoch_order(3) == std::vector<std::size_t>{0, 1, 2});
    }
    SUBCASE("train perturbations and order") {
        DatasetOptions o;
        o.seed = 11;
        auto ds = Dataset::load(dir.path(), "train", o);
        CHECK(torch::equal(ds.get(2, 3).gt.data, ds.get(2, 3).gt.data));
        CHECK_FALSE(torch::equal(ds.get(2, 0).gt.data, ds.get(2, 1).gt.data));
        o.resample_train = false;
        auto fixed = Dataset::load(dir.path(), "train", o);
        CHECK(torch::equal(fixed.get(2, 0).gt.data, fixed.get(2, 5).gt.data));
        CHECK(torch::equal(fixed.get(2, 0).gt.data, ds.get(2, 0).gt.data));

        std::set<std::vector<std::size_t>> orders;
        for (int64_t e = 0; e < 6; ++e) {
            auto order = ds.epoch_order(e);
            CHECK(order == ds.epoch_order(e));
            auto sorted = order;
            std::sort(sorted.begin(), sorted.end());
            CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3, 4});
            orders.insert(order);
        }
        CHECK(orders.size() > 1);
    }
    SUBCASE("limit") {
        DatasetOptions o;
        o.limit = 2;
        CHECK(Dataset::load(dir.path(), "train", o).size() == 2);
    }
    SUBCASE("collate") {
        auto pairs = load_dataset(dir.path(), "val");
        auto b = collate(pairs);
        CHECK(b.optical.sizes() == torch::IntArrayRef({2, 3, 32, 32}));
        CHECK(b.sar.sizes() == torch::IntArrayRef({2, 1, 32, 32}));
        CHECK(b.gt.data.sizes() == torch::IntArrayRef({2, 32, 32, 2}));
        CHECK(b.valid.sizes() == torch::IntArrayRef({2, 32, 32}));
        CHECK(b.ids == std::vector<std::string>{"tile_0000", "tile_0001"});
        CHECK_THROWS_AS(collate({}), ValidationError);
    }
}

TEST_CASE("identity manifests give zero ground truth") {
    TempDir dir("identity");
    auto o = mini();
    o.identity_manifests = true;
    generate_mini_dataset(dir.path(), o);
    for (const auto& p : load_dataset(dir.path(), "test")) {
        CHECK(p.gt.data.abs().max().item<float>() == 0.0f);
        CHECK(p.valid.all().item<bool>());
    }
}

TEST_CASE("dataset errors") {
    TempDir dir("dataset_err");
    SUBCASE("empty or missing split directory gives an empty dataset") {
        fs::create_directories(dir.path() / "train" / "optical");
        CHECK(Dataset::load(dir.path(), "train").empty());
        CHECK(Dataset::load(dir.path(), "nowhere").empty());
    }
    SUBCASE("mismatched tile sizes name the tile") {
        TempDir other("dataset_other");
        generate_mini_dataset(dir.path(), mini(32));
        generate_mini_dataset(other.path(), mini(48));
        fs::copy_file(other.path() / "train" / "sar" / "tile_0003.png", dir.path() / "train" / "sar" / "tile_0003.png",
                      fs::copy_options::overwrite_existing);
        auto ds = Dataset::load(dir.path(), "train");
        CHECK_NOTHROW(ds.get(2));
        try {
            ds.get(3);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("tile_0003") != std::string::npos);
        }
    }
    SUBCASE("missing manifest") {
        generate_mini_dataset(dir.path(), mini());
        fs::remove(dir.path() / "val" / "manifest.csv");
        CHECK_THROWS_AS(Dataset::load(dir.path(), "val"), LoadError);
    }
    SUBCASE("unpaired tile") {
        generate_mini_dataset(dir.path(), mini());
        fs::remove(dir.path() / "train" / "optical" / "tile_0001.png");
        try {
            Dataset::load(dir.path(), "train");
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("tile_0001") != std::string::npos);
        }
    }
    SUBCASE("tile size not divisible by 16") {
        auto o = mini(32);
        generate_mini_dataset(dir.path(), o);
        CHECK_THROWS_AS(generate_mini_dataset(dir.path() / "x", mini(40)), ValidationError);
    }
}

TEST_CASE("rendered scenes are deterministic") {
    auto [o1, s1] = render_scene(32, 9);
    auto [o2, s2] = render_scene(32, 9);
    auto [o3, s3] = render_scene(32, 10);
    CHECK(torch::equal(o1, o2));
    CHECK(torch::equal(s1, s2));
    CHECK_FALSE(torch::equal(o1, o3));
    CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}

} // TEST_SUITE
