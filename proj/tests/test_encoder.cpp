#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "soma/encoder.hpp"
#include "soma/errors.hpp"
#include "soma/model.hpp"
#include "support.hpp"

using namespace soma;
using namespace soma::testing;

namespace {

PyramidEncoder make_encoder(bool coarse, int64_t optical_channels = 3) {
    EncoderOptions o;
    o.channels = tiny_schedule();
    o.optical_channels = optical_channels;
    o.use_coarse = coarse;
    return PyramidEncoder(o, coarse ? make_random_coarse_encoder(16, 16, 1234) : nullptr);
}

std::set<const void*> storage_of(const std::vector<torch::Tensor>& params) {
    std::set<const void*> out;
    for (const auto& p : params) out.insert(p.data_ptr());
    return out;
}

// Plain bilinear resampling with align-corners coordinates.
double resample_oracle(const torch::Tensor& src, int64_t c, int64_t oh, int64_t ow, int64_t y, int64_t x) {
    const auto h = src.size(2);
    const auto w = src.size(3);
    const double sy = oh > 1 ? static_cast<double>(y) * (h - 1) / (oh - 1) : 0.0;
    const double sx = ow > 1 ? static_cast<double>(x) * (w - 1) / (ow - 1) : 0.0;
    const auto y0 = static_cast<int64_t>(std::floor(sy));
    const auto x0 = static_cast<int64_t>(std::floor(sx));
    const auto y1 = std::min(y0 + 1, h - 1);
    const auto x1 = std::min(x0 + 1, w - 1);
    const double fy = sy - y0;
    const double fx = sx - x0;
    auto a = src.accessor<double, 4>();
    return (1 - fy) * ((1 - fx) * a[0][c][y0][x0] + fx * a[0][c][y0][x1]) +
           fy * ((1 - fx) * a[0][c][y1][x0] + fx * a[0][c][y1][x1]);
}

} // namespace

TEST_SUITE("encoder") {

TEST_CASE("pyramid shapes for a 128x128 input") {
    auto enc = make_encoder(true);
    auto gen = make_gen(1);
    auto optical = torch::rand({2, 3, 128, 128}, gen);
    auto sar = torch::rand({2, 1, 128, 128}, gen);
    auto s = tiny_schedule();
    for (auto [image, modality] : {std::pair{optical, Modality::Optical}, {sar, Modality::Sar}}) {
        auto pyr = enc->encode(image, modality);
        CHECK(pyr.modality == modality);
        CHECK(pyr.levels.size() == 5);
        for (int l : {1, 2, 4, 8, 16}) {
            CHECK(pyr.at(l).sizes() == torch::IntArrayRef({2, s.at(l), 128 / l, 128 / l}));
            CHECK(torch::isfinite(pyr.at(l)).all().item<bool>());
        }
    }
    auto rect = enc->encode(torch::rand({1, 3, 64, 96}, gen), Modality::Optical);
    CHECK(rect.at(16).sizes() == torch::IntArrayRef({1, s.c16, 4, 6}));
    CHECK(rect.at(1).sizes() == torch::IntArrayRef({1, s.c1, 64, 96}));
}

TEST_CASE("without the coarse encoder the backbone supplies level 16") {
    auto enc = make_encoder(false);
    auto pyr = enc->encode(torch::rand({1, 1, 64, 64}), Modality::Sar);
    CHECK(pyr.at(16).sizes() == torch::IntArrayRef({1, tiny_schedule().c16, 4, 4}));
    CHECK(enc->coarse() == nullptr);
    for (const auto& p : enc->parameters()) CHECK(p.requires_grad());
}

TEST_CASE("single-channel optical input") {
    auto enc = make_encoder(true, 1);
    auto pyr = enc->encode(torch::rand({1, 1, 32, 32}), Modality::Optical);
    CHECK(pyr.at(16).size(2) == 2);
    CHECK_THROWS_AS(enc->encode(torch::rand({1, 3, 32, 32}), Modality::Optical), ValidationError);
}

TEST_CASE("input validation") {
    auto enc = make_encoder(true);
    CHECK_THROWS_AS(enc->encode(torch::rand({1, 3, 100, 128}), Modality::Optical), ValidationError);
    CHECK_THROWS_AS(enc->encode(torch::rand({1, 3, 128, 40}), Modality::Optical), ValidationError);
    CHECK_THROWS_AS(enc->encode(torch::rand({3, 128, 128}), Modality::Optical), ValidationError);
    CHECK_THROWS_AS(enc->encode(torch::rand({1, 3, 64, 64}), Modality::Sar), ValidationError);
    EncoderOptions o;
    o.channels = tiny_schedule();
    CHECK_THROWS_AS(PyramidEncoder(o, nullptr), ConfigError);
    CHECK_THROWS_AS(make_random_coarse_encoder(0, 16, 1), ConfigError);
    CHECK_THROWS_AS(make_scripted_coarse_encoder("/nonexistent/encoder.pt", 16), LoadError);
}

TEST_CASE("coarse encoder is frozen and deterministic") {
    auto a = make_random_coarse_encoder(16, 16, 77);
    auto b = make_random_coarse_encoder(16, 16, 77);
    auto c = make_random_coarse_encoder(16, 16, 78);
    CHECK(a->frozen());
    for (const auto& p : a->parameters()) CHECK_FALSE(p.requires_grad());
    auto gen = make_gen(2);
    auto image = torch::rand({2, 3, 64, 64}, gen).set_requires_grad(true);
    auto ya = a->forward(image);
    CHECK_FALSE(ya.requires_grad());
    CHECK(ya.sizes() == torch::IntArrayRef({2, 16, 4, 4}));
    CHECK(torch::equal(ya, a->forward(image)));
    CHECK(torch::equal(ya, b->forward(image)));
    CHECK_FALSE(torch::equal(ya, c->forward(image)));
    // grayscale input is replicated to three channels
    auto gray = torch::rand({1, 1, 32, 32}, gen);
    CHECK(torch::equal(a->forward(gray), a->forward(gray.expand({1, 3, 32, 32}))));
}

TEST_CASE("modality backbones share no parameters") {
    auto enc = make_encoder(true);
    auto opt = storage_of(enc->backbone(Modality::Optical)->parameters());
    auto sar = storage_of(enc->backbone(Modality::Sar)->parameters());
    CHECK_FALSE(opt.empty());
    for (const auto* p : opt) CHECK(sar.count(p) == 0);

    auto gen = make_gen(3);
    auto x = torch::rand({1, 1, 32, 32}, gen);
    auto before = enc->encode(x, Modality::Sar).at(4).clone();
    {
        torch::NoGradGuard guard;
        for (auto& p : enc->backbone(Modality::Optical)->parameters()) p.add_(1.0);
    }
    CHECK(torch::equal(enc->encode(x, Modality::Sar).at(4), before));
}

TEST_CASE("adapt_coarse_grid") {
    auto gen = make_gen(4);
    SUBCASE("matching size is passed through") {
        auto raw = torch::randn({2, 4, 8, 8}, gen);
        CHECK(adapt_coarse_grid(raw, 8, 8).is_same(raw));
    }
    SUBCASE("9x9 to 8x8 follows bilinear align-corners resampling") {
        auto raw = torch::randn({1, 3, 9, 9}, gen, f64());
        auto out = adapt_coarse_grid(raw, 8, 8);
        CHECK(out.sizes() == torch::IntArrayRef({1, 3, 8, 8}));
        for (int64_t c = 0; c < 3; ++c) {
            for (int64_t y = 0; y < 8; ++y) {
                for (int64_t x = 0; x < 8; ++x) {
                    CHECK(std::abs(out[0][c][y][x].item<double>() - resample_oracle(raw, c, 8, 8, y, x)) < 1e-6);
                }
            }
        }
        CHECK(out[0][1][0][0].item<double>() == raw[0][1][0][0].item<double>());
        CHECK(out[0][1][7][7].item<double>() == doctest::Approx(raw[0][1][8][8].item<double>()).epsilon(1e-12));
    }
    SUBCASE("constants stay constant") {
        auto raw = torch::full({1, 2, 5, 7}, 3.25, f64());
        auto out = adapt_coarse_grid(raw, 8, 12);
        CHECK((out - 3.25).abs().max().item<double>() < 1e-12);
    }
    SUBCASE("invalid shapes") {
        CHECK_THROWS_AS(adapt_coarse_grid(torch::zeros({2, 3, 4}), 4, 4), ValidationError);
        CHECK_THROWS_AS(adapt_coarse_grid(torch::zeros({1, 3, 4, 4}), 0, 4), ValidationError);
    }
}

TEST_CASE("a training step leaves the frozen encoder untouched") {
    torch::manual_seed(5);
    SomaModel model(tiny_model());
    const auto frozen_before = model->frozen_hash();
    const auto sig = model->signature();
    CHECK(sig.frozen > 0);
    CHECK(sig.trainable > 0);
    CHECK(static_cast<int64_t>(model->frozen_parameters().size()) == 4);

    auto backbone_before = hash_tensors(model->encoder()->backbone(Modality::Optical)->parameters());
    torch::optim::SGD opt(model->trainable_parameters(), torch::optim::SGDOptions(0.05));
    auto gen = make_gen(6);
    auto optical = torch::rand({1, 3, 32, 32}, gen);
    auto sar = torch::rand({1, 1, 32, 32}, gen);
    auto [po, ps] = model->pyramids(optical, sar);
    torch::Tensor loss = torch::zeros({});
    for (int l : {1, 2, 4, 8, 16}) loss = loss + (po.at(l) - ps.at(l)).pow(2).mean();
    opt.zero_grad();
    loss.backward();
    for (const auto& p : model->frozen_parameters()) CHECK_FALSE(p.grad().defined());
    opt.step();

    CHECK(model->frozen_hash() == frozen_before);
    CHECK(hash_tensors(model->encoder()->backbone(Modality::Optical)->parameters()) != backbone_before);
}

TEST_CASE("disabling the coarse encoder removes every frozen parameter") {
    SomaModel with(tiny_model(true, false, false));
    SomaModel without(tiny_model(false, false, false));
    CHECK(without->signature().frozen == 0);
    CHECK(with->signature().frozen > 0);
    CHECK(with->signature() != without->signature());
}

} // TEST_SUITE
