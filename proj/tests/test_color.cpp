#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "corrflow/color.hpp"
#include "test_util.hpp"

using namespace corrflow;
using testutil::fd_max_rel_error;

namespace {

Image solid(float r, float g, float b) {
    Image img(2, 2, 3);
    for (int p = 0; p < 4; ++p) {
        img.data[static_cast<size_t>(p * 3 + 0)] = r;
        img.data[static_cast<size_t>(p * 3 + 1)] = g;
        img.data[static_cast<size_t>(p * 3 + 2)] = b;
    }
    return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// sRGB <-> Lab
// ---------------------------------------------------------------------------

TEST_CASE("pure red converts to the standard Lab reference") {
    Image lab = rgb_to_lab(solid(1.f, 0.f, 0.f));
    CHECK(lab.at(0, 0, 0) == Catch::Approx(53.2406).margin(2e-3));
    CHECK(lab.at(0, 0, 1) == Catch::Approx(80.0923).margin(2e-3));
    CHECK(lab.at(0, 0, 2) == Catch::Approx(67.2028).margin(2e-3));
}

TEST_CASE("white maps to L=100, a=b=0; black to the origin") {
    Image white = rgb_to_lab(solid(1.f, 1.f, 1.f));
    CHECK(white.at(0, 0, 0) == Catch::Approx(100.0).margin(1e-3));
    CHECK(white.at(0, 0, 1) == Catch::Approx(0.0).margin(1e-2));
    CHECK(white.at(0, 0, 2) == Catch::Approx(0.0).margin(1e-2));

    Image black = rgb_to_lab(solid(0.f, 0.f, 0.f));
    for (int c = 0; c < 3; ++c) CHECK(black.at(0, 0, c) == Catch::Approx(0.0).margin(1e-4));
}

TEST_CASE("interior colour matches the reference converter") {
    Image lab = rgb_to_lab(solid(0.5f, 0.25f, 0.75f));
    CHECK(lab.at(0, 0, 0) == Catch::Approx(41.1553).margin(2e-3));
    CHECK(lab.at(0, 0, 1) == Catch::Approx(51.4108).margin(2e-3));
    CHECK(lab.at(0, 0, 2) == Catch::Approx(-56.4485).margin(2e-3));
}

TEST_CASE("rgb -> lab -> rgb round trips for in-gamut colours") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<float> u(0.f, 1.f);
    Image img(4, 4, 3);
    for (auto& v : img.data) v = u(rng);
    Image back = lab_to_rgb(rgb_to_lab(img));
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(back.data[i] == Catch::Approx(img.data[i]).margin(2e-4));
}

TEST_CASE("differentiable conversions agree with the plain ones") {
    std::mt19937_64 rng(37);
    std::uniform_real_distribution<float> u(0.05f, 0.95f);
    Image img(3, 3, 3);
    for (auto& v : img.data) v = u(rng);
    auto lab_t = rgb_to_lab_op(image_to_tensor<double>(img));
    Image lab_i = rgb_to_lab(img);
    for (size_t i = 0; i < lab_i.data.size(); ++i)
        CHECK(lab_t.data()[i] == Catch::Approx(static_cast<double>(lab_i.data[i])).margin(1e-4));
    auto rgb_t = lab_to_rgb_op(lab_t.detach());
    Image rgb_i = lab_to_rgb(lab_i);
    for (size_t i = 0; i < rgb_i.data.size(); ++i)
        CHECK(rgb_t.data()[i] == Catch::Approx(static_cast<double>(rgb_i.data[i])).margin(1e-4));
}

TEST_CASE("rgb_to_lab_op gradient matches finite differences") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    Tensor<double> x({3, 3, 3});
    for (auto& v : x.data()) v = u(rng);
    const double err = fd_max_rel_error(
        [](const Tensor<double>& in) { return rgb_to_lab_op(in); }, x, rng, 1e-6,
        [](double v) { return std::abs(v - 0.04045) < 1e-3; });
    CHECK(err < 1e-4);
}

TEST_CASE("lab_to_rgb_op gradient matches finite differences on in-gamut input") {
    std::mt19937_64 rng(43);
    std::uniform_real_distribution<double> u(0.2, 0.8);
    Image img(3, 3, 3);
    for (auto& v : img.data) v = static_cast<float>(u(rng));
    Tensor<double> lab = rgb_to_lab_op(image_to_tensor<double>(img)).detach();
    const double err = fd_max_rel_error(
        [](const Tensor<double>& in) { return lab_to_rgb_op(in); }, lab, rng, 1e-6);
    CHECK(err < 1e-4);
}

TEST_CASE("out-of-gamut Lab values clamp without NaNs and pass zero gradient") {
    auto lab = Tensor<double>::from({1, 1, 3}, {50.0, 200.0, -200.0}, true);
    auto rgb = lab_to_rgb_op(lab);
    CHECK(rgb.all_finite());
    for (double v : rgb.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

// ---------------------------------------------------------------------------
// Palette fitting and quantization
// ---------------------------------------------------------------------------

TEST_CASE("palette fitting is deterministic per seed") {
    std::mt19937_64 rng(47);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    std::vector<std::array<double, 3>> points(500);
    for (auto& p : points) p = {u(rng), u(rng) - 50.0, u(rng) - 50.0};
    Palette a = fit_palette(points, 16, 123);
    Palette b = fit_palette(points, 16, 123);
    REQUIRE(a.size() == 16);
    for (int k = 0; k < 16; ++k)
        for (int c = 0; c < 3; ++c)
            CHECK(a.centroids[static_cast<size_t>(k)][c] ==
                  b.centroids[static_cast<size_t>(k)][c]);
    Palette other = fit_palette(points, 16, 124);
    bool any_diff = false;
    for (int k = 0; k < 16 && !any_diff; ++k)
        any_diff = other.centroids[static_cast<size_t>(k)] != a.centroids[static_cast<size_t>(k)];
    CHECK(any_diff);  // seed actually feeds the initialization
}

TEST_CASE("well-separated clusters are recovered exactly") {
    // 16 tight blobs far apart: k-means must land one centroid per blob.
    std::mt19937_64 rng(53);
    std::normal_distribution<double> noise(0.0, 0.01);
    std::vector<std::array<double, 3>> truth;
    for (int k = 0; k < 16; ++k)
        truth.push_back({static_cast<double>(k * 50), static_cast<double>((k % 4) * 80),
                         static_cast<double>((k / 4) * 80)});
    std::vector<std::array<double, 3>> points;
    for (int rep = 0; rep < 40; ++rep)
        for (const auto& t : truth)
            points.push_back({t[0] + noise(rng), t[1] + noise(rng), t[2] + noise(rng)});
    Palette pal = fit_palette(points, 16, 7);
    for (const auto& t : truth) {
        double best = 1e18;
        for (const auto& c : pal.centroids) {
            double d = 0;
            for (int i = 0; i < 3; ++i) d += (t[i] - c[i]) * (t[i] - c[i]);
            best = std::min(best, d);
        }
        CHECK(std::sqrt(best) < 0.5);
    }
    CHECK(pal.inertia < 0.5 * static_cast<double>(points.size()));
}

TEST_CASE("single-cluster Gaussian blob centroid lands on the mean") {
    std::mt19937_64 rng(59);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<std::array<double, 3>> points;
    for (int i = 0; i < 4000; ++i)
        points.push_back({50.0 + noise(rng), 10.0 + noise(rng), -20.0 + noise(rng)});
    Palette pal = fit_palette(points, 1, 11);
    REQUIRE(pal.size() == 1);
    CHECK(pal.centroids[0][0] == Catch::Approx(50.0).margin(0.2));
    CHECK(pal.centroids[0][1] == Catch::Approx(10.0).margin(0.2));
    CHECK(pal.centroids[0][2] == Catch::Approx(-20.0).margin(0.2));
}

TEST_CASE("fewer distinct points than classes is rejected") {
    std::vector<std::array<double, 3>> points(100, {1.0, 2.0, 3.0});
    CHECK_THROWS_WITH(fit_palette(points, 16, 1),
                      Catch::Matchers::ContainsSubstring("distinct"));
}

TEST_CASE("assignment ties break to the lowest centroid index") {
    Palette pal;
    pal.centroids = {{0.0, 0.0, 0.0}, {2.0, 0.0, 0.0}};
    // the midpoint is equidistant from both
    CHECK(pal.assign(1.0, 0.0, 0.0) == 0);
    // swap order: still the lowest index wins
    Palette swapped;
    swapped.centroids = {{2.0, 0.0, 0.0}, {0.0, 0.0, 0.0}};
    CHECK(swapped.assign(1.0, 0.0, 0.0) == 0);
}

TEST_CASE("quantize pools 4x4 blocks before assigning") {
    // 4x8 Lab image: left block all (10,0,0), right block half 0 / half 40
    // so its pooled mean is 20 and must win centroid (22,...) over (10,...).
    Image lab(4, 8, 3);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 8; ++x) {
            float L = 10.f;
            if (x >= 4) L = (y < 2) ? 0.f : 40.f;
            lab.at(y, x, 0) = L;
        }
    Palette pal;
    pal.centroids = {{10.0, 0.0, 0.0}, {22.0, 0.0, 0.0}};
    QuantizedFrame q = quantize(lab, pal, 4);
    REQUIRE(q.height == 1);
    REQUIRE(q.width == 2);
    CHECK(q.class_ids[0] == 0);
    CHECK(q.class_ids[1] == 1);

    Image odd(5, 8, 3);
    CHECK_THROWS_AS(quantize(odd, pal, 4), std::invalid_argument);
}

TEST_CASE("one_hot layout") {
    QuantizedFrame q;
    q.height = 1;
    q.width = 2;
    q.class_ids = {3, 0};
    auto t = one_hot<double>(q, 4);
    REQUIRE(t.shape() == Shape{1, 2, 4});
    CHECK(t.data() == std::vector<double>{0, 0, 0, 1, 1, 0, 0, 0});
}

// ---------------------------------------------------------------------------
// Information bottleneck
// ---------------------------------------------------------------------------

TEST_CASE("bottleneck with no dropout and unit jitter is the identity") {
    std::mt19937_64 rng(61);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor<double> frame({4, 4, 3});
    for (auto& v : frame.data()) v = u(rng);
    auto out = apply_bottleneck(frame, {1.f, 1.f, 1.f}, JitterFactors{});
    for (size_t i = 0; i < frame.data().size(); ++i)
        CHECK(out.data()[i] == Catch::Approx(frame.data()[i]).margin(1e-12));
}

TEST_CASE("dropped channels are exactly zero") {
    Tensor<double> frame({2, 2, 3}, 0.5);
    auto out = apply_bottleneck(frame, {1.f, 0.f, 1.f}, JitterFactors{});
    for (int p = 0; p < 4; ++p) {
        CHECK(out.data()[static_cast<size_t>(p * 3 + 0)] == 0.5);
        CHECK(out.data()[static_cast<size_t>(p * 3 + 1)] == 0.0);
        CHECK(out.data()[static_cast<size_t>(p * 3 + 2)] == 0.5);
    }
}

TEST_CASE("dropout count distribution is uniform over 0/1/2") {
    BottleneckConfig cfg;
    std::mt19937_64 rng(67);
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < 30000; ++i) {
        auto mask = sample_dropout_mask(cfg, rng);
        int dropped = 0;
        for (float m : mask) dropped += (m == 0.f) ? 1 : 0;
        REQUIRE(dropped <= 2);
        ++counts[dropped];
    }
    for (int d = 0; d < 3; ++d)
        CHECK(std::abs(counts[d] / 30000.0 - 1.0 / 3) < 0.02);
}

TEST_CASE("jitter factors stay inside the +-10% band") {
    BottleneckConfig cfg;
    std::mt19937_64 rng(71);
    for (int i = 0; i < 1000; ++i) {
        JitterFactors j = sample_jitter(cfg, rng);
        for (double f : {j.brightness, j.contrast, j.saturation}) {
            CHECK(f >= 0.9);
            CHECK(f <= 1.1);
        }
    }
    cfg.jitter_range = 0.0;
    JitterFactors none = sample_jitter(cfg, rng);
    CHECK(none.brightness == 1.0);
    CHECK(none.contrast == 1.0);
    CHECK(none.saturation == 1.0);
}

TEST_CASE("bottleneck config validation") {
    BottleneckConfig bad;
    bad.drop_count_probs = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = BottleneckConfig{};
    bad.jitter_range = 0.6;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_NOTHROW(BottleneckConfig{}.validate());
}

TEST_CASE("bottleneck output stays in [0,1] and is differentiable") {
    std::mt19937_64 rng(73);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    Tensor<double> frame({4, 4, 3});
    for (auto& v : frame.data()) v = u(rng);
    JitterFactors j{1.05, 0.95, 1.08};
    const double err = fd_max_rel_error(
        [&](const Tensor<double>& in) {
            return apply_bottleneck(in, std::array<float, 3>{1.f, 1.f, 1.f}, j);
        },
        frame, rng, 1e-6);
    CHECK(err < 1e-4);
    auto out = apply_bottleneck(frame.detach(), {1.f, 0.f, 1.f}, JitterFactors{0.9, 1.1, 0.9});
    for (double v : out.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}
