#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "difflare/errors.hpp"
#include "difflare/lgp.hpp"
#include "difflare/rng.hpp"

using namespace difflare;

namespace {

ImageRGB solid(int h, int w, double v) {
    ImageRGB img(h, w);
    for (auto& p : img.px) p = v;
    return img;
}

}  // namespace

TEST_CASE("threshold semantics") {
    ImageRGB black = solid(8, 8, 0.0);
    for (auto m : luminance_mask(black, 0.85).mask) CHECK(m == 1);  // all flare-free
    ImageRGB white = solid(8, 8, 1.0);
    for (auto m : luminance_mask(white, 0.85).mask) CHECK(m == 0);  // all flare

    // monotone in s: raising the threshold can only add flare-free pixels
    ImageRGB img(16, 16);
    Rng rng(42);
    for (auto& p : img.px) p = rng.uniform();
    LuminanceMask lo = luminance_mask(img, 0.3);
    LuminanceMask hi = luminance_mask(img, 0.9);
    for (size_t i = 0; i < lo.mask.size(); ++i)
        if (lo.mask[i]) CHECK(hi.mask[i] == 1);
}

TEST_CASE("threshold validation") {
    ImageRGB img = solid(8, 8, 0.5);
    CHECK_THROWS_AS(luminance_mask(img, 0.0), ParameterError);
    CHECK_THROWS_AS(luminance_mask(img, 1.0), ParameterError);
    CHECK_THROWS_AS(luminance_mask(img, -0.2), ParameterError);
}

TEST_CASE("attention mask rows are constant and silu-bounded") {
    ImageRGB img(32, 32);
    Rng rng(43);
    for (auto& p : img.px) p = rng.uniform();
    AttentionMask am = to_attention_mask(luminance_mask(img, 0.6), 8, 8);
    std::vector<double> full = am.materialize();
    int n = 64;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            CHECK(full[static_cast<size_t>(i) * n + j] == am.row[j]);  // row-constant
            CHECK(am.entry(i, j) == am.row[j]);
        }
    // pooled in [0,1] so silu output sits in [0, silu(1)]
    for (double v : am.row) {
        CHECK(v >= 0.0);
        CHECK(v <= silu_scalar(1.0));
    }
    CHECK(silu_scalar(1.0) == doctest::Approx(0.7310585786300049));
}

TEST_CASE("exhaustive 4x4 -> 2x2 pooling case") {
    // quadrant sums 3, 0, 1, 4 out of 4 pixels each
    LuminanceMask lm;
    lm.h = 4;
    lm.w = 4;
    lm.mask = {1, 1, 0, 0,
               1, 0, 0, 0,
               0, 0, 1, 1,
               0, 1, 1, 1};
    AttentionMask am = to_attention_mask(lm, 2, 2);
    CHECK(am.pooled[0] == doctest::Approx(0.75));
    CHECK(am.pooled[1] == doctest::Approx(0.0));
    CHECK(am.pooled[2] == doctest::Approx(0.25));
    CHECK(am.pooled[3] == doctest::Approx(1.0));
    CHECK(am.row[0] == doctest::Approx(0.50938402438154473));  // silu(0.75)
    CHECK(am.row[1] == doctest::Approx(0.0));
    CHECK(am.row[2] == doctest::Approx(0.14054412522144952));  // silu(0.25)
    CHECK(am.row[3] == doctest::Approx(0.7310585786300049));   // silu(1)
}

TEST_CASE("uneven pooling uses exact bin averages") {
    LuminanceMask lm;
    lm.h = 5;
    lm.w = 5;
    lm.mask.assign(25, 1);
    lm.mask[0] = 0;
    AttentionMask am = to_attention_mask(lm, 2, 2);
    // bins are 2x2 / 2x3 / 3x2 / 3x3; only the first misses a pixel
    CHECK(am.pooled[0] == doctest::Approx(3.0 / 4.0));
    CHECK(am.pooled[1] == doctest::Approx(1.0));
    CHECK(am.pooled[2] == doctest::Approx(1.0));
    CHECK(am.pooled[3] == doctest::Approx(1.0));
}

TEST_CASE("gradient dilation only removes flare-free pixels") {
    ImageRGB img(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = x < 8 ? 0.1 : 1.0;  // hard edge
    LuminanceMask base = luminance_mask(img, 0.85, false);
    LuminanceMask dil = luminance_mask(img, 0.85, true);
    for (size_t i = 0; i < base.mask.size(); ++i) CHECK(dil.mask[i] <= base.mask[i]);
}

TEST_CASE("latent shape validation") {
    ImageRGB img = solid(8, 8, 0.2);
    LuminanceMask lm = luminance_mask(img, 0.5);
    CHECK_THROWS_AS(to_attention_mask(lm, 0, 4), ParameterError);
    CHECK_THROWS_AS(to_attention_mask(lm, 16, 16), DimensionError);
}
