#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "difflare/errors.hpp"
#include "difflare/image.hpp"
#include "difflare/rng.hpp"

using namespace difflare;

namespace {

ImageRGB uniform_image(int h, int w, double v) {
    ImageRGB img(h, w);
    for (auto& p : img.px) p = v;
    return img;
}

ImageRGB random_image(int h, int w, uint64_t seed) {
    ImageRGB img(h, w);
    Rng rng(seed);
    for (auto& p : img.px) p = rng.uniform();
    return img;
}

}  // namespace

TEST_CASE("psnr closed-form cases") {
    ImageRGB a = uniform_image(16, 16, 0.5);
    ImageRGB b = uniform_image(16, 16, 0.6);  // uniform offset 0.1 -> MSE 0.01 -> 20 dB
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
    ImageRGB c = uniform_image(16, 16, 0.51);  // offset 0.01 -> 40 dB
    CHECK(psnr(a, c) == doctest::Approx(40.0).epsilon(1e-9));
    CHECK(psnr(a, a) == 100.0);  // capped
    CHECK(psnr(a, b) == psnr(b, a));
}

TEST_CASE("ssim identity and sensitivity") {
    ImageRGB a = random_image(24, 24, 11);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    ImageRGB b = a;
    Rng rng(12);
    for (auto& p : b.px) p = std::clamp(p + 0.1 * rng.normal(), 0.0, 1.0);
    double s = ssim(a, b);
    CHECK(s < 1.0);
    CHECK(s > 0.0);
    ImageRGB c = a;
    for (auto& p : c.px) p = std::clamp(p + 0.3 * (Rng(13).normal()), 0.0, 1.0);
    CHECK(ssim(a, b) <= 1.0);
}

TEST_CASE("ssim window minimum size enforced") {
    CHECK_THROWS_AS(ImageRGB(4, 4), DimensionError);
}

TEST_CASE("ycbcr bt601 roundtrip and anchors") {
    ImageRGB a = random_image(12, 12, 21);
    ImageRGB back = ycbcr_to_rgb(rgb_to_ycbcr(a));
    // inverse coefficients are the conventional 6-digit constants
    double max_err = 0;
    for (size_t i = 0; i < a.px.size(); ++i)
        max_err = std::max(max_err, std::abs(back.px[i] - a.px[i]));
    CHECK(max_err < 1e-5);

    // black -> Y=0, white -> Y=1; pure colors match BT.601 luma weights
    ImageRGB w = uniform_image(8, 8, 1.0);
    CHECK(rgb_to_ycbcr(w).at(0, 0, 0) == doctest::Approx(1.0));
    ImageRGB k = uniform_image(8, 8, 0.0);
    CHECK(rgb_to_ycbcr(k).at(0, 0, 0) == doctest::Approx(0.0));
    ImageRGB r = uniform_image(8, 8, 0.0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) r.at(y, x, 0) = 1.0;
    CHECK(rgb_to_ycbcr(r).at(0, 0, 0) == doctest::Approx(0.299));
}

TEST_CASE("png roundtrip at 8-bit resolution") {
    ImageRGB a = random_image(16, 20, 31);
    // snap to the 8-bit grid first so the roundtrip is exact
    for (auto& p : a.px) p = std::round(p * 255.0) / 255.0;
    std::string path =
        (std::filesystem::temp_directory_path() / "difflare_png_roundtrip.png").string();
    write_png(path, a);
    ImageRGB b = read_png(path);
    REQUIRE(b.h == a.h);
    REQUIRE(b.w == a.w);
    for (size_t i = 0; i < a.px.size(); ++i)
        CHECK(b.px[i] == doctest::Approx(a.px[i]).epsilon(1e-12));
    std::filesystem::remove(path);
    CHECK_THROWS_AS(read_png(path), IoError);
}

TEST_CASE("gamma helpers invert each other") {
    for (double v : {0.0, 0.01, 0.2, 0.5, 0.9, 1.0}) {
        CHECK(srgb_encode(srgb_decode(v)) == doctest::Approx(v).epsilon(1e-12));
    }
}
