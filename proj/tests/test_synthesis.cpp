#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "difflare/errors.hpp"
#include "difflare/synthesis.hpp"

using namespace difflare;

TEST_CASE("composite adds nothing when flares are zero") {
    ImageRGB bg = procedural_background(5, 32, 32);
    ImageRGB light = procedural_light(0.4, 0.6, 32, 32, 6);
    ImageRGB zero(32, 32);
    ImageRGB gt = composite({bg, light});
    ImageRGB with_zero = composite({bg, light, zero, zero});
    REQUIRE(gt.px.size() == with_zero.px.size());
    for (size_t i = 0; i < gt.px.size(); ++i) CHECK(gt.px[i] == with_zero.px[i]);  // bitwise
}

TEST_CASE("composite is clipped and linear-light additive") {
    ImageRGB a(16, 16), b(16, 16);
    for (auto& v : a.px) v = 0.9;
    for (auto& v : b.px) v = 0.9;
    ImageRGB c = composite({a, b});
    for (auto v : c.px) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(c.px[0] == doctest::Approx(1.0));  // saturates
    ImageRGB z(16, 16);
    ImageRGB id = composite({a, z});
    for (size_t i = 0; i < a.px.size(); ++i)
        CHECK(id.px[i] == doctest::Approx(a.px[i]).epsilon(1e-12));
}

TEST_CASE("augment parameters stay in their documented ranges") {
    Rng rng(77);
    for (int i = 0; i < 500; ++i) {
        AugmentSpec s = sample_augment(rng, 128, 128, 64);
        CHECK(s.rotation_deg >= 0.0);
        CHECK(s.rotation_deg < 360.0);
        CHECK(s.scale >= 0.8);
        CHECK(s.scale <= 1.5);
        CHECK(s.flare_gain >= 0.8);
        CHECK(s.flare_gain <= 3.0);
        CHECK(s.crop_x >= 0);
        CHECK(s.crop_x + 64 <= 128);
        CHECK(s.crop_y >= 0);
        CHECK(s.crop_y + 64 <= 128);
    }
}

TEST_CASE("procedural assets have the advertised structure") {
    FlareParams p;
    p.center_x = 0.5;
    p.center_y = 0.5;
    ImageRGB sc = procedural_flare(FlareKind::scattering, p, 64, 64, 9);
    // center pixel carries the peak
    double cmax = 0;
    for (auto v : sc.px) cmax = std::max(cmax, v);
    double center = std::max({sc.at(32, 32, 0), sc.at(32, 32, 1), sc.at(32, 32, 2)});
    CHECK(center == doctest::Approx(cmax));
    ImageRGB rf = procedural_flare(FlareKind::reflective, p, 64, 64, 10);
    double rmax = 0;
    for (auto v : rf.px) rmax = std::max(rmax, v);
    CHECK(rmax > 0.0);
    CHECK(rmax < 0.6);  // reflective ghosts are low-opacity
    ImageRGB lt = procedural_light(0.5, 0.5, 64, 64, 11);
    double lmax = 0;
    for (auto v : lt.px) lmax = std::max(lmax, v);
    CHECK(lmax >= 0.9);
    CHECK(lmax <= 1.0);
}

TEST_CASE("samples are exact on flare-free pixels and replayable") {
    CorpusConfig cfg;
    cfg.train_backgrounds = 8;
    cfg.test_backgrounds = 4;
    cfg.crop = 32;
    cfg.seed = 3;
    DatasetStream train(cfg, Split::train);
    REQUIRE(train.size() == 8);
    int checked = 0;
    for (int i = 0; i < train.size(); ++i) {
        FlareSample s = train.sample(i);
        REQUIRE(s.gt.h == 32);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                bool flare_free = true;
                for (int c = 0; c < 3; ++c)
                    if (s.reflective.at(y, x, c) != 0.0 || s.scattering.at(y, x, c) != 0.0)
                        flare_free = false;
                if (!flare_free) continue;
                ++checked;
                for (int c = 0; c < 3; ++c) CHECK(s.input.at(y, x, c) == s.gt.at(y, x, c));
            }
    }
    CHECK(checked > 0);

    // bit-identical regeneration
    DatasetStream again(cfg, Split::train);
    for (int i = 0; i < train.size(); ++i) {
        FlareSample a = train.sample(i), b = again.sample(i);
        CHECK(a.input.px == b.input.px);
        CHECK(a.gt.px == b.gt.px);
        CHECK(a.seed == b.seed);
    }
}

TEST_CASE("train and test pools are disjoint") {
    CorpusConfig cfg;
    cfg.train_backgrounds = 6;
    cfg.test_backgrounds = 6;
    cfg.crop = 32;
    cfg.seed = 4;
    DatasetStream train(cfg, Split::train), test(cfg, Split::test);
    for (int i = 0; i < train.size(); ++i)
        for (int j = 0; j < test.size(); ++j)
            CHECK(train.sample(i).background_id != test.sample(j).background_id);
}

TEST_CASE("noflare samples are degenerate pairs") {
    CorpusConfig cfg;
    cfg.train_backgrounds = 16;
    cfg.crop = 32;
    cfg.noflare_prob = 1.0;
    cfg.seed = 5;
    DatasetStream train(cfg, Split::train);
    for (int i = 0; i < train.size(); ++i) {
        FlareSample s = train.sample(i);
        CHECK(s.input.px == s.gt.px);
        for (auto v : s.reflective.px) CHECK(v == 0.0);
        for (auto v : s.scattering.px) CHECK(v == 0.0);
    }
}

TEST_CASE("corpus writer produces a manifest and is loadable") {
    CorpusConfig cfg;
    cfg.train_backgrounds = 3;
    cfg.test_backgrounds = 2;
    cfg.crop = 32;
    cfg.seed = 6;
    std::string dir =
        (std::filesystem::temp_directory_path() / "difflare_corpus_test").string();
    std::filesystem::remove_all(dir);
    write_corpus(cfg, dir);
    CHECK(std::filesystem::exists(dir + "/manifest.jsonl"));
    CorpusConfig folder_cfg = cfg;
    folder_cfg.kind = "folder";
    folder_cfg.folder = dir;
    DatasetStream train(folder_cfg, Split::train);
    CHECK(train.size() == 3);
    FlareSample s = train.sample(0);
    CHECK(s.input.h == 32);
    std::filesystem::remove_all(dir);
}

TEST_CASE("bad sample index rejected") {
    CorpusConfig cfg;
    cfg.train_backgrounds = 2;
    cfg.crop = 32;
    DatasetStream train(cfg, Split::train);
    CHECK_THROWS_AS(train.sample(99), ParameterError);
}
