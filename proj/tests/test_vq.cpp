#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "difflare/errors.hpp"
#include "difflare/vq.hpp"

using namespace difflare;
namespace ag = difflare::ag;

namespace {

VqConfig tiny_config() {
    VqConfig c;
    c.width = 8;
    c.embed_dim = 4;
    c.codebook = 16;
    c.downsample = 2;
    return c;
}

ImageRGB random_image(int h, int w, uint64_t seed) {
    ImageRGB img(h, w);
    Rng rng(seed);
    for (auto& p : img.px) p = rng.uniform();
    return img;
}

}  // namespace

TEST_CASE("latent geometry follows the downsample factor") {
    VqModel m(tiny_config(), 1);
    ImageRGB img = random_image(16, 16, 2);
    LatentTensor z = m.encode(img);
    CHECK(z.c == 4);
    CHECK(z.h == 8);
    CHECK(z.w == 8);
    ImageRGB rec = m.decode(z);
    CHECK(rec.h == 16);
    CHECK(rec.w == 16);
    for (double v : rec.px) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);  // sigmoid head keeps decodes in range
    }
}

TEST_CASE("encode rejects incompatible shapes") {
    VqConfig c = tiny_config();
    c.downsample = 4;
    VqModel m(c, 1);
    CHECK_THROWS_AS(m.encode(random_image(18, 18, 3)), DimensionError);
    CHECK_THROWS_AS(m.decode(LatentTensor(7, 4, 4)), DimensionError);
}

TEST_CASE("config validation") {
    VqConfig c = tiny_config();
    c.codebook = 4;
    CHECK_THROWS_AS(VqModel(c, 1), ConfigError);
    c = tiny_config();
    c.downsample = 3;
    CHECK_THROWS_AS(VqModel(c, 1), ConfigError);
}

TEST_CASE("nearest codes are valid indices and deterministic") {
    VqModel m(tiny_config(), 4);
    ImageRGB img = random_image(16, 16, 5);
    ag::Tensor ze = m.encode_raw(image_to_tensor(img));
    auto idx = m.nearest_codes(ze);
    CHECK(idx.size() == 64);
    for (int k : idx) {
        CHECK(k >= 0);
        CHECK(k < 16);
    }
    CHECK(idx == m.nearest_codes(ze));
    double usage = codebook_usage(m, {img});
    CHECK(usage > 0.0);
    CHECK(usage <= 1.0);
}

TEST_CASE("taps share the latent resolution and channel budget") {
    VqModel m(tiny_config(), 6);
    ImageRGB img = random_image(16, 16, 7);
    ag::Tensor enc = m.encoder_tap(img);
    CHECK(enc->shape == std::vector<int>{m.tap_channels(), 8, 8});
    ag::Tensor dec = m.decoder_tap(m.encode(img));
    CHECK(dec->shape == std::vector<int>{m.tap_channels(), 8, 8});
}

TEST_CASE("checkpoint roundtrip preserves encode/decode bitwise") {
    VqModel m(tiny_config(), 8);
    m.latent_scale = 1.7;
    std::string path =
        (std::filesystem::temp_directory_path() / "difflare_vq_test.ckpt").string();
    m.save(path);
    VqModel n = VqModel::load(path);
    CHECK(n.latent_scale == 1.7);
    CHECK(m.params().content_hash() == n.params().content_hash());
    ImageRGB img = random_image(16, 16, 9);
    CHECK(m.encode(img).v == n.encode(img).v);
    CHECK(m.decode(m.encode(img)).px == n.decode(n.encode(img)).px);
    std::filesystem::remove(path);
}

TEST_CASE("training contract: zero steps cannot halve the loss") {
    CorpusConfig cc;
    cc.train_backgrounds = 2;
    cc.test_backgrounds = 2;
    cc.crop = 16;
    cc.seed = 10;
    DatasetStream train(cc, Split::train), val(cc, Split::test);
    VqConfig c = tiny_config();
    c.steps = 0;
    VqModel m(c, 11);
    CHECK_THROWS_AS(pretrain_vq(m, train, val, 12), TrainingError);
}
