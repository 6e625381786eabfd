#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "difflare/checkpoint.hpp"
#include "difflare/errors.hpp"
#include "difflare/nn.hpp"

using namespace difflare;

namespace {

std::string tmp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

Checkpoint sample_checkpoint() {
    Checkpoint ck;
    ck.arrays["b.weight"] = {{2, 3}, {1, 2, 3, 4, 5, 6}};
    ck.arrays["a.bias"] = {{2}, {0.5, -0.5}};
    ck.config_text = R"({"width":8})";
    ck.extra_text = R"({"note":1})";
    return ck;
}

}  // namespace

TEST_CASE("checkpoint roundtrip is lossless") {
    std::string path = tmp_path("difflare_ckpt_roundtrip.ckpt");
    Checkpoint ck = sample_checkpoint();
    save_checkpoint(path, ck);
    Checkpoint got = load_checkpoint(path);
    CHECK(got.arrays == ck.arrays);
    CHECK(got.config()["width"] == 8);
    CHECK(got.extra()["note"] == 1);
    CHECK(got.weight_hash == Checkpoint::hash_arrays(ck.arrays));
    std::filesystem::remove(path);
}

TEST_CASE("saving twice yields byte-identical files") {
    std::string p1 = tmp_path("difflare_ckpt_a.ckpt"), p2 = tmp_path("difflare_ckpt_b.ckpt");
    Checkpoint ck = sample_checkpoint();
    save_checkpoint(p1, ck);
    save_checkpoint(p2, ck);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("weight corruption is detected on load") {
    std::string path = tmp_path("difflare_ckpt_corrupt.ckpt");
    save_checkpoint(path, sample_checkpoint());
    // flip a byte in the trailing float payload
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-4, std::ios::end);
    char b = 0x7f;
    f.write(&b, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
    std::filesystem::remove(path);
}

TEST_CASE("bad magic and missing file raise io errors") {
    std::string path = tmp_path("difflare_ckpt_magic.ckpt");
    std::ofstream(path, std::ios::binary) << "NOTACKPT overwriting header";
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("param store hash is order-insensitive and content-sensitive") {
    nn::ParamStore a, b;
    auto t1 = a.add("w1", {2, 2});
    auto t2 = a.add("w2", {3});
    // same arrays registered in the opposite order
    auto u2 = b.add("w2", {3});
    auto u1 = b.add("w1", {2, 2});
    for (int i = 0; i < 4; ++i) t1->v[i] = u1->v[i] = i + 1;
    for (int i = 0; i < 3; ++i) t2->v[i] = u2->v[i] = -i;
    CHECK(a.content_hash() == b.content_hash());
    u1->v[0] += 1e-12;
    CHECK(a.content_hash() != b.content_hash());
}

TEST_CASE("param store load rejects mismatched shapes") {
    nn::ParamStore ps;
    ps.add("w", {2, 2});
    std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> m;
    m["w"] = {{3}, {1, 2, 3}};
    CHECK_THROWS_AS(ps.load(m), IoError);
}
