#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dualsynth/checkpoint.hpp"

using namespace dualsynth;

namespace fs = std::filesystem;

namespace {

std::string scratch_path(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "dualsynth-ckpt-tests";
    fs::create_directories(dir);
    return (dir / name).string();
}

Checkpoint sample_checkpoint() {
    Checkpoint c;
    c.config_digest = 0xdeadbeefcafe1234ull;
    c.seed = 42;
    c.epoch = 7;
    Rng rng(3);
    std::vector<float> a(24), b(5);
    for (auto& f : a) f = static_cast<float>(rng.normal());
    for (auto& f : b) f = static_cast<float>(rng.normal());
    c.add("gen.head.w", {2, 3, 4}, a);
    c.add("d1.fc2.b", {5}, b);
    return c;
}

}  // namespace

TEST_CASE("checkpoints round-trip bitwise") {
    auto c = sample_checkpoint();
    auto path = scratch_path("roundtrip.ckpt");
    save_checkpoint(c, path);
    auto r = load_checkpoint(path);
    CHECK(r.version == kCheckpointVersion);
    CHECK(r.config_digest == c.config_digest);
    CHECK(r.seed == c.seed);
    CHECK(r.epoch == c.epoch);
    REQUIRE(r.names == c.names);
    CHECK(r.shapes == c.shapes);
    CHECK(r.values == c.values);
}

TEST_CASE("checkpoint loader refuses mismatches and corruption") {
    auto c = sample_checkpoint();
    auto path = scratch_path("guarded.ckpt");
    save_checkpoint(c, path);

    SECTION("digest check passes on the matching config and refuses others") {
        CHECK_NOTHROW(load_checkpoint(path, c.config_digest));
        try {
            load_checkpoint(path, 99u);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            std::string msg = e.what();
            CHECK(msg.find(std::to_string(c.config_digest)) != std::string::npos);
            CHECK(msg.find("99") != std::string::npos);
        }
    }
    SECTION("version mismatch names both versions") {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(6);
        char nine = 9;
        f.write(&nine, 1);
        f.close();
        try {
            load_checkpoint(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            std::string msg = e.what();
            CHECK(msg.find("9") != std::string::npos);
            CHECK(msg.find(std::to_string(kCheckpointVersion)) != std::string::npos);
        }
    }
    SECTION("truncated files are reported as such") {
        auto sz = fs::file_size(path);
        fs::resize_file(path, sz / 2);
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SECTION("arbitrary files are not checkpoints") {
        auto garbage = scratch_path("garbage.ckpt");
        std::ofstream g(garbage, std::ios::trunc);
        g << "definitely not binary tensors";
        g.close();
        CHECK_THROWS_AS(load_checkpoint(garbage), FormatError);
    }
    SECTION("missing files") {
        CHECK_THROWS_AS(load_checkpoint(scratch_path("nonexistent.ckpt")), FormatError);
    }
}

TEST_CASE("network parameters survive a checkpoint cycle") {
    auto original = build_generator<float>(2, 3, NormKind::kBatch, 99);
    Rng rng(7);
    auto x = Tensor<float>::normal({1, 5, 8, 8}, rng);

    original.bind_frozen();
    auto y_ref = generator_forward(original, x, false);

    Checkpoint c;
    checkpoint_add_params(c, "gen", original.params);
    checkpoint_add_params(c, "gen_state", original.state);

    // a differently-seeded net, overwritten in place from the checkpoint
    auto restored = build_generator<float>(2, 3, NormKind::kBatch, 123456);
    checkpoint_restore_params(c, "gen", restored.params);
    checkpoint_restore_params(c, "gen_state", restored.state);
    restored.bind_frozen();
    auto y = generator_forward(restored, x, false);

    REQUIRE(y.shape == y_ref.shape);
    for (int64_t i = 0; i < y.numel(); i++) REQUIRE(y[i] == y_ref[i]);
}

TEST_CASE("restore preserves shared auxiliary buffers") {
    // the spectral-norm power-iteration vectors are shared between the
    // net's layer state and its named state set; restoring must keep that
    // aliasing intact
    auto d2 = build_d2<float>(D2Config{}, 5);
    Checkpoint c;
    checkpoint_add_params(c, "d2", d2.params);
    checkpoint_add_params(c, "d2_state", d2.state);
    checkpoint_restore_params(c, "d2_state", d2.state);
    const int idx = d2.state.index_of("down0.conv.sn_u");
    REQUIRE(idx >= 0);
    CHECK(d2.state.values[size_t(idx)].data.get() == d2.sn[size_t(d2.down[0].sn)].u.data.get());
}

TEST_CASE("restore validates names and shapes") {
    auto c = sample_checkpoint();
    ParamSet<float> wrong_name;
    wrong_name.add("not.there", Tensor<float>::zeros({2}));
    CHECK_THROWS_AS(checkpoint_restore_params(c, "gen", wrong_name), FormatError);

    ParamSet<float> wrong_shape;
    wrong_shape.add("head.w", Tensor<float>::zeros({4, 3, 2}));
    CHECK_THROWS_AS(checkpoint_restore_params(c, "gen", wrong_shape), FormatError);
}
