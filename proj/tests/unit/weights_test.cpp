#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "oracles.hpp"
#include "transnetr/model.hpp"
#include "transnetr/weights.hpp"

using namespace transnetr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "transnetr_weights_test";
    fs::create_directories(dir);
    return dir;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("archive: save -> load -> save is byte-identical") {
    auto dir = temp_dir();
    WeightArchive archive;
    archive.add_meta("model.preset", "tiny");
    archive.add_meta("step", "17");
    Rng rng(3);
    archive.add_tensor("a.weight", {2, 3}, {1.5f, -2.25f, 0.0f, 4.0f, 5.0f, -6.5f});
    archive.add_tensor("b.bias", {4}, {0.1f, 0.2f, 0.3f, 0.4f});
    archive.blobs.push_back(WeightArchive::BlobEntry{"rng_state", {'s', 'e', 'e', 'd'}});

    const auto p1 = dir / "a1.tnr";
    const auto p2 = dir / "a2.tnr";
    save_archive(p1, archive);
    auto loaded = load_archive(p1);
    save_archive(p2, loaded);
    CHECK(read_bytes(p1) == read_bytes(p2));

    CHECK(loaded.tensors.size() == 2);
    CHECK(loaded.tensors[0].name == "a.weight");
    CHECK(loaded.tensors[0].shape == Shape{2, 3});
    CHECK(loaded.tensors[0].data == archive.tensors[0].data);
    REQUIRE(loaded.find_meta("step") != nullptr);
    CHECK(*loaded.find_meta("step") == "17");
    REQUIRE(loaded.blobs.size() == 1);
    CHECK(loaded.blobs[0].bytes == archive.blobs[0].bytes);
}

TEST_CASE("archive: truncation and corruption are rejected") {
    auto dir = temp_dir();
    WeightArchive archive;
    archive.add_tensor("w", {8}, std::vector<float>(8, 1.0f));
    const auto path = dir / "t.tnr";
    save_archive(path, archive);

    auto bytes = read_bytes(path);
    SUBCASE("truncated file") {
        std::ofstream out(dir / "trunc.tnr", std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size() - 9));
        out.close();
        CHECK_THROWS_WITH_AS(load_archive(dir / "trunc.tnr"), doctest::Contains("truncated"),
                             std::runtime_error);
    }
    SUBCASE("flipped payload byte fails the integrity check") {
        bytes[bytes.size() - 12] ^= 0x5A;
        std::ofstream out(dir / "corrupt.tnr", std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        out.close();
        CHECK_THROWS_WITH_AS(load_archive(dir / "corrupt.tnr"), doctest::Contains("integrity"),
                             std::runtime_error);
    }
    SUBCASE("not an archive") {
        std::ofstream out(dir / "junk.tnr", std::ios::binary);
        out << "hello";
        out.close();
        CHECK_THROWS_WITH_AS(load_archive(dir / "junk.tnr"), doctest::Contains("magic"),
                             std::runtime_error);
    }
}

TEST_CASE("registry round trip restores every tensor bitwise") {
    ModelConfig cfg;
    cfg.encoder_preset = EncoderPreset::Tiny;
    auto model = build_model(cfg, 5);
    auto archive = archive_from_registry(model.registry());

    auto dir = temp_dir();
    const auto path = dir / "model.tnr";
    save_archive(path, archive);
    auto loaded = load_archive(path);

    auto other = build_model(cfg, 6);  // different init
    apply_archive_to_registry(loaded, other.registry(), true);
    for (std::size_t i = 0; i < model.registry().entries.size(); ++i) {
        CHECK(model.registry().entries[i].tensor.values() ==
              other.registry().entries[i].tensor.values());
    }
}

TEST_CASE("archive application errors name the offending tensor") {
    ModelConfig tiny;
    tiny.encoder_preset = EncoderPreset::Tiny;
    auto model = build_model(tiny, 5);
    auto archive = archive_from_registry(model.registry());

    SUBCASE("preset mismatch is a shape error naming the first tensor") {
        auto big = build_model(ModelConfig{}, 5);
        CHECK_THROWS_WITH_AS(apply_archive_to_registry(archive, big.registry(), true),
                             doctest::Contains("encoder.stem.conv.weight"), std::runtime_error);
    }
    SUBCASE("unknown tensor is rejected by name") {
        archive.add_tensor("mystery.weight", {2}, {1.0f, 2.0f});
        CHECK_THROWS_WITH_AS(apply_archive_to_registry(archive, model.registry(), true),
                             doctest::Contains("mystery.weight"), std::runtime_error);
    }
    SUBCASE("missing tensor is reported when completeness is required") {
        WeightArchive partial;
        partial.add_tensor("encoder.stem.conv.weight",
                           model.registry().entries[0].tensor.shape(),
                           model.registry().entries[0].tensor.values());
        CHECK_THROWS_WITH_AS(apply_archive_to_registry(partial, model.registry(), true),
                             doctest::Contains("missing tensor"), std::runtime_error);
        // partial import (the pretrained-weight hook) is fine without the flag
        CHECK_NOTHROW(apply_archive_to_registry(partial, model.registry(), false));
    }
}
